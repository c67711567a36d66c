import numpy as np
import pytest

from rma2 import sense
from rma2.library import make_instance
from rma2.sim import KIND_FREE, KIND_NONE, ArmConfig, Scene, initial_state, tcp_pose

ARM = ArmConfig()


def _scene(verts=None, fixtures=None, b=1):
    fa = np.zeros((b, 0, 2)) if fixtures is None else fixtures[0]
    fb = np.zeros((b, 0, 2)) if fixtures is None else fixtures[1]
    if verts is None:
        return Scene(KIND_NONE, np.zeros((b, 3, 2)), np.zeros(b), fa, fb)
    return Scene(KIND_FREE, np.tile(verts, (b, 1, 1)), np.ones(b), fa, fb)


def _home_state(obj_pose=(0.0, 0.0, 0.0)):
    return initial_state(ARM, np.array([obj_pose], dtype=float))


def test_ray_angles_centred_and_even():
    off = sense.ScanConfig().offsets()
    assert len(off) == 64
    assert off[0] == pytest.approx(-np.pi / 3) and off[-1] == pytest.approx(np.pi / 3)
    np.testing.assert_allclose(np.diff(off), np.diff(off)[0])
    np.testing.assert_allclose(off + off[::-1], 0.0, atol=1e-15)


def test_empty_scene_reads_all_ones():
    s = _home_state()
    # the degenerate object polygon (all points at the origin) has only zero-length edges
    d = sense.render_depth(s, _scene(), ARM)
    assert d.shape == (1, 64)
    assert np.all(d == 1.0)


def test_perpendicular_wall_at_half_metre():
    s = _home_state()
    tcp, heading = tcp_pose(ARM, s.joint_pos)
    fwd = np.array([np.cos(heading[0]), np.sin(heading[0])])
    side = np.array([-fwd[1], fwd[0]])
    centre = tcp[0] + 0.5 * fwd
    wall = (centre - 2 * side)[None, None], (centre + 2 * side)[None, None]
    cfg = sense.ScanConfig(rays=65)  # odd count puts a ray exactly on the axis
    d = sense.render_depth(s, _scene(fixtures=wall), ARM, cfg)
    assert d[0, 32] == pytest.approx(0.5, abs=1e-12)
    # off-axis rays hit the same wall further away: 0.5 / cos(angle)
    np.testing.assert_allclose(d[0], np.minimum(0.5 / np.cos(cfg.offsets()), 1.0), atol=1e-12)


def test_object_behind_camera_is_invisible():
    s = _home_state()
    tcp, heading = tcp_pose(ARM, s.joint_pos)
    back = tcp[0] - 0.2 * np.array([np.cos(heading[0]), np.sin(heading[0])])
    verts = make_instance("box", {"width": 0.04, "length": 0.08}).vertices
    s = _home_state((back[0], back[1], 0.3))
    scan = sense.render_depth(s, _scene(verts), ARM)
    assert np.all(scan == 1.0)


def test_object_in_front_is_seen_and_render_is_pure():
    s = _home_state()
    tcp, heading = tcp_pose(ARM, s.joint_pos)
    front = tcp[0] + 0.2 * np.array([np.cos(heading[0]), np.sin(heading[0])])
    verts = make_instance("box", {"width": 0.04, "length": 0.08}).vertices
    s = _home_state((front[0], front[1], heading[0]))  # near face square to the view axis
    a = sense.render_depth(s, _scene(verts), ARM)
    b = sense.render_depth(s, _scene(verts), ARM)
    # nearest face is 0.16 away; the closest ray sits half a ray spacing off-axis
    half_step = np.diff(sense.ScanConfig().offsets())[0] / 2
    assert a.min() == pytest.approx(0.16 / np.cos(half_step), abs=1e-9)
    assert np.all((a >= 0) & (a <= 1))
    assert a.tobytes() == b.tobytes()


def test_ray_count_only_changes_length():
    s = _home_state()
    for rays in (8, 64, 100):
        assert sense.render_depth(s, _scene(), ARM, sense.ScanConfig(rays=rays)).shape == (1, rays)


def test_zero_noise_is_exact_projection():
    s = _home_state((0.5, 0.1, 0.3))
    x = sense.observe(s, ARM, sense.NoiseSpec.zero(), np.random.default_rng(0).random((1, 7)))
    tcp, heading = tcp_pose(ARM, s.joint_pos)
    np.testing.assert_array_equal(x[0, :5], s.joint_pos[0])
    np.testing.assert_array_equal(x[0, 5:10], s.joint_vel[0])
    np.testing.assert_allclose(x[0, 10:12], tcp[0])
    assert x[0, 12] ** 2 + x[0, 13] ** 2 == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(x[0, 14:16], [0.5, 0.1])
    assert x[0, 16] == pytest.approx(np.linalg.norm(tcp[0] - [0.5, 0.1]), abs=1e-15)


def test_joint_noise_within_bound():
    b = 2000
    s = initial_state(ARM, np.zeros((b, 3)))
    x = sense.observe(s, ARM, sense.NoiseSpec(), np.random.default_rng(1).random((b, 7)))
    err = x[:, :4] - s.joint_pos[:, :4]
    assert np.abs(err).max() <= 0.005 + 1e-15
    assert np.abs(err).max() > 0.004  # noise actually applied
    np.testing.assert_array_equal(x[:, 4], s.joint_pos[:, 4])


def test_distance_uses_noised_object_position():
    b = 2000
    s = initial_state(ARM, np.zeros((b, 3)))
    tcp, _ = tcp_pose(ARM, s.joint_pos)
    s.object_pose[:, :2] = tcp
    x = sense.observe(s, ARM, sense.NoiseSpec(), np.random.default_rng(2).random((b, 7)))
    assert np.all(x[:, 16] <= np.sqrt(2) * 0.005 + 1e-15)
    np.testing.assert_allclose(x[:, 16], np.linalg.norm(x[:, 14:16] - tcp, axis=1), atol=1e-15)


def test_noise_is_zero_mean():
    n = 100_000
    s = initial_state(ARM, np.zeros((n, 3)))
    x = sense.observe(s, ARM, sense.NoiseSpec(), np.random.default_rng(3).random((n, 7)))
    noise = x[:, :4] - s.joint_pos[:, :4]
    sigma = 0.005 / np.sqrt(3)  # std of U(-a, a)
    assert np.all(np.abs(noise.mean(axis=0)) < 3 * sigma / np.sqrt(n))


def test_noise_spec_rejects_negative_bounds():
    with pytest.raises(ValueError):
        sense.NoiseSpec(obj_pos_bound=-1.0)


def test_rotation_noise_within_bound():
    theta = np.zeros(5000)
    rot = sense.noisy_rotation(theta, sense.NoiseSpec(), np.random.default_rng(4).random(5000))
    ang = np.arctan2(rot[:, 1], rot[:, 0])
    assert np.abs(ang).max() <= np.deg2rad(10) + 1e-12


def test_scan_csv_rows():
    scans = np.full((2, 4), 0.5)
    text = sense.scan_csv(sense.scan_csv_rows(scans, np.array([3, 4]), 7), 4)
    lines = text.splitlines()
    assert lines[0] == "episode,step,d0,d1,d2,d3"
    assert lines[1] == "3,7,0.500000,0.500000,0.500000,0.500000"
