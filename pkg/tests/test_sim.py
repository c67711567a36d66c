import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rma2.errors import NonFiniteError, Rma2Error
from rma2.library import make_instance
from rma2.sim import (
    KIND_FREE,
    KIND_NONE,
    ArmConfig,
    DisturbanceSpec,
    EnvParams,
    Scene,
    Simulator,
    grasp_check,
    hold_force,
    initial_state,
    tcp_pose,
    update_disturbance,
)

ARM = ArmConfig()


def params(b=1, friction=0.8, force_scale=1.0, prob=0.0):
    return EnvParams(
        scale_mult=np.ones(b),
        density_mult=np.ones(b),
        friction=np.full(b, friction),
        instance_id=np.zeros(b, np.int64),
        category_id=np.zeros(b, np.int64),
        force_scale=np.full(b, force_scale),
        disturb_prob=np.full(b, prob),
        task_slot=np.zeros((b, 2)),
    )


def empty_scene(b=1):
    return Scene(KIND_NONE, np.zeros((b, 3, 2)), np.zeros(b), np.zeros((b, 0, 2)), np.zeros((b, 0, 2)))


def box_scene(b=1, width=0.04, length=0.08):
    verts = make_instance("box", {"width": width, "length": length}).vertices
    return Scene(KIND_FREE, np.tile(verts, (b, 1, 1)), np.full(b, 0.032), np.zeros((b, 0, 2)), np.zeros((b, 0, 2)))


def test_substeps_from_rates():
    assert ArmConfig().substeps == 6
    with pytest.raises(ValueError):
        ArmConfig(sim_hz=125)
    with pytest.raises(ValueError):
        ArmConfig(kp=0.0)


def test_home_pose_puts_tcp_in_front_of_base():
    tcp, heading = tcp_pose(ARM, np.array([list(ARM.home) + [0.08]]))
    np.testing.assert_allclose(tcp[0], [0.3, 0.0], atol=2e-3)
    assert abs(heading[0]) < 2e-3


def test_zero_action_at_rest_is_a_fixed_point():
    sim = Simulator(ARM, empty_scene())
    s0 = initial_state(ARM, np.zeros((1, 3)))
    s = s0
    for _ in range(5):
        s = sim.step(s, np.zeros((1, ARM.dof)), params(), np.full((1, 3), 0.5))
    np.testing.assert_allclose(s.joint_pos, s0.joint_pos, atol=1e-9, rtol=0)
    assert s.time_step[0] == 5


def test_first_substep_torque_is_kp_times_error():
    # q = 0, target = 1, qdot = 0: one substep of semi-implicit Euler gives qdot = dt * tau / I
    arm = ArmConfig(home=(0.0, 0.0, 0.0, 0.0))
    sim = Simulator(arm, empty_scene())
    s = initial_state(arm, np.zeros((1, 3)), np.zeros((1, 5)))
    s.joint_targets[0, 0] = 1.0
    sim._substep(s, params(), np.zeros((1, 2)), arm.dt)
    tau = s.joint_vel[0, 0] * arm.joint_inertia / arm.dt
    assert tau == pytest.approx(4.0, rel=1e-12)


def test_exactly_six_substeps_per_step(monkeypatch):
    sim = Simulator(ARM, empty_scene())
    calls = []
    orig = sim._substep
    monkeypatch.setattr(sim, "_substep", lambda *a: (calls.append(1), orig(*a)))
    sim.step(initial_state(ARM, np.zeros((1, 3))), np.zeros((1, 5)), params(), np.zeros((1, 3)))
    assert len(calls) == 6


def test_action_is_delta_target_scaled():
    sim = Simulator(ARM, empty_scene())
    s0 = initial_state(ARM, np.zeros((1, 3)))
    a = np.array([[1.0, -0.5, 0.0, 0.25, -1.0]])
    s = sim.step(s0, a, params(), np.zeros((1, 3)))
    np.testing.assert_allclose(s.joint_targets - s0.joint_targets, [[0.1, -0.05, 0.0, 0.025, -0.02]], atol=1e-15)


def test_joint_limits_clamp():
    sim = Simulator(ARM, empty_scene())
    s = initial_state(ARM, np.zeros((1, 3)))
    for _ in range(60):
        s = sim.step(s, np.ones((1, 5)), params(), np.zeros((1, 3)))
    lo, hi = ARM.limits()
    assert np.all(s.joint_pos <= hi + 1e-12) and np.all(s.joint_pos >= lo - 1e-12)
    assert s.joint_pos[0, 1] == pytest.approx(hi[1])


def test_non_finite_and_out_of_range_actions_fault():
    sim = Simulator(ARM, empty_scene())
    s = initial_state(ARM, np.zeros((1, 3)))
    with pytest.raises(NonFiniteError):
        sim.step(s, np.array([[np.nan, 0, 0, 0, 0]]), params(), np.zeros((1, 3)))
    with pytest.raises(Rma2Error):
        sim.step(s, np.array([[1.5, 0, 0, 0, 0]]), params(), np.zeros((1, 3)))
    bad = s.copy()
    bad.joint_vel[0, 2] = np.inf
    with pytest.raises(NonFiniteError):
        sim.step(bad, np.zeros((1, 5)), params(), np.zeros((1, 3)))


def test_pd_energy_never_increases():
    arm = ArmConfig()
    sim = Simulator(arm, empty_scene())
    s = initial_state(arm, np.zeros((1, 3)))
    s.joint_targets[0, :4] += np.array([0.3, -0.2, 0.1, 0.4])

    def energy(st):
        return 0.5 * arm.joint_inertia * np.sum(st.joint_vel**2) + 0.5 * arm.kp * np.sum((st.joint_targets - st.joint_pos) ** 2)

    e_prev = energy(s)
    for _ in range(60):
        sim._substep(s, params(), np.zeros((1, 2)), arm.dt)
        e = energy(s)
        assert e <= e_prev + 1e-12
        e_prev = e
    # once settled at the setpoint the speed keeps shrinking
    speeds = []
    for _ in range(10):
        s = sim.step(s, np.zeros((1, 5)), params(), np.zeros((1, 3)))
        speeds.append(np.abs(s.joint_vel).max())
    assert all(b <= a + 1e-15 for a, b in zip(speeds, speeds[1:]))


def _grasped_state(force=(0.0, 0.0), width=0.04, aperture_target=0.03):
    s = initial_state(ARM, np.zeros((1, 3)))
    s.is_grasped[:] = True
    s.finger_contact[:] = True
    s.grasp_width[:] = width
    s.joint_targets[0, -1] = aperture_target
    s.residual_force[0] = force
    return s


def test_disturbance_decays_by_point_eight():
    spec = DisturbanceSpec(prob=0.0)
    s = _grasped_state(force=(0.6, 0.8))
    mags = []
    for _ in range(2):
        update_disturbance(s, spec, np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([[0.9, 0.5, 0.5]]))
        mags.append(np.linalg.norm(s.residual_force[0]))
    assert mags[0] == pytest.approx(0.8, abs=1e-15)
    assert mags[1] == pytest.approx(0.64, abs=1e-15)


def test_disturbance_ratio_is_exact_between_resamples():
    spec = DisturbanceSpec(prob=0.0)
    s = _grasped_state(force=(1.3, -0.4))
    prev = s.residual_force.copy()
    for _ in range(20):
        update_disturbance(s, spec, np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([[0.5, 0.5, 0.5]]))
        np.testing.assert_array_equal(s.residual_force, 0.8 * prev)
        prev = s.residual_force.copy()


@settings(max_examples=200, deadline=None)
@given(
    u1=st.floats(0.0, 1.0, exclude_max=True),
    u2=st.floats(0.0, 1.0, exclude_max=True),
    mass=st.floats(0.01, 5.0),
    scale=st.floats(0.01, 2.4),
)
def test_fresh_disturbance_direction_has_unit_norm(u1, u2, mass, scale):
    s = _grasped_state(force=(3.0, 3.0))
    f = update_disturbance(
        s, DisturbanceSpec(prob=1.0), np.array([mass]), np.array([scale]), np.array([1.0]), np.array([[0.0, u1, u2]])
    )
    # a fresh sample overwrites the residual rather than adding to it
    assert np.linalg.norm(f[0]) / (mass * scale) == pytest.approx(1.0, abs=1e-9)


def test_zero_norm_direction_is_resampled():
    # u1 = 1 - 0 gives a Box-Muller radius of exactly zero
    s = _grasped_state()
    f = update_disturbance(
        s, DisturbanceSpec(prob=1.0), np.array([1.0]), np.array([1.0]), np.array([1.0]), np.array([[0.0, 0.0, 0.3]]),
        np.random.default_rng(0),
    )
    assert np.linalg.norm(f[0]) == pytest.approx(1.0, abs=1e-12)


def test_zero_probability_keeps_force_zero():
    s = _grasped_state()
    rng = np.random.default_rng(0)
    for _ in range(100):
        f = update_disturbance(s, DisturbanceSpec(prob=0.0), np.array([1.0]), np.array([2.0]), np.array([0.0]), rng.random((1, 3)))
        assert np.all(f == 0.0)


def test_disturbance_inactive_without_grasp():
    s = initial_state(ARM, np.zeros((1, 3)))
    f = update_disturbance(s, DisturbanceSpec(prob=1.0), np.array([1.0]), np.array([1.0]), np.array([1.0]), np.array([[0.0, 0.3, 0.3]]))
    assert np.all(f == 0.0)


def test_grasp_needs_both_fingers():
    s = _grasped_state()
    s.finger_contact[0] = [True, False]
    ok, _ = grasp_check(s, params(), ARM, np.zeros((1, 2)))
    assert not ok[0]


def test_grasp_survives_force_below_hold():
    s = _grasped_state()
    p = params(friction=0.8)
    # hold = 2 * mu * k * (width - target) = 2 * 0.8 * 100 * 0.01
    limit = hold_force(p, s, ARM)[0]
    assert limit == pytest.approx(1.6, rel=1e-12)
    ok, _ = grasp_check(s, p, ARM, np.array([[0.0, 0.999 * limit]]))
    assert ok[0]
    ok, _ = grasp_check(s, p, ARM, np.array([[0.0, 1.001 * limit]]))
    assert not ok[0]


def test_zero_friction_any_force_breaks():
    s = _grasped_state()
    p = params(friction=0.0)
    assert hold_force(p, s, ARM)[0] == 0.0
    ok, _ = grasp_check(s, p, ARM, np.array([[1e-9, 0.0]]))
    assert not ok[0]


def _scripted_grasp(sim, state, p, steps=30):
    """Drive straight toward a box lying across the TCP heading, then close."""
    s = state
    for t in range(steps):
        a = np.zeros((len(p), ARM.dof))
        a[:, -1] = -1.0 if t >= 2 else 0.0
        s = sim.step(s, a, p, np.full((len(p), 3), 0.99))
    return s


def test_closing_on_box_grasps_and_accumulates_impulse():
    tcp, heading = tcp_pose(ARM, np.array([list(ARM.home) + [0.08]]))
    # box long axis along the TCP heading so the closing axis spans its 4 cm width
    pose = np.array([[tcp[0, 0], tcp[0, 1], heading[0]]])
    sim = Simulator(ARM, box_scene())
    s = _scripted_grasp(sim, initial_state(ARM, pose), params())
    assert s.is_grasped[0]
    assert s.joint_pos[0, -1] == pytest.approx(0.04, abs=1e-9)
    assert np.all(s.finger_impulse[0] > 0)


def test_box_along_closing_axis_is_too_wide_to_pinch():
    tcp, heading = tcp_pose(ARM, np.array([list(ARM.home) + [0.08]]))
    # long side (10 cm) across the fingers exceeds the 8 cm aperture
    pose = np.array([[tcp[0, 0], tcp[0, 1], heading[0] + np.pi / 2]])
    sim = Simulator(ARM, box_scene(length=0.10))
    s = _scripted_grasp(sim, initial_state(ARM, pose), params())
    assert not s.is_grasped[0]


def test_no_contact_means_no_impulse():
    sim = Simulator(ARM, box_scene())
    s = initial_state(ARM, np.array([[0.7, 0.4, 0.0]]))
    rng = np.random.default_rng(0)
    total = np.zeros(2)
    for _ in range(50):
        s = sim.step(s, rng.uniform(-0.02, 0.02, (1, 5)), params(prob=0.5), rng.random((1, 3)))
        total += s.finger_impulse[0]
        assert not s.finger_contact.any()
    assert np.all(total == 0.0)


def test_impulse_implies_contact():
    tcp, heading = tcp_pose(ARM, np.array([list(ARM.home) + [0.08]]))
    pose = np.array([[tcp[0, 0], tcp[0, 1], heading[0]]])
    sim = Simulator(ARM, box_scene())
    s = initial_state(ARM, pose)
    for t in range(30):
        a = np.zeros((1, 5))
        a[0, -1] = -1.0
        s = sim.step(s, a, params(), np.full((1, 3), 0.99))
        assert np.all(s.finger_impulse >= 0)
        assert np.all(s.finger_contact[s.finger_impulse > 0])


def test_grasp_breaks_under_overload_disturbance():
    tcp, heading = tcp_pose(ARM, np.array([list(ARM.home) + [0.08]]))
    pose = np.array([[tcp[0, 0], tcp[0, 1], heading[0]]])
    sim = Simulator(ARM, box_scene(), DisturbanceSpec(prob=1.0))
    p = params(friction=0.5, force_scale=1.0, prob=0.0)
    s = _scripted_grasp(sim, initial_state(ARM, pose), p, steps=20)
    assert s.is_grasped[0]
    # a force far above the hold limit must release the object
    big = params(friction=0.5, force_scale=1e4, prob=1.0)
    s = sim.step(s, np.zeros((1, 5)), big, np.array([[0.0, 0.5, 0.1]]))
    assert not s.is_grasped[0]
    assert np.all(s.residual_force == 0.0)


def test_step_is_deterministic():
    def run():
        sim = Simulator(ARM, box_scene(b=3), DisturbanceSpec(prob=0.3))
        s = initial_state(ARM, np.array([[0.5, 0.0, 0.3], [0.6, 0.1, -1.0], [0.3, 0.0, 0.0]]))
        rng = np.random.default_rng(11)
        out = []
        for _ in range(40):
            s = sim.step(s, np.tanh(rng.standard_normal((3, 5))), params(3, prob=0.3), rng.random((3, 3)))
            out.append(np.concatenate([v.ravel().astype(float) for v in s.arrays().values()]))
        return np.stack(out)

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_batched_worlds_are_independent():
    sim3 = Simulator(ARM, box_scene(b=3))
    poses = np.array([[0.5, 0.0, 0.3], [0.6, 0.1, -1.0], [0.3, 0.0, 0.0]])
    rng = np.random.default_rng(5)
    acts = np.tanh(rng.standard_normal((30, 3, 5)))
    draws = rng.random((30, 3, 3))
    s3 = initial_state(ARM, poses)
    for t in range(30):
        s3 = sim3.step(s3, acts[t], params(3), draws[t])
    sim1 = Simulator(ARM, box_scene(b=1))
    s1 = initial_state(ARM, poses[1:2])
    for t in range(30):
        s1 = sim1.step(s1, acts[t, 1:2], params(1), draws[t, 1:2])
    np.testing.assert_allclose(s1.joint_pos, s3.joint_pos[1:2], atol=1e-12)
    np.testing.assert_allclose(s1.object_pose, s3.object_pose[1:2], atol=1e-12)
