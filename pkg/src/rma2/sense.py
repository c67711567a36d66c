"""Deployable sensing: a wrist depth scan and the noisy observation vector."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .sim import ArmConfig, Scene, SimState, forward_kinematics

OBS_DIM = 17  # joint_pos 5, joint_vel 5, tcp (x, y, cos, sin) 4, object xy 2, distance 1


@dataclass(frozen=True)
class ScanConfig:
    rays: int = 64
    fov: float = 2 * np.pi / 3
    max_range: float = 1.0

    def __post_init__(self):
        if self.rays < 1 or self.fov <= 0 or self.max_range <= 0:
            raise ValueError("scan needs rays >= 1, fov > 0 and max_range > 0")

    def offsets(self) -> np.ndarray:
        """Ray angles relative to the gripper axis, evenly spaced and centred."""
        if self.rays == 1:
            return np.zeros(1)
        return np.linspace(-self.fov / 2, self.fov / 2, self.rays)


@dataclass(frozen=True)
class NoiseSpec:
    obj_pos_bound: float = 0.005
    obj_rot_bound_deg: float = 10.0
    joint_pos_bound: float = 0.005

    def __post_init__(self):
        if min(self.obj_pos_bound, self.obj_rot_bound_deg, self.joint_pos_bound) < 0:
            raise ValueError("noise bounds must be non-negative")

    @staticmethod
    def zero() -> "NoiseSpec":
        return NoiseSpec(0.0, 0.0, 0.0)


def scene_segments(scene: Scene, state: SimState) -> tuple[np.ndarray, np.ndarray]:
    """All segments visible to the scan: the object outline plus fixtures."""
    verts = scene.object_world(state.object_pose)
    oa, ob = geo.edges(verts)
    return np.concatenate([oa, scene.fixture_a], 1), np.concatenate([ob, scene.fixture_b], 1)


def render_segments(origin: np.ndarray, heading: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray,
                    cfg: ScanConfig = ScanConfig()) -> np.ndarray:
    """Normalized depths ``(B, R)`` in [0, 1]; a ray with no hit reads 1."""
    ang = heading[:, None] + cfg.offsets()[None, :]
    dirs = np.stack([np.cos(ang), np.sin(ang)], -1)
    if seg_a.shape[1] == 0:
        return np.ones(ang.shape)
    dist = geo.ray_cast(origin, dirs, seg_a, seg_b)
    return np.clip(dist / cfg.max_range, 0.0, 1.0)


def render_depth(state: SimState, scene: Scene, arm: ArmConfig, cfg: ScanConfig = ScanConfig()) -> np.ndarray:
    pts, heading = forward_kinematics(arm, state.joint_pos)
    a, b = scene_segments(scene, state)
    return render_segments(pts[:, -1], heading, a, b, cfg)


def observe(
    state: SimState,
    arm: ArmConfig,
    noise: NoiseSpec,
    draws: np.ndarray,
    has_object: bool = True,
    object_xy: np.ndarray | None = None,
) -> np.ndarray:
    """Observation ``(B, 17)`` with uniform noise from pre-drawn uniforms.

    ``draws`` is ``(B, >= num_joints + 2)`` uniforms in [0, 1): one per
    revolute joint, then two for the object position. The gripper aperture and
    the TCP pose are reported exactly. The distance channel is recomputed from
    the noised object position. ``object_xy`` overrides the tracked point
    (the faucet reports its handle rather than the pivot).
    """
    n = arm.num_joints
    b = state.joint_pos.shape[0]
    q = state.joint_pos.copy()
    q[:, :n] += noise.joint_pos_bound * (2.0 * draws[:, :n] - 1.0)
    pts, heading = forward_kinematics(arm, state.joint_pos)
    tcp = pts[:, -1]
    tcp_feat = np.stack([tcp[:, 0], tcp[:, 1], np.cos(heading), np.sin(heading)], -1)
    if has_object:
        obj = (state.object_pose[:, :2] if object_xy is None else object_xy).copy()
        obj += noise.obj_pos_bound * (2.0 * draws[:, n : n + 2] - 1.0)
        dist = np.linalg.norm(tcp - obj, axis=1, keepdims=True)
    else:
        obj, dist = np.zeros((b, 2)), np.zeros((b, 1))
    return np.concatenate([q, state.joint_vel, tcp_feat, obj, dist], -1)


def noisy_rotation(theta: np.ndarray, noise: NoiseSpec, draw: np.ndarray) -> np.ndarray:
    """Privileged object rotation as (cos, sin) with uniform angle noise."""
    noisy = theta + np.deg2rad(noise.obj_rot_bound_deg) * (2.0 * draw - 1.0)
    return np.stack([np.cos(noisy), np.sin(noisy)], -1)


def scan_csv_rows(scans: np.ndarray, episode: int | np.ndarray, step: int) -> list[list]:
    ep = np.broadcast_to(np.asarray(episode), (len(scans),))
    return [[int(e), int(step)] + [f"{v:.6f}" for v in row] for e, row in zip(ep, scans)]


def scan_csv(rows: list[list], rays: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "step"] + [f"d{i}" for i in range(rays)])
    w.writerows(rows)
    return buf.getvalue()
