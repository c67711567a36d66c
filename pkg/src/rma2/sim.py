"""Deterministic planar arm-and-object world.

A top-down table with an N-link revolute arm carrying a parallel gripper. The
arm tracks PD position targets; objects rest on the table, can be pinched
between the fingers, and are carried rigidly while grasped. All state is
batched along a leading axis so many independent worlds step together.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import Rma2Error, check_finite

PAD_SLACK = 0.005  # m; finger overlap with an edge that still counts as touching it
GRAVITY = 9.81
KIND_NONE, KIND_FREE, KIND_LEVER = 0, 1, 2


@dataclass(frozen=True)
class ArmConfig:
    num_joints: int = 4
    link_lengths: tuple[float, ...] = (0.3, 0.25, 0.2, 0.15)
    joint_limits: tuple[tuple[float, float], ...] = (
        (-np.pi, np.pi),
        (-2.6, 2.6),
        (-2.6, 2.6),
        (-2.6, 2.6),
    )
    gripper_max_aperture: float = 0.08
    kp: float = 4.0
    kd: float = 0.2
    control_hz: int = 20
    sim_hz: int = 120
    joint_inertia: float = 0.0025
    joint_action_scale: float = 0.1
    gripper_action_scale: float = 0.02
    grip_stiffness: float = 100.0
    home: tuple[float, ...] = (-1.363, 1.935, 1.656, -2.227)

    def __post_init__(self):
        if self.sim_hz % self.control_hz:
            raise ValueError(f"sim_hz {self.sim_hz} is not a multiple of control_hz {self.control_hz}")
        if self.kp <= 0 or self.kd < 0:
            raise ValueError("need kp > 0 and kd >= 0")
        if len(self.link_lengths) != self.num_joints or min(self.link_lengths) <= 0:
            raise ValueError("one positive link length per joint required")
        if len(self.joint_limits) != self.num_joints or len(self.home) != self.num_joints:
            raise ValueError("joint_limits and home need one entry per joint")

    @property
    def substeps(self) -> int:
        return self.sim_hz // self.control_hz

    @property
    def dt(self) -> float:
        return 1.0 / self.sim_hz

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    @property
    def dof(self) -> int:
        return self.num_joints + 1

    def limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([l for l, _ in self.joint_limits] + [0.0])
        hi = np.array([h for _, h in self.joint_limits] + [self.gripper_max_aperture])
        return lo, hi


@dataclass(frozen=True)
class DisturbanceSpec:
    prob: float = 0.1
    force_scale_range: tuple[float, float] = (0.0, 2.0)
    decay: float = 0.8
    direction_std: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("disturbance probability must lie in [0, 1]")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.force_scale_range[0] > self.force_scale_range[1]:
            raise ValueError("force_scale_range low exceeds high")


@dataclass
class EnvParams:
    """Per-episode randomized parameters, one row per world."""

    scale_mult: np.ndarray
    density_mult: np.ndarray
    friction: np.ndarray
    instance_id: np.ndarray
    category_id: np.ndarray
    force_scale: np.ndarray
    disturb_prob: np.ndarray
    task_slot: np.ndarray  # (B, 2)

    def __len__(self) -> int:
        return len(self.scale_mult)

    def physical(self) -> np.ndarray:
        return np.stack(
            [self.scale_mult, self.density_mult, self.friction, self.force_scale, self.disturb_prob], -1
        )

    def take(self, idx) -> "EnvParams":
        return EnvParams(**{f.name: getattr(self, f.name)[idx] for f in dataclasses.fields(self)})

    @staticmethod
    def concat(parts: list["EnvParams"]) -> "EnvParams":
        return EnvParams(
            **{f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in dataclasses.fields(EnvParams)}
        )


@dataclass
class Scene:
    """Static geometry of each world: the manipulated object and fixtures."""

    kind: int
    obj_local: np.ndarray  # (B, V, 2); origin is the centroid (free) or pivot (lever)
    mass: np.ndarray  # (B,)
    fixture_a: np.ndarray  # (B, F, 2) static segments seen by the depth sensor
    fixture_b: np.ndarray
    # peg slot, in slot frame: +u into the box, v lateral
    slot_pose: np.ndarray | None = None
    slot_width: np.ndarray | None = None
    slot_depth: np.ndarray | None = None
    box_width: np.ndarray | None = None
    box_depth: np.ndarray | None = None
    peg_length: np.ndarray | None = None
    # lever
    lever_torque: np.ndarray | None = None
    lever_range: np.ndarray | None = None  # (B, 2) absolute angle limits

    def object_world(self, pose: np.ndarray) -> np.ndarray:
        return geo.to_world(self.obj_local, pose)

    @property
    def batch(self) -> int:
        return self.obj_local.shape[0]


@dataclass
class SimState:
    joint_pos: np.ndarray  # (B, dof)
    joint_vel: np.ndarray
    joint_targets: np.ndarray
    object_pose: np.ndarray  # (B, 3)
    object_vel: np.ndarray  # (B, 3)
    finger_contact: np.ndarray  # (B, 2) bool
    finger_impulse: np.ndarray  # (B, 2)
    residual_force: np.ndarray  # (B, 2)
    is_grasped: np.ndarray  # (B,) bool
    time_step: np.ndarray  # (B,) int
    grasp_rel: np.ndarray = field(default=None)  # object pose relative to the TCP while grasped
    grasp_width: np.ndarray = field(default=None)
    lever_radius: np.ndarray = field(default=None)
    lever_offset: np.ndarray = field(default=None)

    def copy(self) -> "SimState":
        return SimState(**{f.name: np.copy(getattr(self, f.name)) for f in dataclasses.fields(self)})

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def take(self, idx) -> "SimState":
        return SimState(**{k: v[idx] for k, v in self.arrays().items()})


def initial_state(arm: ArmConfig, object_pose: np.ndarray, joint_pos: np.ndarray | None = None) -> SimState:
    b = object_pose.shape[0]
    if joint_pos is None:
        joint_pos = np.tile(np.array(list(arm.home) + [arm.gripper_max_aperture]), (b, 1))
    z2 = np.zeros((b, 2))
    return SimState(
        joint_pos=joint_pos.astype(float).copy(),
        joint_vel=np.zeros((b, arm.dof)),
        joint_targets=joint_pos.astype(float).copy(),
        object_pose=object_pose.astype(float).copy(),
        object_vel=np.zeros((b, 3)),
        finger_contact=np.zeros((b, 2), bool),
        finger_impulse=z2.copy(),
        residual_force=z2.copy(),
        is_grasped=np.zeros(b, bool),
        time_step=np.zeros(b, np.int64),
        grasp_rel=np.zeros((b, 3)),
        grasp_width=np.zeros(b),
        lever_radius=np.zeros(b),
        lever_offset=np.zeros(b),
    )


def forward_kinematics(arm: ArmConfig, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Joint origins ``(B, N+1, 2)`` (last row is the TCP) and TCP heading ``(B,)``."""
    phi = np.cumsum(q[:, : arm.num_joints], axis=1)
    lengths = np.asarray(arm.link_lengths)
    steps = lengths * np.stack([np.cos(phi), np.sin(phi)], -1).transpose(2, 0, 1)
    pts = np.concatenate([np.zeros((q.shape[0], 1, 2)), np.cumsum(steps.transpose(1, 2, 0), axis=1)], axis=1)
    return pts, phi[:, -1]


def tcp_pose(arm: ArmConfig, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts, heading = forward_kinematics(arm, q)
    return pts[:, -1], heading


def closing_axis(heading: np.ndarray) -> np.ndarray:
    return np.stack([-np.sin(heading), np.cos(heading)], -1)


def tcp_jacobian(pts: np.ndarray) -> np.ndarray:
    """Planar position Jacobian of the TCP, ``(B, 2, N)``."""
    rel = pts[:, -1:, :] - pts[:, :-1, :]
    return np.stack([-rel[..., 1], rel[..., 0]], axis=1)


def hold_force(params: EnvParams, state: SimState, arm: ArmConfig) -> np.ndarray:
    """Largest external force the pinch sustains: two friction contacts."""
    squeeze = np.maximum(state.grasp_width - state.joint_targets[:, -1], 0.0)
    return 2.0 * params.friction * arm.grip_stiffness * squeeze


def grip_normal_force(state: SimState, arm: ArmConfig) -> np.ndarray:
    return arm.grip_stiffness * np.maximum(state.grasp_width - state.joint_targets[:, -1], 0.0)


def update_disturbance(
    state: SimState,
    spec: DisturbanceSpec,
    object_mass: np.ndarray,
    force_scale: np.ndarray,
    prob: np.ndarray,
    draws: np.ndarray,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Advance the grasped-object disturbance by one control step.

    ``draws`` holds three uniforms per world: the Bernoulli trial and two for
    a Box-Muller direction. A fresh force replaces the residual; otherwise the
    residual decays geometrically. Writes and returns ``state.residual_force``.
    """
    draws = np.asarray(draws, dtype=float)
    fire = draws[:, 0] < prob
    u1 = 1.0 - draws[:, 1]
    radius = np.sqrt(-2.0 * np.log(u1))
    direction = spec.direction_std * radius[:, None] * np.stack(
        [np.cos(2 * np.pi * draws[:, 2]), np.sin(2 * np.pi * draws[:, 2])], -1
    )
    norm = np.linalg.norm(direction, axis=1)
    for i in np.flatnonzero(fire & (norm <= 0.0)):
        gen = rng if rng is not None else np.random.default_rng(i)
        while norm[i] <= 0.0:
            direction[i] = gen.normal(0.0, spec.direction_std, 2)
            norm[i] = np.linalg.norm(direction[i])
    unit = direction / np.where(norm > 0, norm, 1.0)[:, None]
    fresh = unit * (object_mass * force_scale)[:, None]
    force = np.where(fire[:, None], fresh, spec.decay * state.residual_force)
    force = np.where(state.is_grasped[:, None], force, 0.0)
    state.residual_force = force
    return force


def grasp_check(state: SimState, params: EnvParams, arm: ArmConfig, external_force: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Whether each grasp survives ``external_force`` and the per-finger impulses.

    A grasp needs both fingers in contact; it breaks once the external force
    magnitude exceeds :func:`hold_force`.
    """
    both = state.finger_contact[:, 0] & state.finger_contact[:, 1]
    survives = np.linalg.norm(external_force, axis=1) <= hold_force(params, state, arm)
    return state.is_grasped & both & survives, state.finger_impulse.copy()


class Simulator:
    """Steps batched worlds that share an arm configuration and a scene."""

    def __init__(self, arm: ArmConfig, scene: Scene, disturbance: DisturbanceSpec = DisturbanceSpec()):
        self.arm = arm
        self.scene = scene
        self.disturbance = disturbance
        self.lo, self.hi = arm.limits()

    def step(
        self,
        state: SimState,
        action: np.ndarray,
        params: EnvParams,
        draws: np.ndarray,
        rng: np.random.Generator | None = None,
    ) -> SimState:
        """One control step. ``draws`` is ``(B, 3)`` uniforms for the disturbance."""
        arm, scene = self.arm, self.scene
        action = np.asarray(action, dtype=float)
        check_finite(action, "action")
        for name, arr in (("joint_pos", state.joint_pos), ("joint_vel", state.joint_vel), ("object_pose", state.object_pose)):
            check_finite(arr, f"state.{name}")
        if np.any(np.abs(action) > 1.0 + 1e-9):
            raise Rma2Error("action components must lie in [-1, 1]")
        s = state.copy()
        scale = np.array([arm.joint_action_scale] * arm.num_joints + [arm.gripper_action_scale])
        s.joint_targets = np.clip(s.joint_targets + action * scale, self.lo, self.hi)
        s.finger_impulse = np.zeros_like(s.finger_impulse)
        s.finger_contact = np.zeros_like(s.finger_contact)
        force = update_disturbance(s, self.disturbance, scene.mass, params.force_scale, params.disturb_prob, draws, rng)
        dt = arm.dt
        for _ in range(arm.substeps):
            self._substep(s, params, force, dt)
        s.time_step = s.time_step + 1
        for name, arr in s.arrays().items():
            if arr is not None and arr.dtype.kind == "f":
                check_finite(arr, f"state.{name} after step")
        return s

    def _substep(self, s: SimState, params: EnvParams, force: np.ndarray, dt: float) -> None:
        arm, scene = self.arm, self.scene
        n = arm.num_joints
        pts, heading = forward_kinematics(arm, s.joint_pos)
        jac = tcp_jacobian(pts)
        ext = np.where(s.is_grasped[:, None], force, 0.0)
        if scene.kind == KIND_LEVER:
            ext = ext + self._lever_resistance(s, pts, jac)
        tau = np.zeros_like(s.joint_pos)
        tau[:, :n] = np.einsum("bij,bi->bj", jac, ext)
        tau += arm.kp * (s.joint_targets - s.joint_pos) - arm.kd * s.joint_vel
        aperture_before = s.joint_pos[:, -1].copy()
        s.joint_vel = s.joint_vel + dt * tau / arm.joint_inertia
        q = s.joint_pos + dt * s.joint_vel
        clipped = np.clip(q, self.lo, self.hi)
        s.joint_vel = np.where(clipped != q, 0.0, s.joint_vel)
        s.joint_pos = clipped
        g = s.is_grasped
        # fingers cannot close through a held object
        held = g & (s.joint_pos[:, -1] < s.grasp_width)
        s.joint_pos[held, -1] = s.grasp_width[held]
        s.joint_vel[held, -1] = np.maximum(s.joint_vel[held, -1], 0.0)
        if scene.kind == KIND_NONE:
            return
        pts, heading = forward_kinematics(arm, s.joint_pos)
        tcp = pts[:, -1]
        if g.any():
            self._carry(s, params, ext, tcp, heading, dt)
        free = ~s.is_grasped
        if scene.kind == KIND_FREE and free.any():
            self._slide(s, params, dt)
        if free.any():
            self._contacts(s, params, tcp, heading, free, aperture_before)

    def _lever_resistance(self, s: SimState, pts: np.ndarray, jac: np.ndarray) -> np.ndarray:
        tcp = pts[:, -1]
        rel = tcp - s.object_pose[:, :2]
        r = np.maximum(np.linalg.norm(rel, axis=1), 1e-6)
        tangent = np.stack([-rel[:, 1], rel[:, 0]], -1) / r[:, None]
        v = np.einsum("bij,bj->bi", jac, s.joint_vel[:, : self.arm.num_joints])
        vt = np.einsum("bi,bi->b", v, tangent)
        mag = self.scene.lever_torque / r * np.tanh(vt / 0.05)
        return np.where(s.is_grasped[:, None], -mag[:, None] * tangent, 0.0)

    def _carry(self, s: SimState, params: EnvParams, ext: np.ndarray, tcp, heading, dt) -> None:
        arm, scene = self.arm, self.scene
        g = s.is_grasped.copy()
        opened = s.joint_pos[:, -1] > s.grasp_width + 1e-3
        overload = np.linalg.norm(ext, axis=1) > hold_force(params, s, arm)
        release = g & (opened | overload)
        if scene.kind == KIND_FREE:
            rel = s.grasp_rel
            c, sn = np.cos(heading), np.sin(heading)
            new_pose = np.stack(
                [
                    tcp[:, 0] + c * rel[:, 0] - sn * rel[:, 1],
                    tcp[:, 1] + sn * rel[:, 0] + c * rel[:, 1],
                    heading + rel[:, 2],
                ],
                -1,
            )
            keep = g & ~release
            if scene.slot_pose is not None:
                jam = keep & self._jammed(new_pose)
                release |= jam
                keep &= ~jam
            s.object_vel[keep] = (new_pose[keep] - s.object_pose[keep]) / dt
            s.object_pose[keep] = new_pose[keep]
            mass = np.maximum(scene.mass, 1e-6)
            kick = np.where(overload[:, None], ext * arm.substeps * dt / mass[:, None], 0.0)
            s.object_vel[release, :2] = kick[release]
            s.object_vel[release, 2] = 0.0
        else:
            rel = tcp - s.object_pose[:, :2]
            r = np.linalg.norm(rel, axis=1)
            slip = g & (np.abs(r - s.lever_radius) > 0.02)
            release |= slip
            keep = g & ~release
            target = np.arctan2(rel[:, 1], rel[:, 0]) + s.lever_offset
            prev = s.object_pose[:, 2]
            angle = prev + np.angle(np.exp(1j * (target - prev)))
            lo, hi = scene.lever_range[:, 0], scene.lever_range[:, 1]
            angle = np.clip(angle, lo, hi)
            s.object_vel[keep, 2] = (angle[keep] - s.object_pose[keep, 2]) / dt
            s.object_pose[keep, 2] = angle[keep]
            s.object_vel[~keep] = 0.0
        s.is_grasped = g & ~release
        s.residual_force[release] = 0.0
        kept = s.is_grasped
        fn = grip_normal_force(s, arm)
        s.finger_contact[kept] = True
        s.finger_impulse[kept] += (fn[kept] * dt)[:, None]

    def _jammed(self, pose: np.ndarray) -> np.ndarray:
        sc = self.scene
        corners = geo.to_world(sc.obj_local, pose)
        local = geo.to_local(corners, sc.slot_pose)
        u, v = local[..., 0], local[..., 1]
        in_box = (u > 1e-4) & (u < sc.box_depth[:, None]) & (np.abs(v) < sc.box_width[:, None] / 2)
        in_slot = (np.abs(v) <= sc.slot_width[:, None] / 2) & (u <= sc.slot_depth[:, None])
        corner_hit = np.any(in_box & ~in_slot, axis=1)
        mouth = np.stack([np.zeros_like(sc.slot_width), sc.slot_width / 2], -1)
        mouth = np.stack([mouth, mouth * np.array([1.0, -1.0])], 1)
        mouth_world = geo.to_world(mouth, sc.slot_pose)
        wall_hit = np.any(geo.point_in_polygon(mouth_world, corners), axis=1)
        return corner_hit | wall_hit

    def _slide(self, s: SimState, params: EnvParams, dt: float) -> None:
        free = ~s.is_grasped
        v = s.object_vel[:, :2]
        speed = np.linalg.norm(v, axis=1)
        dv = params.friction * GRAVITY * dt
        new_speed = np.maximum(speed - dv, 0.0)
        ratio = np.where(speed > 0, new_speed / np.maximum(speed, 1e-12), 0.0)
        v_new = v * ratio[:, None]
        w = s.object_vel[:, 2]
        w_new = np.sign(w) * np.maximum(np.abs(w) - 20.0 * dv, 0.0)
        moving = free & ((speed > 0) | (w != 0))
        s.object_pose[moving, :2] += v_new[moving] * dt
        s.object_pose[moving, 2] += w_new[moving] * dt
        s.object_vel[free, :2] = v_new[free]
        s.object_vel[free, 2] = w_new[free]

    def _contacts(self, s: SimState, params: EnvParams, tcp, heading, free, aperture_before) -> None:
        arm, scene = self.arm, self.scene
        axis = closing_axis(heading)
        verts = scene.object_world(s.object_pose)
        cs, ccos = geo.line_crossings(tcp, axis, verts)
        order = np.argsort(np.where(np.isnan(cs), np.inf, cs), axis=1, kind="stable")
        cs = np.take_along_axis(cs, order, 1)
        ccos = np.take_along_axis(ccos, order, 1)
        lo, hi = cs[:, 0::2], cs[:, 1::2]
        clo, chi = ccos[:, 0::2], ccos[:, 1::2]
        h = s.joint_pos[:, -1] / 2
        hcol = h[:, None]
        # enclosure is judged at the wider of the two apertures so fast closing cannot skip a chord,
        # plus a pad compliance margin so arm motion within one substep cannot either
        hwide = (np.maximum(h, aperture_before / 2) + PAD_SLACK)[:, None]
        with np.errstate(invalid="ignore"):
            top_left = np.any((lo < hcol) & (hcol < hi), axis=1)
            top_right = np.any((lo < -hcol) & (-hcol < hi), axis=1)
            enclosed = (lo >= -hwide) & (hi <= hwide)
        has = enclosed.any(axis=1) & free
        lo_m = np.where(enclosed, lo, np.inf)
        hi_m = np.where(enclosed, hi, -np.inf)
        i_lo = np.argmin(lo_m, axis=1)
        i_hi = np.argmax(hi_m, axis=1)
        rows = np.arange(len(h))
        span_lo = np.where(has, lo_m[rows, i_lo], 0.0)
        span_hi = np.where(has, hi_m[rows, i_hi], 0.0)
        cos_lo = np.where(has, clo[rows, i_lo], 0.0)
        cos_hi = np.where(has, chi[rows, i_hi], 0.0)
        s.finger_contact[:, 0] |= free & top_left
        s.finger_contact[:, 1] |= free & top_right
        reach = np.maximum(np.abs(span_lo), np.abs(span_hi))
        touch = has & (h <= reach + 1e-5)
        if not touch.any():
            return
        width = span_hi - span_lo
        mid = 0.5 * (span_lo + span_hi)
        # flat parallel pads press along the closing axis, so contact normals are always
        # antipodal; only a chord that grazes an edge edge-on (zero-length contact) slips
        closure = (cos_lo > 1e-6) & (cos_hi > 1e-6)
        if scene.kind == KIND_FREE:
            # the first finger to arrive pushes the object to the gripper centre
            shift = touch & closure
            s.object_pose[shift, :2] -= mid[shift, None] * axis[shift]
            pinched = touch & closure & (h <= width / 2 + 1e-5)
            gw = width
        else:
            pinched = touch & closure
            gw = s.joint_pos[:, -1].copy()
        slipped = touch & ~closure
        s.finger_contact[slipped] = True
        if not pinched.any():
            return
        s.finger_contact[pinched] = True
        s.joint_pos[pinched, -1] = gw[pinched]
        s.joint_vel[pinched, -1] = 0.0
        onset = pinched & (s.joint_targets[:, -1] < gw)
        if not onset.any():
            return
        s.is_grasped[onset] = True
        s.grasp_width[onset] = gw[onset]
        s.object_vel[onset] = 0.0
        if scene.kind == KIND_FREE:
            rel = s.object_pose[:, :2] - tcp
            c, sn = np.cos(heading), np.sin(heading)
            s.grasp_rel[onset, 0] = (c * rel[:, 0] + sn * rel[:, 1])[onset]
            s.grasp_rel[onset, 1] = (-sn * rel[:, 0] + c * rel[:, 1])[onset]
            s.grasp_rel[onset, 2] = (s.object_pose[:, 2] - heading)[onset]
        else:
            rel = tcp - s.object_pose[:, :2]
            s.lever_radius[onset] = np.linalg.norm(rel, axis=1)[onset]
            s.lever_offset[onset] = (s.object_pose[:, 2] - np.arctan2(rel[:, 1], rel[:, 0]))[onset]
