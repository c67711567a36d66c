"""Task definitions: goal sampling, dense rewards, success tests and scenes.

Four tasks share one arm. ``reach`` moves the TCP to a point with no object,
``pick_place`` carries a library object to a goal position, ``peg_insert``
pushes a peg into a narrow slot and ``faucet`` turns a pivoting lever by a
goal angle. Rewards follow one staged pattern: a success bonus of 10, and
otherwise a reach term plus task progress terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import Rma2Error, check_finite
from .library import AREAL_DENSITY, ObjectLibrary
from .sim import KIND_FREE, KIND_LEVER, KIND_NONE, ArmConfig, Scene, SimState, tcp_pose

TASKS = ("reach", "pick_place", "peg_insert", "faucet")
GOAL_DIMS = {"reach": 4, "pick_place": 6, "peg_insert": 8, "faucet": 2}
SUCCESS_BONUS = 10.0
SUCCESS_RADIUS = 0.025
STATIC_SPEED = 0.05
PEG_CLEARANCE = 0.003
TABLE = ((-0.15, -0.85), (0.95, 0.85))  # x/y bounds of the table edge visible to the scan


@dataclass(frozen=True)
class TaskConfig:
    name: str = "pick_place"
    goal_radius: tuple[float, float] = (0.35, 0.75)
    goal_angle: float = np.pi / 3
    spawn_x: tuple[float, float] = (0.4, 0.7)
    spawn_y: tuple[float, float] = (-0.25, 0.25)
    faucet_goal: tuple[float, float] = (np.pi / 6, np.pi / 2)
    success_radius: float = SUCCESS_RADIUS
    static_speed: float = STATIC_SPEED

    def __post_init__(self):
        if self.name not in TASKS:
            raise Rma2Error(f"unknown task {self.name!r}; expected one of {TASKS}")

    @property
    def goal_dim(self) -> int:
        return GOAL_DIMS[self.name]


# ------------------------------------------------------------------ goals


def sample_goal(task: TaskConfig, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Per-episode goal parameters.

    reach / pick_place: ``(n, 2)`` positions, area-uniform over the annulus
    sector in front of the arm. peg_insert: ``(n, 3)`` hole poses, the slot axis
    pointing away from the base. faucet: ``(n,)`` turn angles.
    """
    if task.name == "faucet":
        return rng.uniform(*task.faucet_goal, size=n)
    r_lo, r_hi = task.goal_radius
    r = np.sqrt(rng.uniform(r_lo**2, r_hi**2, size=n))
    ang = rng.uniform(-task.goal_angle, task.goal_angle, size=n)
    pos = np.stack([r * np.cos(ang), r * np.sin(ang)], -1)
    if task.name != "peg_insert":
        return pos
    alpha = ang + rng.uniform(-np.pi / 6, np.pi / 6, size=n)
    return np.concatenate([pos, alpha[:, None]], -1)


def peg_target(hole: np.ndarray, peg_length: np.ndarray) -> np.ndarray:
    """Peg centre at 60% insertion along the slot axis."""
    u = np.stack([np.cos(hole[:, 2]), np.sin(hole[:, 2])], -1)
    return hole[:, :2] + (0.1 * peg_length)[:, None] * u


def goal_vector(
    task: TaskConfig,
    goal: np.ndarray,
    tcp: np.ndarray,
    obj_xy: np.ndarray | None = None,
    theta_turned: np.ndarray | None = None,
    peg_length: np.ndarray | None = None,
) -> np.ndarray:
    """Assemble the policy goal input from goal parameters and current poses."""
    if task.name == "reach":
        return np.concatenate([goal, goal - tcp], -1)
    if task.name == "pick_place":
        return np.concatenate([goal, goal - tcp, goal - obj_xy], -1)
    if task.name == "peg_insert":
        target = peg_target(goal, peg_length)
        hole = np.stack([goal[:, 0], goal[:, 1], np.cos(goal[:, 2]), np.sin(goal[:, 2])], -1)
        return np.concatenate([hole, target - tcp, target - obj_xy], -1)
    return np.stack([goal, goal - theta_turned], -1)


# ---------------------------------------------------------------- rewards


def _finite(*arrays) -> None:
    for a in arrays:
        check_finite(np.asarray(a, dtype=float), "reward input")


def reach_term(tcp_obj_dist, bbox_norm):
    return 1.0 - np.tanh(3.0 * np.maximum(np.asarray(tcp_obj_dist) - bbox_norm, 0.0))


def pick_place_success(obj_goal_dist, max_joint_speed, radius=SUCCESS_RADIUS, static=STATIC_SPEED):
    return (np.asarray(obj_goal_dist) <= radius) & (np.asarray(max_joint_speed) < static)


def pick_place_reward(tcp_obj_dist, obj_goal_dist, grasped, max_joint_speed, bbox_norm,
                      radius=SUCCESS_RADIUS, static=STATIC_SPEED):
    """Dense pick-and-place reward from distances, grasp flag and arm speed."""
    _finite(tcp_obj_dist, obj_goal_dist, max_joint_speed, bbox_norm)
    shaped = (
        reach_term(tcp_obj_dist, bbox_norm)
        + 3.0 * np.asarray(grasped, dtype=float)
        + 3.0 * (1.0 - np.tanh(3.0 * np.asarray(obj_goal_dist)))
    )
    return np.where(pick_place_success(obj_goal_dist, max_joint_speed, radius, static), SUCCESS_BONUS, shaped)


def max_joint_speed(state: SimState, arm: ArmConfig) -> np.ndarray:
    return np.abs(state.joint_vel[:, : arm.num_joints]).max(axis=1)


def reward_pick_place(state: SimState, goal: np.ndarray, bbox_norm, arm: ArmConfig) -> np.ndarray:
    tcp, _ = tcp_pose(arm, state.joint_pos)
    obj = state.object_pose[:, :2]
    return pick_place_reward(
        np.linalg.norm(tcp - obj, axis=1),
        np.linalg.norm(goal - obj, axis=1),
        state.is_grasped,
        max_joint_speed(state, arm),
        bbox_norm,
    )


def reach_success(tcp_goal_dist, radius=SUCCESS_RADIUS):
    return np.asarray(tcp_goal_dist) <= radius


def reach_reward(tcp_goal_dist, radius=SUCCESS_RADIUS):
    _finite(tcp_goal_dist)
    shaped = 1.0 - np.tanh(3.0 * np.asarray(tcp_goal_dist))
    return np.where(reach_success(tcp_goal_dist, radius), SUCCESS_BONUS, shaped)


def peg_insertion_depth(peg_pose: np.ndarray, hole: np.ndarray, peg_length: np.ndarray, slot_depth: np.ndarray) -> np.ndarray:
    """Length of the peg's axis lying inside the slot channel."""
    d = np.stack([np.cos(peg_pose[:, 2]), np.sin(peg_pose[:, 2])], -1) * (peg_length / 2)[:, None]
    ends = np.stack([peg_pose[:, :2] - d, peg_pose[:, :2] + d], 1)
    u = geo.to_local(ends, hole)[..., 0]
    inside = np.clip(u, 0.0, slot_depth[:, None])
    return inside.max(axis=1) - inside.min(axis=1)


def peg_angle_error(peg_theta: np.ndarray, hole_alpha: np.ndarray) -> np.ndarray:
    """Axis misalignment in [0, pi/2]; the peg is symmetric end to end."""
    d = np.mod(peg_theta - hole_alpha + np.pi / 2, np.pi) - np.pi / 2
    return np.abs(d)


def peg_success(depth, peg_length):
    return np.asarray(depth) >= 0.5 * np.asarray(peg_length) - 1e-9


def peg_reward(tcp_obj_dist, obj_target_dist, grasped, angle_error, depth, peg_length, bbox_norm):
    _finite(tcp_obj_dist, obj_target_dist, angle_error, depth, peg_length, bbox_norm)
    shaped = (
        reach_term(tcp_obj_dist, bbox_norm)
        + 3.0 * np.asarray(grasped, dtype=float)
        + (1.0 - np.tanh(3.0 * np.asarray(angle_error)))
        + 3.0 * (1.0 - np.tanh(3.0 * np.asarray(obj_target_dist)))
    )
    return np.where(peg_success(depth, peg_length), SUCCESS_BONUS, shaped)


def faucet_success(theta_remaining):
    return np.asarray(theta_remaining) <= 0.0


def faucet_reward(tcp_handle_dist, theta_remaining, bbox_norm):
    _finite(tcp_handle_dist, theta_remaining, bbox_norm)
    shaped = reach_term(tcp_handle_dist, bbox_norm) + 3.0 * (1.0 - np.tanh(3.0 * np.abs(theta_remaining)))
    return np.where(faucet_success(theta_remaining), SUCCESS_BONUS, shaped)


# ----------------------------------------------------------------- scenes


def table_segments() -> tuple[np.ndarray, np.ndarray]:
    (x0, y0), (x1, y1) = TABLE
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    return geo.edges(corners)


def slot_outline(slot_width: float, slot_depth: float, box_width: float, box_depth: float) -> np.ndarray:
    """Box with an open channel, in the slot frame (+u into the box)."""
    sw, bw = slot_width / 2, box_width / 2
    return np.array(
        [[0, -bw], [0, -sw], [slot_depth, -sw], [slot_depth, sw], [0, sw], [0, bw], [box_depth, bw], [box_depth, -bw]]
    )


@dataclass
class EpisodeLayout:
    """Everything sampled at reset that is not part of the simulator state."""

    scene: Scene
    object_pose: np.ndarray  # (B, 3)
    goal: np.ndarray
    bbox_norm: np.ndarray  # (B,)
    task_slot: np.ndarray  # (B, 2)
    start_angle: np.ndarray  # (B,) faucet lever angle at reset
    handle_local: np.ndarray | None = None  # (B, 2) lever grip point in the pivot frame


def build_layout(
    task: TaskConfig,
    library: ObjectLibrary | None,
    instance_id: np.ndarray,
    scale: np.ndarray,
    density: np.ndarray,
    rngs: list[np.random.Generator],
) -> EpisodeLayout:
    """Scene geometry, object start pose and goal for a batch of episodes.

    ``rngs`` holds one generator per world so each episode is reproducible on
    its own, independent of how episodes are batched.
    """
    b = len(rngs)
    goal = np.stack([sample_goal(task, r, 1)[0] for r in rngs])
    ta, tb = table_segments()
    fixture_a = np.broadcast_to(ta, (b,) + ta.shape).copy()
    fixture_b = np.broadcast_to(tb, (b,) + tb.shape).copy()
    start = np.zeros(b)
    if task.name == "reach":
        scene = Scene(KIND_NONE, np.zeros((b, 3, 2)), np.zeros(b), fixture_a, fixture_b)
        return EpisodeLayout(scene, np.zeros((b, 3)), goal, np.zeros(b), np.zeros((b, 2)), start)
    if library is None:
        raise Rma2Error(f"task {task.name} needs an object library")
    size = library.max_vertices()
    canonical = library.padded(size)[instance_id]
    local = canonical * scale[:, None, None]
    half = np.stack([library.instances[i].half_extents for i in instance_id]) * scale[:, None]
    area = np.array([library.instances[i].area for i in instance_id]) * scale**2
    mass = AREAL_DENSITY * area * density
    bbox_norm = half.min(axis=1)  # half the narrow side: the reach term saturates only once the grip is centred
    if task.name == "pick_place":
        pose = np.stack(
            [np.concatenate([r.uniform(*task.spawn_x, 1), r.uniform(*task.spawn_y, 1), r.uniform(-np.pi, np.pi, 1)]) for r in rngs]
        )
        scene = Scene(KIND_FREE, local, mass, fixture_a, fixture_b)
        return EpisodeLayout(scene, pose, goal, bbox_norm, half, start)
    if task.name == "peg_insert":
        inst = [library.instances[i] for i in instance_id]
        peg_len = np.array([p.params["length"] for p in inst]) * scale
        slot_w = scale * (np.array([p.params["width"] for p in inst]) + PEG_CLEARANCE)
        slot_d = peg_len.copy()
        box_w, box_d = slot_w + 0.08, slot_d + 0.02
        outlines = [slot_outline(slot_w[i], slot_d[i], box_w[i], box_d[i]) for i in range(b)]
        box_world = geo.to_world(np.stack(outlines), goal)
        ba, bb = geo.edges(box_world)
        # peg starts beside the arm axis, on the opposite side from the hole
        side = -np.where(goal[:, 1] >= 0, 1.0, -1.0)
        pose = np.stack([np.array([r.uniform(0.35, 0.5), r.uniform(0.1, 0.25), r.uniform(-np.pi, np.pi)]) for r in rngs])
        pose[:, 1] *= side
        scene = Scene(
            KIND_FREE,
            local,
            mass,
            np.concatenate([fixture_a, ba], 1),
            np.concatenate([fixture_b, bb], 1),
            slot_pose=goal.copy(),
            slot_width=slot_w,
            slot_depth=slot_d,
            box_width=box_w,
            box_depth=box_d,
            peg_length=peg_len,
        )
        return EpisodeLayout(scene, pose, goal, bbox_norm, half, start)
    # faucet: object origin is the lever pivot
    pivot = np.stack([np.array([r.uniform(0.45, 0.6), r.uniform(-0.2, 0.2)]) for r in rngs])
    start = np.array([r.uniform(-np.pi, np.pi) for r in rngs])
    pose = np.concatenate([pivot, start[:, None]], -1)
    lever_range = np.stack([start - 0.2, start + task.faucet_goal[1] + 0.3], -1)
    torque = 0.002 * density
    width = np.array([library.instances[i].params["width"] for i in instance_id]) * scale
    handle = np.stack([geo.polygon_area_centroid(library.instances[i].vertices)[1] for i in instance_id]) * scale[:, None]
    scene = Scene(KIND_LEVER, local, mass, fixture_a, fixture_b, lever_torque=torque, lever_range=lever_range)
    return EpisodeLayout(scene, pose, goal, width / 2, pivot, start, handle)


def handle_point(layout: EpisodeLayout, pose: np.ndarray) -> np.ndarray:
    """Grip target on a lever (its area centroid) in the world frame."""
    return geo.to_world(layout.handle_local[:, None, :], pose)[:, 0]
