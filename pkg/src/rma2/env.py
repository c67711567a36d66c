"""Vectorized task environment.

One ``TaskEnv`` steps a batch of worlds in lockstep. Every episode draws all of
its randomness (parameters, layout, goal, disturbance and sensor noise) from its
own stream seeded by ``(seed, episode_id)``, so an episode is reproducible no
matter which batch it runs in.

Deployable inputs come from :meth:`TaskEnv.observation`, :meth:`TaskEnv.goal`
and :meth:`TaskEnv.depth`. Everything hidden from a real robot goes through
:meth:`TaskEnv.privileged`, which counts its calls so evaluations can prove a
deployable agent never touched it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sense
from . import tasks as T
from .library import ObjectLibrary
from .randomization import AdrState, RandomizationSpec, sample_env
from .sim import ArmConfig, DisturbanceSpec, EnvParams, Simulator, forward_kinematics, initial_state

NOISE_COLS = 10  # 3 disturbance uniforms + 4 joint + 2 object position + 1 rotation
E_PHYS_DIM = 8
PRIV_STATE_DIM = 4


@dataclass
class Privileged:
    """Simulation-only quantities for the environment encoder."""

    e_phys: np.ndarray  # (B, 8): task slot 2, scale, density, friction, force scale, finger impulses 2
    instance_id: np.ndarray
    category_id: np.ndarray
    rotation: np.ndarray  # (B, 2) noised (cos, sin)
    contacts: np.ndarray  # (B, 2) float

    def state_slice(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.contacts], -1)


class TaskEnv:
    def __init__(
        self,
        task: T.TaskConfig,
        library: ObjectLibrary | None,
        spec: RandomizationSpec = RandomizationSpec(),
        arm: ArmConfig = ArmConfig(),
        scan: sense.ScanConfig = sense.ScanConfig(),
        horizon: int = 50,
        terminate_on_success: bool = False,
    ):
        if task.name != "reach" and library is None:
            raise ValueError(f"task {task.name} needs an object library")
        self.task = task
        self.library = library
        self.spec = spec
        self.arm = arm
        self.scan_cfg = scan
        self.horizon = horizon
        self.terminate_on_success = terminate_on_success
        self.privileged_reads = 0
        self.obs_dim = sense.OBS_DIM
        self.goal_dim = task.goal_dim
        self.action_dim = arm.dof

    # ----------------------------------------------------------- episodes

    def reset(
        self,
        episode_ids: np.ndarray,
        seed: int,
        ramp: float = 1.0,
        adr: AdrState | None = None,
        instances: np.ndarray | None = None,
    ) -> None:
        """Start one episode per id. ``instances`` pins the object of each episode."""
        episode_ids = np.asarray(episode_ids, dtype=np.int64)
        rngs = [np.random.default_rng([int(seed), int(e)]) for e in episode_ids]
        pinned = []
        parts = []
        for r in rngs:
            if adr is not None:
                p, pin = adr.sample(self.spec, self.library, r)
            else:
                p, pin = sample_env(self.spec, ramp, self.library, r), None
            parts.append(p)
            pinned.append(pin)
        params = EnvParams.concat(parts)
        if instances is not None:
            if self.library is None:
                raise ValueError("instances given for a task without an object library")
            params.instance_id = np.asarray(instances, dtype=params.instance_id.dtype).copy()
            params.category_id = self.library.cat[params.instance_id].astype(params.category_id.dtype)
        layout = T.build_layout(self.task, self.library, params.instance_id, params.scale_mult, params.density_mult, rngs)
        params.task_slot = layout.task_slot
        self.noise_block = np.stack([r.random((self.horizon + 1, NOISE_COLS)) for r in rngs])
        self.params = params
        self.layout = layout
        self.pinned = pinned
        self.episode_ids = episode_ids
        self.noise = self.spec.noise(ramp if adr is None else 1.0)
        span = self.spec.force_scale
        self.sim = Simulator(self.arm, layout.scene, DisturbanceSpec(self.spec.disturb_prob, tuple(span)))
        self.state = initial_state(self.arm, layout.object_pose)
        self.t = 0
        self.done = np.zeros(len(episode_ids), bool)
        self.succeeded = np.zeros(len(episode_ids), bool)
        self.ever_grasped = np.zeros(len(episode_ids), bool)
        self.first_success = np.full(len(episode_ids), -1, np.int64)
        self._refresh()

    @property
    def num_envs(self) -> int:
        return len(self.episode_ids)

    def _refresh(self) -> None:
        pts, heading = forward_kinematics(self.arm, self.state.joint_pos)
        self.tcp, self.heading = pts[:, -1], heading

    def _object_point(self) -> np.ndarray:
        if self.task.name == "faucet":
            return T.handle_point(self.layout, self.state.object_pose)
        return self.state.object_pose[:, :2]

    def _draws(self) -> np.ndarray:
        return self.noise_block[:, self.t]

    # ------------------------------------------------------ deployable I/O

    def observation(self) -> np.ndarray:
        has_obj = self.task.name != "reach"
        obj = self._object_point() if has_obj else None
        return sense.observe(self.state, self.arm, self.noise, self._draws()[:, 3:], has_obj, obj)

    def goal(self) -> np.ndarray:
        """Goal vector; distance channels use the same noised object position as the observation."""
        x = self.observation()
        obj = x[:, 14:16]
        if self.task.name == "faucet":
            return T.goal_vector(self.task, self.layout.goal, self.tcp, theta_turned=self.turned())
        return T.goal_vector(self.task, self.layout.goal, self.tcp, obj, peg_length=self.layout.scene.peg_length)

    def depth(self) -> np.ndarray:
        return sense.render_depth(self.state, self.layout.scene, self.arm, self.scan_cfg)

    def turned(self) -> np.ndarray:
        return self.state.object_pose[:, 2] - self.layout.start_angle

    # ---------------------------------------------------- privileged data

    def privileged(self) -> Privileged:
        self.privileged_reads += 1
        p, s = self.params, self.state
        e_phys = np.concatenate(
            [
                p.task_slot,
                np.stack([p.scale_mult, p.density_mult, p.friction, p.force_scale], -1),
                s.finger_impulse,
            ],
            -1,
        )
        rot = sense.noisy_rotation(s.object_pose[:, 2], self.noise, self._draws()[:, 9])
        return Privileged(e_phys, p.instance_id.copy(), p.category_id.copy(), rot, s.finger_contact.astype(float))

    # ---------------------------------------------------------- stepping

    def step(self, action: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance every world. Returns ``(reward, success, done)``."""
        if self.t >= self.horizon:
            raise RuntimeError("episode horizon exhausted; call reset")
        self.state = self.sim.step(self.state, action, self.params, self._draws()[:, :3])
        self.t += 1
        self._refresh()
        reward, success = self.reward_and_success()
        self.succeeded |= success
        self.ever_grasped |= self.state.is_grasped
        fresh = success & (self.first_success < 0)
        self.first_success[fresh] = self.t
        done = np.full(self.num_envs, self.t >= self.horizon)
        if self.terminate_on_success:
            done |= self.first_success >= 0
        self.done = done
        return reward, success, done

    def reward_and_success(self) -> tuple[np.ndarray, np.ndarray]:
        name, s, lay = self.task.name, self.state, self.layout
        if name == "reach":
            d = np.linalg.norm(self.tcp - lay.goal, axis=1)
            return T.reach_reward(d, self.task.success_radius), T.reach_success(d, self.task.success_radius)
        obj = s.object_pose[:, :2]
        if name == "pick_place":
            dg = np.linalg.norm(lay.goal - obj, axis=1)
            speed = T.max_joint_speed(s, self.arm)
            r = T.pick_place_reward(np.linalg.norm(self.tcp - obj, axis=1), dg, s.is_grasped, speed, lay.bbox_norm,
                                    self.task.success_radius, self.task.static_speed)
            return r, T.pick_place_success(dg, speed, self.task.success_radius, self.task.static_speed)
        if name == "peg_insert":
            sc = lay.scene
            depth = T.peg_insertion_depth(s.object_pose, lay.goal, sc.peg_length, sc.slot_depth)
            target = T.peg_target(lay.goal, sc.peg_length)
            r = T.peg_reward(
                np.linalg.norm(self.tcp - obj, axis=1),
                np.linalg.norm(target - obj, axis=1),
                s.is_grasped,
                T.peg_angle_error(s.object_pose[:, 2], lay.goal[:, 2]),
                depth,
                sc.peg_length,
                lay.bbox_norm,
            )
            return r, T.peg_success(depth, sc.peg_length)
        remaining = lay.goal - self.turned()
        handle = T.handle_point(lay, s.object_pose)
        r = T.faucet_reward(np.linalg.norm(self.tcp - handle, axis=1), remaining, lay.bbox_norm)
        return r, T.faucet_success(remaining)

    def episode_lengths(self) -> np.ndarray:
        return np.where(self.first_success >= 0, self.first_success, self.horizon)
