"""Phase 2: adapter that estimates the environment embedding from deployable inputs.

The adapter sees a short history of (observation, previous action) pairs and
the current depth scan. It regresses the frozen teacher's embedding z while
the teacher policy acts on the adapter's own estimate, so training data comes
from the states the student actually visits.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import TaskEnv
from .errors import Rma2Error, ShapeError, check_finite
from .neural import Adam, Conv1d, Dense, Flatten, Network, NetworkSpec, clip_grad_norm
from .phase1 import ActorCritic, depth_spec

HISTORY_LEN = 20


@dataclass(frozen=True)
class AdapterConfig:
    history: int = HISTORY_LEN
    depth_feature: int = 32
    history_feature: int = 32
    hidden: int = 128
    z_dim: int = 16
    use_depth: bool = True  # False is the NoVA ablation
    rays: int = 64
    explore_std: float = 0.05
    lr: float = 1e-3
    epochs: int = 2
    minibatch: int = 500
    grad_clip: float = 1.0
    anneal_lr: bool = True  # linear decay to zero over the planned updates
    updates: int = 300
    num_envs: int = 50
    horizon: int = 50
    heldout_envs: int = 20


def history_spec(channels: int, length: int, width: int) -> NetworkSpec:
    return NetworkSpec(
        (channels, length),
        (Conv1d(32, 3, 1), Conv1d(32, 3, 2), Conv1d(32, 3, 1), Conv1d(32, 3, 2), Flatten(), Dense(width)),
    )


def head_spec(in_dim: int, hidden: int, z_dim: int) -> NetworkSpec:
    return NetworkSpec((in_dim,), (Dense(hidden), Dense(z_dim, "linear", gain=1.0)))


class HistoryBuffer:
    """Last ``length`` (observation, previous action) rows per world, oldest first.

    Rows before the first push are zeros.
    """

    def __init__(self, batch: int, length: int, obs_dim: int, action_dim: int):
        self.length = length
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.data = np.zeros((batch, length, obs_dim + action_dim))

    @property
    def channels(self) -> int:
        return self.obs_dim + self.action_dim

    def reset(self) -> None:
        self.data.fill(0.0)

    def push(self, x: np.ndarray, prev_action: np.ndarray) -> None:
        if x.shape != (len(self.data), self.obs_dim) or prev_action.shape != (len(self.data), self.action_dim):
            raise ShapeError(f"history push shapes {x.shape}, {prev_action.shape} do not match buffer")
        self.data[:, :-1] = self.data[:, 1:]
        self.data[:, -1, : self.obs_dim] = x
        self.data[:, -1, self.obs_dim :] = prev_action

    def array(self) -> np.ndarray:
        """Channels-first copy ``(B, channels, length)`` for the temporal convs."""
        return np.ascontiguousarray(self.data.transpose(0, 2, 1))


class AdapterNets:
    """Depth encoder psi, history encoder and the head phi."""

    def __init__(self, cfg: AdapterConfig, teacher_z_dim: int, obs_dim: int, action_dim: int, rng: np.random.Generator):
        if cfg.z_dim != teacher_z_dim:
            raise ShapeError(f"adapter output {cfg.z_dim} != teacher embedding {teacher_z_dim}")
        self.cfg = cfg
        self.channels = obs_dim + action_dim
        self.psi = Network(depth_spec(cfg.rays, cfg.depth_feature), rng) if cfg.use_depth else None
        self.hist = Network(history_spec(self.channels, cfg.history, cfg.history_feature), rng)
        self.phi = Network(head_spec(cfg.history_feature + cfg.depth_feature, cfg.hidden, cfg.z_dim), rng)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("psi", self.psi), ("hist", self.hist), ("phi", self.phi)):
            if net is not None:
                out.update({f"{prefix}.{k}": v for k, v in net.params.items()})
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("psi", self.psi), ("hist", self.hist), ("phi", self.phi)):
            if net is not None:
                out.update({f"{prefix}.{k}": v for k, v in net.grads.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.named_arrays()
        missing = set(mine) - set(arrays)
        if missing:
            raise Rma2Error(f"adapter checkpoint lacks arrays: {sorted(missing)[:5]}")
        for k, v in mine.items():
            if arrays[k].shape != v.shape:
                raise ShapeError(f"array {k}: checkpoint shape {arrays[k].shape} != model shape {v.shape}")
            v[...] = arrays[k]

    def astype(self, dtype) -> "AdapterNets":
        for name in ("psi", "hist", "phi"):
            net = getattr(self, name)
            if net is not None:
                setattr(self, name, net.astype(dtype))
        return self

    def zero_grad(self) -> None:
        for g in self.named_grads().values():
            g.fill(0.0)

    def forward(self, history: np.ndarray, scan: np.ndarray | None) -> np.ndarray:
        """``history`` ``(B, channels, H)``, ``scan`` ``(B, rays)`` -> ``z_hat`` ``(B, z)``."""
        hf = self.hist.forward(history)
        if self.psi is not None:
            if scan is None:
                raise Rma2Error("adapter with depth needs a scan")
            f = self.psi.forward(scan[:, None, :])
        else:
            f = np.zeros((len(hf), self.cfg.depth_feature), dtype=hf.dtype)
        return self.phi.forward(np.concatenate([hf, f], -1))

    def backward(self, gz: np.ndarray) -> None:
        g = self.phi.backward(gz)
        w = self.cfg.history_feature
        self.hist.backward(g[:, :w])
        if self.psi is not None:
            self.psi.backward(g[:, w:])


def adapt_predict(history: HistoryBuffer, scan: np.ndarray | None, nets: AdapterNets) -> np.ndarray:
    z_hat = nets.forward(history.array(), scan if nets.psi is not None else None)
    check_finite(z_hat, "adapter estimate")
    return z_hat


def regression_loss(z: np.ndarray, z_hat: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared embedding error ``mean_b ||z - z_hat||^2`` and its gradient in ``z_hat``."""
    diff = np.asarray(z_hat, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    loss = float(np.mean(np.sum(diff * diff, axis=-1)))
    return loss, 2.0 * diff / len(diff)


def teacher_digest(teacher: ActorCritic) -> str:
    """sha256 over every teacher array, in name order."""
    h = hashlib.sha256()
    for name, arr in sorted(teacher.state_arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- rollouts


@dataclass
class AdapterBatch:
    history: np.ndarray  # (N, channels, H)
    scans: np.ndarray | None  # (N, rays)
    z: np.ndarray  # (N, z) teacher targets
    success: np.ndarray  # (B,)


def student_rollout(
    env: TaskEnv,
    teacher: ActorCritic,
    nets: AdapterNets,
    episode_ids: np.ndarray,
    seed: int,
    rng: np.random.Generator | None,
    noise_std: float,
) -> AdapterBatch:
    """One episode per world with the teacher acting on the adapter's estimate.

    The teacher embedding of the privileged inputs is recorded as the target
    but never fed to the policy. ``rng`` None gives deterministic actions.
    """
    env.reset(episode_ids, seed)
    b = env.num_envs
    hist = HistoryBuffer(b, nets.cfg.history, env.obs_dim, env.action_dim)
    prev = np.zeros((b, env.action_dim))
    hs, ss, zs = [], [], []
    for _ in range(env.horizon):
        x, g = env.observation(), env.goal()
        z = teacher.encode_env(env.privileged())
        hist.push(x, prev)
        scan = env.depth() if nets.psi is not None else None
        z_hat = adapt_predict(hist, scan, nets)
        a, _, _, _ = teacher.act(x, z_hat, g, rng, deterministic=rng is None, noise_std=noise_std)
        hs.append(hist.array())
        zs.append(np.asarray(z, dtype=np.float64))
        if scan is not None:
            ss.append(scan)
        env.step(a)
        prev = a
    return AdapterBatch(
        history=np.concatenate(hs),
        scans=np.concatenate(ss) if ss else None,
        z=np.concatenate(zs),
        success=env.succeeded.copy(),
    )


def batch_loss(nets: AdapterNets, batch: AdapterBatch, chunk: int = 2000) -> float:
    total = 0.0
    n = len(batch.z)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        z_hat = nets.forward(batch.history[sl], batch.scans[sl] if batch.scans is not None else None)
        total += regression_loss(batch.z[sl], z_hat)[0] * len(batch.z[sl])
    return total / n


# ---------------------------------------------------------------- training


@dataclass
class AdapterResult:
    nets: AdapterNets
    adam: Adam
    metrics: list[dict] = field(default_factory=list)
    teacher_digest: str = ""


HELDOUT_EPISODE_BASE = 10**9  # held-out episodes use ids never reached by training


def train_adapter(
    env: TaskEnv,
    teacher: ActorCritic,
    nets: AdapterNets,
    seed: int,
    updates: int | None = None,
    log: Callable[[dict], None] | None = None,
    heldout_env: TaskEnv | None = None,
) -> AdapterResult:
    """Regress the frozen teacher's embedding with the student in the loop.

    Every update collects one on-policy episode per world, then runs a few
    epochs of minibatch regression on it. The held-out loss is measured on a
    fixed set of episodes (ids from ``HELDOUT_EPISODE_BASE``) rolled out with
    the current student and deterministic actions.
    """
    if teacher is None or teacher.mu is None:
        raise Rma2Error("adapter training needs a phase-1 teacher with an environment encoder")
    cfg = nets.cfg
    updates = cfg.updates if updates is None else updates
    digest = teacher_digest(teacher)
    adam = Adam(nets.named_arrays(), lr=cfg.lr)
    learner = np.random.default_rng([seed, 7919])
    grads = nets.named_grads()
    result = AdapterResult(nets, adam, [], digest)
    heldout_env = heldout_env if heldout_env is not None else env
    b = cfg.num_envs
    heldout_ids = HELDOUT_EPISODE_BASE + np.arange(cfg.heldout_envs)

    def heldout() -> tuple[float, float]:
        hb = student_rollout(heldout_env, teacher, nets, heldout_ids, seed, None, 0.0)
        return batch_loss(nets, hb), float(hb.success.mean())

    h0, _ = heldout()
    for update in range(updates):
        if cfg.anneal_lr:
            adam.lr = cfg.lr * (1.0 - update / updates)
        batch = student_rollout(env, teacher, nets, update * b + np.arange(b), seed, learner, cfg.explore_std)
        n = len(batch.z)
        losses = []
        for _ in range(cfg.epochs):
            order = learner.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = order[start : start + cfg.minibatch]
                nets.zero_grad()
                z_hat = nets.forward(batch.history[idx], batch.scans[idx] if batch.scans is not None else None)
                loss, gz = regression_loss(batch.z[idx], z_hat)
                nets.backward(gz)
                clip_grad_norm(list(grads.values()), cfg.grad_clip)
                adam.step(grads)
                losses.append(loss)
        h_loss, h_sr = heldout()
        row = {
            "update": update,
            "train_loss": float(np.mean(losses)),
            "heldout_loss": h_loss,
            "heldout_loss_init": h0,
            "train_success": float(batch.success.mean()),
            "heldout_success": h_sr,
        }
        result.metrics.append(row)
        if log is not None:
            log(row)
    if teacher_digest(teacher) != digest:
        raise Rma2Error("teacher parameters changed during adapter training")
    return result
