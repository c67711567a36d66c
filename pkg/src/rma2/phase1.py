"""Phase 1: environment encoder, identity dictionaries and PPO policy training.

The environment encoder maps privileged inputs (physical parameters, learned
instance and category embeddings, object rotation and finger contacts) to a
16-dimensional embedding z. The policy consumes (observation, z, goal). The
same module also builds the single-phase baselines: ``dr`` drops z entirely
and ``dr_vi`` replaces it with an end-to-end depth feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import E_PHYS_DIM, PRIV_STATE_DIM, Privileged, TaskEnv
from .errors import Rma2Error, ShapeError, check_finite
from .neural import Adam, Conv1d, Dense, EmbeddingTable, Flatten, Network, NetworkSpec, clip_grad_norm
from .randomization import AdrState, CurriculumState, adr_update

LOG_2PI = float(np.log(2 * np.pi))
NORM_CLIP = 10.0  # normalized inputs are clipped to this many standard deviations


@dataclass(frozen=True)
class PolicyConfig:
    z_dim: int = 16
    embed_dim: int = 16
    hidden: int = 128
    init_log_std: float = -1.0
    use_env: bool = True  # condition on the environment embedding
    use_ids: bool = True  # False is the NoOE ablation: identity slots zeroed
    use_depth: bool = False  # end-to-end depth feature (DR+Vi)
    depth_feature: int = 32

    @property
    def encoder_input(self) -> int:
        return E_PHYS_DIM + 2 * self.embed_dim + PRIV_STATE_DIM


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.95
    lam: float = 0.95
    clip: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    epochs: int = 4
    minibatch: int = 800
    lr: float = 3e-4
    max_kl: float = 0.5
    grad_clip: float = 0.5
    reward_scale: float = 0.1
    normalize_inputs: bool = True
    anneal_lr: bool = True  # linear decay to zero over the planned updates
    num_envs: int = 50
    horizon: int = 50


def encoder_spec(cfg: PolicyConfig) -> NetworkSpec:
    return NetworkSpec((cfg.encoder_input,), (Dense(cfg.hidden), Dense(cfg.hidden), Dense(cfg.z_dim, "linear")))


def policy_spec(in_dim: int, out_dim: int, cfg: PolicyConfig, gain: float) -> NetworkSpec:
    h = cfg.hidden
    return NetworkSpec((in_dim,), (Dense(h), Dense(h), Dense(h), Dense(out_dim, "linear", gain=gain)))


def depth_spec(rays: int, width: int) -> NetworkSpec:
    return NetworkSpec(
        (1, rays), (Conv1d(16, 5, 2), Conv1d(32, 3, 2), Conv1d(32, 3, 2), Flatten(), Dense(width))
    )


@dataclass
class Dictionaries:
    instance_table: EmbeddingTable
    category_table: EmbeddingTable

    @staticmethod
    def create(instances: int, categories: int, dim: int, rng: np.random.Generator) -> "Dictionaries":
        return Dictionaries(EmbeddingTable(instances, dim, rng, scale=0.1), EmbeddingTable(categories, dim, rng, scale=0.1))


class ActorCritic:
    """Encoder, dictionaries, policy, value network and log-std as one unit."""

    def __init__(self, cfg: PolicyConfig, obs_dim: int, goal_dim: int, action_dim: int,
                 instances: int, categories: int, rng: np.random.Generator, rays: int = 64):
        self.cfg = cfg
        self.obs_dim, self.goal_dim, self.action_dim = obs_dim, goal_dim, action_dim
        self.rays = rays
        in_dim = obs_dim + goal_dim
        if cfg.use_env:
            self.mu = Network(encoder_spec(cfg), rng)
            self.dicts = Dictionaries.create(max(instances, 1), max(categories, 1), cfg.embed_dim, rng)
            in_dim += cfg.z_dim
        else:
            self.mu = None
            self.dicts = None
        if cfg.use_depth:
            self.depth_net = Network(depth_spec(rays, cfg.depth_feature), rng)
            in_dim += cfg.depth_feature
        else:
            self.depth_net = None
        self.in_dim = in_dim
        self.pi = Network(policy_spec(in_dim, action_dim, cfg, 0.01), rng)
        self.critic = Network(policy_spec(in_dim, 1, cfg, 1.0), rng)
        self.log_std = np.full(action_dim, cfg.init_log_std, dtype=np.float32)
        self.log_std_grad = np.zeros_like(self.log_std)
        # running statistics of (x, g), frozen outside policy training
        self.norm_mean = np.zeros(obs_dim + goal_dim, dtype=np.float32)
        self.norm_var = np.ones(obs_dim + goal_dim, dtype=np.float32)
        self.norm_count = np.zeros(1, dtype=np.float32)

    # ----------------------------------------------------------- params

    def astype(self, dtype) -> "ActorCritic":
        """Convert every parameter in place (float64 is used for gradient checks)."""
        for name in ("mu", "pi", "critic", "depth_net"):
            net = getattr(self, name)
            if net is not None:
                setattr(self, name, net.astype(dtype))
        if self.dicts is not None:
            for table in (self.dicts.instance_table, self.dicts.category_table):
                table.weight = table.weight.astype(dtype)
                table.grad = np.zeros_like(table.weight)
        self.log_std = self.log_std.astype(dtype)
        self.log_std_grad = np.zeros_like(self.log_std)
        return self

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("mu", self.mu), ("pi", self.pi), ("critic", self.critic), ("depth", self.depth_net)):
            if net is not None:
                out.update({f"{prefix}.{k}": v for k, v in net.params.items()})
        if self.dicts is not None:
            out["dict.instance"] = self.dicts.instance_table.weight
            out["dict.category"] = self.dicts.category_table.weight
        out["log_std"] = self.log_std
        return out

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("mu", self.mu), ("pi", self.pi), ("critic", self.critic), ("depth", self.depth_net)):
            if net is not None:
                out.update({f"{prefix}.{k}": v for k, v in net.grads.items()})
        if self.dicts is not None:
            out["dict.instance"] = self.dicts.instance_table.grad
            out["dict.category"] = self.dicts.category_table.grad
        out["log_std"] = self.log_std_grad
        return out

    def stat_arrays(self) -> dict[str, np.ndarray]:
        return {"norm.mean": self.norm_mean, "norm.var": self.norm_var, "norm.count": self.norm_count}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus the input statistics; what a checkpoint holds."""
        return {**self.named_arrays(), **self.stat_arrays()}

    def update_normalizer(self, x: np.ndarray, g: np.ndarray) -> None:
        """Merge a batch of ``(x, g)`` rows into the running mean and variance."""
        data = np.concatenate([x.reshape(-1, self.obs_dim), g.reshape(-1, self.goal_dim)], -1).astype(np.float64)
        n, count = len(data), float(self.norm_count[0])
        mean, var = self.norm_mean.astype(np.float64), self.norm_var.astype(np.float64)
        b_mean, b_var = data.mean(0), data.var(0)
        total = count + n
        delta = b_mean - mean
        new_mean = mean + delta * n / total
        m2 = var * count + b_var * n + delta**2 * count * n / total
        self.norm_mean[...] = new_mean
        self.norm_var[...] = m2 / total
        self.norm_count[...] = total

    def normalize(self, x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.norm_count[0] == 0:
            return x, g
        scale = 1.0 / np.sqrt(self.norm_var.astype(np.float64) + 1e-8)
        mean = self.norm_mean.astype(np.float64)
        o = self.obs_dim
        xn = np.clip((x - mean[:o]) * scale[:o], -NORM_CLIP, NORM_CLIP)
        gn = np.clip((g - mean[o:]) * scale[o:], -NORM_CLIP, NORM_CLIP)
        return xn, gn

    def sparse_names(self) -> list[str]:
        return ["dict.instance", "dict.category"] if self.dicts is not None else []

    def teacher_names(self) -> list[str]:
        return list(self.named_arrays())

    def zero_grad(self) -> None:
        for g in self.named_grads().values():
            g.fill(0.0)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.state_arrays()
        missing = set(mine) - set(arrays)
        if missing:
            raise Rma2Error(f"checkpoint lacks arrays: {sorted(missing)[:5]}")
        for k, v in mine.items():
            if arrays[k].shape != v.shape:
                raise ShapeError(f"array {k}: checkpoint shape {arrays[k].shape} != model shape {v.shape}")
            v[...] = arrays[k]

    # ---------------------------------------------------------- encoder

    def encoder_input(self, priv: Privileged) -> np.ndarray:
        """Concatenate privileged inputs in the fixed 44-slot layout.

        Slots 0-7 physical, 8-23 instance embedding, 24-39 category embedding,
        40-43 rotation (cos, sin) and finger contacts.
        """
        cfg = self.cfg
        b = len(priv.instance_id)
        u = self.dicts.instance_table.lookup(priv.instance_id)
        c = self.dicts.category_table.lookup(priv.category_id)
        if not cfg.use_ids:
            u, c = np.zeros((b, cfg.embed_dim)), np.zeros((b, cfg.embed_dim))
        inp = np.concatenate([priv.e_phys, u, c, priv.state_slice()], -1).astype(self.mu.dtype)
        if inp.shape[1] != cfg.encoder_input:
            raise ShapeError(f"encoder input width {inp.shape[1]} != {cfg.encoder_input}")
        return inp

    def encode_env(self, priv: Privileged) -> np.ndarray:
        return self.mu.forward(self.encoder_input(priv))

    def encoder_backward(self, gz: np.ndarray, priv: Privileged) -> None:
        g_in = self.mu.backward(gz)
        if self.cfg.use_ids:
            e = self.cfg.embed_dim
            self.dicts.instance_table._ids = priv.instance_id
            self.dicts.instance_table.backward(g_in[:, E_PHYS_DIM : E_PHYS_DIM + e])
            self.dicts.category_table._ids = priv.category_id
            self.dicts.category_table.backward(g_in[:, E_PHYS_DIM + e : E_PHYS_DIM + 2 * e])

    # ------------------------------------------------------------ policy

    def policy_input(self, x, z, g, depth_feat=None) -> np.ndarray:
        x, g = self.normalize(x, g)
        parts = [x]
        if z is not None:
            parts.append(z)
        parts.append(g)
        if depth_feat is not None:
            parts.append(depth_feat)
        inp = np.concatenate(parts, -1).astype(self.pi.dtype)
        if inp.shape[1] != self.in_dim:
            raise ShapeError(f"policy input width {inp.shape[1]} != {self.in_dim}")
        return inp

    def act(self, x, z, g, rng: np.random.Generator | None = None, deterministic: bool = False,
            scan: np.ndarray | None = None, noise_std: float | None = None):
        """Sample ``(action, pre_squash, log_prob, value)``.

        ``noise_std`` overrides the learned std (used for adapter data collection).
        """
        feat = self.depth_net.forward(scan[:, None, :]) if self.depth_net is not None else None
        inp = self.policy_input(x, z, g, feat)
        mean = self.pi.forward(inp)
        value = self.critic.forward(inp)[:, 0]
        log_std = self.log_std if noise_std is None else np.full_like(self.log_std, np.log(max(noise_std, 1e-30)))
        std = np.exp(log_std)
        if deterministic or rng is None:
            u = mean.astype(np.float64)
        else:
            u = mean + std * rng.standard_normal(mean.shape)
        logp = gaussian_log_prob(u, mean, log_std)
        action = np.tanh(u)
        check_finite(action, "policy action")
        return action, u, logp, value


def gaussian_log_prob(u, mean, log_std) -> np.ndarray:
    std = np.exp(log_std)
    return (-0.5 * np.square((u - mean) / std) - log_std - 0.5 * LOG_2PI).sum(-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


# -------------------------------------------------------------------- GAE


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float = 0.95, lam: float = 0.95):
    """Generalized advantage estimates over a ``(T, B)`` rollout.

    ``values`` has ``T + 1`` rows; the last is the bootstrap value after the
    final step. ``dones[t]`` marks that the episode ended with step ``t``.
    Returns ``(advantages, returns)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    steps = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(steps - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values[:-1]


# -------------------------------------------------------------- rollouts


@dataclass
class RolloutBatch:
    x: np.ndarray  # (T, B, obs)
    g: np.ndarray
    u: np.ndarray  # pre-squash actions
    logp: np.ndarray
    values: np.ndarray  # (T + 1, B)
    rewards: np.ndarray
    dones: np.ndarray
    priv: list[Privileged] | None = None
    scans: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    success: np.ndarray | None = None  # (B,) any success in the episode
    grasped: np.ndarray | None = None  # (B,) any grasp in the episode
    episode_return: np.ndarray | None = None


def collect_rollout(env: TaskEnv, model: ActorCritic, rng: np.random.Generator) -> RolloutBatch:
    """Run one full episode in every world with the stochastic policy."""
    steps, b = env.horizon, env.num_envs
    xs, gs, us, lps, vals, rews, dones, privs, scans = [], [], [], [], [], [], [], [], []
    ret = np.zeros(b)
    for _ in range(steps):
        x, g = env.observation(), env.goal()
        priv = env.privileged() if model.cfg.use_env else None
        z = model.encode_env(priv) if priv is not None else None
        scan = env.depth() if model.cfg.use_depth else None
        a, u, lp, v = model.act(x, z, g, rng, scan=scan)
        r, _, d = env.step(a)
        ret += r
        xs.append(x), gs.append(g), us.append(u), lps.append(lp), vals.append(v), rews.append(r)
        dones.append(np.zeros(b))  # time limit: bootstrap from the next state
        privs.append(priv)
        if scan is not None:
            scans.append(scan)
    x, g = env.observation(), env.goal()
    priv = env.privileged() if model.cfg.use_env else None
    z = model.encode_env(priv) if priv is not None else None
    scan = env.depth() if model.cfg.use_depth else None
    _, _, _, v_last = model.act(x, z, g, None, deterministic=True, scan=scan)
    vals.append(v_last)
    return RolloutBatch(
        x=np.stack(xs), g=np.stack(gs), u=np.stack(us), logp=np.stack(lps), values=np.stack(vals),
        rewards=np.stack(rews), dones=np.stack(dones), priv=privs if model.cfg.use_env else None,
        scans=np.stack(scans) if scans else None, success=env.succeeded.copy(), grasped=env.ever_grasped.copy(), episode_return=ret,
    )


def _flat_priv(privs: list[Privileged]) -> Privileged:
    return Privileged(
        e_phys=np.concatenate([p.e_phys for p in privs]),
        instance_id=np.concatenate([p.instance_id for p in privs]),
        category_id=np.concatenate([p.category_id for p in privs]),
        rotation=np.concatenate([p.rotation for p in privs]),
        contacts=np.concatenate([p.contacts for p in privs]),
    )


def _take_priv(p: Privileged, idx) -> Privileged:
    return Privileged(p.e_phys[idx], p.instance_id[idx], p.category_id[idx], p.rotation[idx], p.contacts[idx])


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# ------------------------------------------------------------------- PPO


def ppo_losses(model: ActorCritic, cfg: PPOConfig, x, g, u, old_logp, adv, ret, priv=None, scans=None,
               backward: bool = True) -> dict[str, float]:
    """Clipped-surrogate PPO losses on one minibatch, accumulating gradients."""
    m = len(x)
    z = model.encode_env(priv) if priv is not None else None
    feat = model.depth_net.forward(scans[:, None, :]) if scans is not None else None
    inp = model.policy_input(x, z, g, feat)
    mean = model.pi.forward(inp).astype(np.float64)
    value = model.critic.forward(inp)[:, 0].astype(np.float64)
    log_std = model.log_std.astype(np.float64)
    std = np.exp(log_std)
    logp = gaussian_log_prob(u, mean, log_std)
    log_ratio = logp - old_logp
    ratio = np.exp(log_ratio)
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    pg_loss = -surr.mean()
    v_loss = 0.5 * np.mean(np.square(value - ret))
    entropy = gaussian_entropy(log_std)
    kl = float(np.mean((ratio - 1.0) - log_ratio))
    stats = {
        "pg_loss": float(pg_loss),
        "v_loss": float(v_loss),
        "entropy": entropy,
        "kl": kl,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
        "loss": float(pg_loss + cfg.vf_coef * v_loss - cfg.ent_coef * entropy),
    }
    if not backward:
        return stats
    active = (ratio * adv <= clipped * adv).astype(np.float64)
    g_logp = -active * ratio * adv / m
    z_score = (u - mean) / std
    g_mean = g_logp[:, None] * z_score / std
    g_log_std = (g_logp[:, None] * (np.square(z_score) - 1.0)).sum(0) - cfg.ent_coef
    g_value = cfg.vf_coef * (value - ret) / m
    g_inp = model.pi.backward(g_mean)
    g_inp = g_inp + model.critic.backward(g_value[:, None])
    model.log_std_grad += g_log_std.astype(model.log_std_grad.dtype)
    off = model.obs_dim
    if z is not None:
        model.encoder_backward(g_inp[:, off : off + model.cfg.z_dim], priv)
        off += model.cfg.z_dim
    off += model.goal_dim
    if feat is not None:
        model.depth_net.backward(g_inp[:, off:])
    return stats


def ppo_update(batch: RolloutBatch, model: ActorCritic, adam: Adam, cfg: PPOConfig, rng: np.random.Generator) -> dict:
    """Fill advantages, then run clipped PPO epochs over shuffled minibatches."""
    rewards = batch.rewards * cfg.reward_scale
    adv, ret = gae(rewards, batch.values, batch.dones, cfg.gamma, cfg.lam)
    batch.advantages, batch.returns = adv, ret
    n = adv.size
    flat = lambda a: a.reshape(n, *a.shape[2:])  # noqa: E731
    x, g, u, old_logp = flat(batch.x), flat(batch.g), flat(batch.u), flat(batch.logp)
    adv_n, ret_f = normalize_advantages(adv.reshape(n)), ret.reshape(n)
    priv = _flat_priv(batch.priv) if batch.priv is not None else None
    scans = flat(batch.scans) if batch.scans is not None else None
    grads = model.named_grads()
    history = []
    stopped = False
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start : start + cfg.minibatch]
            model.zero_grad()
            stats = ppo_losses(
                model, cfg, x[idx], g[idx], u[idx], old_logp[idx], adv_n[idx], ret_f[idx],
                _take_priv(priv, idx) if priv is not None else None,
                scans[idx] if scans is not None else None,
            )
            if stats["kl"] > cfg.max_kl:
                stopped = True
                break
            stats["grad_norm"] = clip_grad_norm(list(grads.values()), cfg.grad_clip)
            adam.step(grads)
            history.append(stats)
        if stopped:
            break
    out = {k: float(np.mean([h[k] for h in history])) for k in history[0]} if history else {}
    out["kl_stop"] = stopped
    out["minibatches"] = len(history)
    return out


def make_adam(model: ActorCritic, lr: float) -> Adam:
    return Adam(model.named_arrays(), lr=lr, sparse=model.sparse_names())


# ---------------------------------------------------------------- trainer


@dataclass
class TrainResult:
    model: ActorCritic
    adam: Adam
    metrics: list[dict] = field(default_factory=list)
    adr: AdrState | None = None


def train_policy(
    env: TaskEnv,
    model: ActorCritic,
    ppo: PPOConfig,
    updates: int,
    seed: int,
    curriculum: CurriculumState | None = None,
    adr: AdrState | None = None,
    log: Callable[[dict], None] | None = None,
    stop: Callable[[list[dict]], bool] | None = None,
) -> TrainResult:
    """PPO over ``updates`` rounds of one episode per world.

    Episode ``k`` of update ``u`` uses the stream ``(seed, u * num_envs + k)``
    so training data never depends on batching. ``stop`` can end training
    early from the metrics history.
    """
    adam = make_adam(model, ppo.lr)
    learner = np.random.default_rng([seed, 104729])
    curriculum = curriculum or CurriculumState()
    result = TrainResult(model, adam, [], adr)
    b = ppo.num_envs
    for update in range(updates):
        ramp = curriculum.ramp
        if ppo.anneal_lr:
            adam.lr = ppo.lr * (1.0 - update / updates)
        env.reset(update * b + np.arange(b), seed, ramp=ramp, adr=adr)
        batch = collect_rollout(env, model, learner)
        stats = ppo_update(batch, model, adam, ppo, learner)
        if ppo.normalize_inputs:
            model.update_normalizer(batch.x, batch.g)
        if adr is not None:
            for pin, ok in zip(env.pinned, batch.success):
                adr_update(adr, pin, bool(ok))
        row = {
            "update": update,
            "env_steps": (update + 1) * b * env.horizon,
            "mean_return": float(batch.episode_return.mean()),
            "success_rate": float(batch.success.mean()),
            "grasp_rate": float(batch.grasped.mean()),
            "ramp": ramp,
            "lr": adam.lr,
            **stats,
        }
        if adr is not None:
            row["adr_ranges"] = {k: [round(v[0], 6), round(v[1], 6)] for k, v in adr.ranges.items()}
        result.metrics.append(row)
        if log is not None:
            log(row)
        curriculum.advance()
        if stop is not None and stop(result.metrics):
            break
    return result
