"""Evaluation of trained agents, baseline training and per-object heatmaps.

An agent bundles a phase-1 policy with whatever produces its embedding slot:
the privileged encoder (oracle), the phase-2 adapter (rma2, nova, nooe) or
nothing at all (dr, dr_vi, adr). Evaluation runs every episode for at most 200
control steps, ends an episode at its first success and audits privileged
reads for every deployable agent.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import tasks as T
from .env import TaskEnv
from .errors import Rma2Error
from .library import ObjectLibrary, score_complexity
from .phase1 import ActorCritic, PolicyConfig, PPOConfig, TrainResult, train_policy
from .phase2 import AdapterNets, HistoryBuffer, adapt_predict
from .randomization import AdrState, CurriculumState, RandomizationSpec

AGENTS = ("oracle", "rma2", "nova", "nooe", "dr", "dr_vi", "adr")
DEPLOYABLE = ("rma2", "nova", "nooe", "dr", "dr_vi", "adr")
ADAPTED = ("rma2", "nova", "nooe")
BASELINES = ("dr", "dr_vi", "adr")
EVAL_STEPS = 200
EVAL_EPISODE_BASE = 2 * 10**9  # evaluation ids never collide with training ids


def baseline_policy_config(variant: str, base: PolicyConfig = PolicyConfig()) -> PolicyConfig:
    if variant not in BASELINES:
        raise Rma2Error(f"unknown baseline {variant!r}; expected one of {BASELINES}")
    return PolicyConfig(
        z_dim=base.z_dim, embed_dim=base.embed_dim, hidden=base.hidden, init_log_std=base.init_log_std,
        use_env=False, use_ids=False, use_depth=(variant == "dr_vi"), depth_feature=base.depth_feature,
    )


@dataclass
class Agent:
    variant: str
    policy: ActorCritic
    adapter: AdapterNets | None = None

    def __post_init__(self):
        if self.variant not in AGENTS:
            raise Rma2Error(f"unknown agent {self.variant!r}; expected one of {AGENTS}")
        cfg = self.policy.cfg
        if self.variant in ADAPTED:
            if self.adapter is None:
                raise Rma2Error(f"agent {self.variant} needs a phase-2 adapter")
            if (self.variant == "nova") != (self.adapter.psi is None):
                raise Rma2Error("nova uses an adapter without depth; rma2 and nooe use one with depth")
            if (self.variant == "nooe") == cfg.use_ids:
                raise Rma2Error("nooe needs a teacher trained without identity embeddings (and only nooe)")
        if self.variant in ("oracle",) + ADAPTED and not cfg.use_env:
            raise Rma2Error(f"agent {self.variant} needs a policy with an embedding slot")
        if self.variant in BASELINES and cfg.use_env:
            raise Rma2Error(f"baseline {self.variant} must not have an embedding slot")
        if (self.variant == "dr_vi") != cfg.use_depth:
            raise Rma2Error("only dr_vi consumes the depth scan end to end")

    @property
    def deployable(self) -> bool:
        return self.variant in DEPLOYABLE


class SensorView:
    """The part of an environment an agent may touch while it is evaluated.

    Observation, goal and depth scan pass straight through. Every access to
    privileged data (the encoder inputs, ``EnvParams``, the raw simulator state
    or the episode layout) is counted in ``reads``; anything else is refused.
    """

    PRIVILEGED = ("privileged", "params", "state", "layout", "library")

    def __init__(self, env: TaskEnv):
        self._env = env
        self.reads = 0
        self.num_envs, self.obs_dim, self.action_dim = env.num_envs, env.obs_dim, env.action_dim

    def observation(self) -> np.ndarray:
        return self._env.observation()

    def goal(self) -> np.ndarray:
        return self._env.goal()

    def depth(self) -> np.ndarray:
        return self._env.depth()

    def __getattr__(self, name):
        if name in SensorView.PRIVILEGED:
            self.reads += 1
            return getattr(self._env, name)
        raise AttributeError(f"{name!r} is not available to an agent under evaluation")


class _Runner:
    """Per-batch closed-loop controller for one agent."""

    def __init__(self, agent: Agent, env: TaskEnv):
        self.agent, self.env = agent, SensorView(env)
        b = env.num_envs
        self.hist = None
        if agent.adapter is not None:
            self.hist = HistoryBuffer(b, agent.adapter.cfg.history, env.obs_dim, env.action_dim)
        self.prev = np.zeros((b, env.action_dim))

    def act(self) -> np.ndarray:
        agent, env = self.agent, self.env
        x, g = env.observation(), env.goal()
        z = scan = None
        if agent.variant == "oracle":
            z = agent.policy.encode_env(env.privileged())
        elif self.hist is not None:
            self.hist.push(x, self.prev)
            depth = env.depth() if agent.adapter.psi is not None else None
            z = adapt_predict(self.hist, depth, agent.adapter)
        if agent.policy.cfg.use_depth:
            scan = env.depth()
        a, _, _, _ = agent.policy.act(x, z, g, None, deterministic=True, scan=scan)
        self.prev = a
        return a


@dataclass
class EvalReport:
    agent: str
    task: str
    success_rate: float
    success_std: float
    episode_length: float
    episode_length_std: float
    per_seed: list[dict]
    per_instance: dict[int, float]
    seeds: list[int]
    episodes: int
    library_split: str
    spec_mode: str
    ranges: dict
    privileged_reads: int
    digest: str = ""
    successes: np.ndarray = field(default=None, repr=False)  # (seeds, episodes)
    lengths: np.ndarray = field(default=None, repr=False)

    def summary(self) -> str:
        return (
            f"{self.agent:7s} {self.task:11s} SR {100 * self.success_rate:5.1f} +- {100 * self.success_std:4.1f}  "
            f"EL {self.episode_length:6.1f} +- {self.episode_length_std:5.1f}  ({self.episodes} eps x {len(self.seeds)} seeds, "
            f"{self.library_split} library, {self.spec_mode} ranges)"
        )

    def to_dict(self) -> dict:
        return {
            "agent": self.agent, "task": self.task, "success_rate": self.success_rate,
            "success_std": self.success_std, "episode_length": self.episode_length,
            "episode_length_std": self.episode_length_std, "per_seed": self.per_seed,
            "per_instance": {str(k): v for k, v in self.per_instance.items()}, "seeds": self.seeds,
            "episodes": self.episodes, "library_split": self.library_split, "spec_mode": self.spec_mode,
            "ranges": self.ranges, "privileged_reads": self.privileged_reads, "digest": self.digest,
        }


def run_episodes(
    agent: Agent,
    task: T.TaskConfig,
    library: ObjectLibrary | None,
    spec: RandomizationSpec,
    episode_ids: np.ndarray,
    seed: int,
    instances: np.ndarray | None = None,
    max_steps: int = EVAL_STEPS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Run one batch of evaluation episodes. Returns (success, length, instance ids, privileged reads)."""
    env = TaskEnv(task, library, spec, horizon=max_steps, terminate_on_success=True)
    env.reset(episode_ids, seed, ramp=1.0, instances=instances)
    runner = _Runner(agent, env)
    for _ in range(max_steps):
        env.step(runner.act())
        if env.done.all():
            break
    success = env.first_success >= 0
    return success, env.episode_lengths(), env.params.instance_id.copy(), runner.env.reads


def evaluate(
    agent: Agent,
    task: T.TaskConfig,
    library: ObjectLibrary | None,
    spec: RandomizationSpec,
    episodes: int = 500,
    seeds: list[int] = (0, 1, 2),
    batch: int = 500,
    max_steps: int = EVAL_STEPS,
    digest: str = "",
) -> EvalReport:
    """Success rate and episode length over ``episodes`` per seed.

    SR and EL are averaged within each seed; the reported spread is the std
    across seeds.
    """
    if agent.variant == "oracle" and library is not None and library.split != "train":
        raise Rma2Error("the oracle only has embeddings for training objects; it cannot run on a held-out library")
    if agent.variant == "oracle" and library is not None and agent.policy.dicts is not None:
        if len(library) > agent.policy.dicts.instance_table.rows:
            raise Rma2Error("library has more instances than the oracle's embedding table")
    seeds = [int(s) for s in seeds]
    succ = np.zeros((len(seeds), episodes), bool)
    lens = np.zeros((len(seeds), episodes), np.int64)
    inst = np.zeros((len(seeds), episodes), np.int64)
    reads = 0
    for i, seed in enumerate(seeds):
        for start in range(0, episodes, batch):
            ids = np.arange(start, min(start + batch, episodes))
            s, l, n, r = run_episodes(agent, task, library, spec, EVAL_EPISODE_BASE + ids, seed, max_steps=max_steps)
            succ[i, ids], lens[i, ids], inst[i, ids] = s, l, n
            reads += r
    if agent.deployable and reads:
        raise Rma2Error(f"deployable agent {agent.variant} read privileged state {reads} times")
    per_seed = [{"seed": s, "success_rate": float(succ[i].mean()), "episode_length": float(lens[i].mean())}
                for i, s in enumerate(seeds)]
    sr = succ.mean(axis=1)
    el = lens.mean(axis=1)
    per_instance = {int(k): float(succ[inst == k].mean()) for k in np.unique(inst)}
    return EvalReport(
        agent=agent.variant, task=task.name, success_rate=float(sr.mean()), success_std=float(sr.std()),
        episode_length=float(el.mean()), episode_length_std=float(el.std()), per_seed=per_seed,
        per_instance=per_instance, seeds=seeds, episodes=episodes,
        library_split=library.split if library is not None else "none", spec_mode=spec.mode,
        ranges={k: list(v) for k, v in spec.ranges().items()}, privileged_reads=reads, digest=digest,
        successes=succ, lengths=lens,
    )


# ----------------------------------------------------------------- heatmap


@dataclass
class Heatmap:
    shape_edges: np.ndarray  # (bins + 1,)
    difficulty_edges: np.ndarray
    success: np.ndarray  # (bins, bins) NaN where empty
    counts: np.ndarray
    instance_sr: np.ndarray  # per instance

    def to_csv(self, digest: str = "") -> str:
        out = io.StringIO()
        if digest:
            out.write(f"# digest={digest}\n")
        bins = self.success.shape[1]
        out.write("shape_bin,shape_lo,shape_hi," + ",".join(f"difficulty_{j}" for j in range(bins)) + "\n")
        out.write("edges,,," + ",".join(f"{self.difficulty_edges[j]:.4f}-{self.difficulty_edges[j + 1]:.4f}" for j in range(bins)) + "\n")
        for i in range(self.success.shape[0]):
            cells = ["" if np.isnan(v) else f"{v:.4f}" for v in self.success[i]]
            out.write(f"{i},{self.shape_edges[i]:.4f},{self.shape_edges[i + 1]:.4f}," + ",".join(cells) + "\n")
        return out.getvalue()


def quantile_bins(values: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantile edges and the bin index of every value (top edge inclusive)."""
    values = np.asarray(values, dtype=float)
    edges = np.quantile(values, np.linspace(0.0, 1.0, bins + 1))
    idx = np.clip(np.searchsorted(edges[1:-1], values, side="right"), 0, bins - 1)
    return edges, idx


def bucket_success(shape: np.ndarray, difficulty: np.ndarray, sr: np.ndarray, bins: int = 5) -> Heatmap:
    se, si = quantile_bins(shape, bins)
    de, di = quantile_bins(difficulty, bins)
    total = np.zeros((bins, bins))
    counts = np.zeros((bins, bins), np.int64)
    np.add.at(total, (si, di), sr)
    np.add.at(counts, (si, di), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        grid = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    return Heatmap(se, de, grid, counts, np.asarray(sr, dtype=float))


def heatmap(
    agent: Agent,
    task: T.TaskConfig,
    library: ObjectLibrary,
    spec: RandomizationSpec,
    episodes_per_instance: int = 20,
    seed: int = 0,
    bins: int = 5,
    batch: int = 500,
) -> Heatmap:
    """Per-instance SR bucketed on score quantiles of the library."""
    scores = [score_complexity(inst) for inst in library.instances]
    shape = np.array([s.shape_complexity for s in scores])
    diff = np.array([s.grasp_difficulty for s in scores])
    n = len(library)
    instances = np.repeat(np.arange(n), episodes_per_instance)
    succ = np.zeros(len(instances), bool)
    for start in range(0, len(instances), batch):
        sl = slice(start, start + batch)
        ids = EVAL_EPISODE_BASE + np.arange(len(instances))[sl]
        s, _, _, reads = run_episodes(agent, task, library, spec, ids, seed, instances=instances[sl])
        if agent.deployable and reads:
            raise Rma2Error(f"deployable agent {agent.variant} read privileged state {reads} times")
        succ[sl] = s
    sr = succ.reshape(n, episodes_per_instance).mean(axis=1)
    return bucket_success(shape, diff, sr, bins)


# --------------------------------------------------------------- baselines


def train_baseline(
    variant: str,
    env: TaskEnv,
    ppo: PPOConfig,
    updates: int,
    seed: int,
    base: PolicyConfig = PolicyConfig(),
    curriculum: CurriculumState | None = None,
    log=None,
    rays: int = 64,
) -> tuple[TrainResult, dict]:
    """PPO for a single-phase baseline. Returns the result and timing stats."""
    cfg = baseline_policy_config(variant, base)
    lib = env.library
    model = ActorCritic(cfg, env.obs_dim, env.goal_dim, env.action_dim, len(lib) if lib is not None else 1,
                        lib.num_categories if lib is not None else 1, np.random.default_rng(seed), rays=rays)
    adr = AdrState.from_spec(env.spec) if variant == "adr" else None
    if adr is not None:
        curriculum = CurriculumState.full()
    t0 = time.perf_counter()
    res = train_policy(env, model, ppo, updates, seed, curriculum=curriculum, adr=adr, log=log)
    elapsed = time.perf_counter() - t0
    steps = res.metrics[-1]["env_steps"] if res.metrics else 0
    timing = {"variant": variant, "seconds": elapsed, "env_steps": steps,
              "seconds_per_env_step": elapsed / max(steps, 1)}
    return res, timing
