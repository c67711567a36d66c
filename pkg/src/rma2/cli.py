"""Command line: configuration, checkpoints, metrics and the experiment commands.

Every artifact embeds the digest of the configuration it was produced under.
Checkpoints are a small binary container: a fixed preamble, a JSON header and
the named parameter arrays as little-endian float32.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import io
import json
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import library as L
from . import tasks as T
from .env import TaskEnv
from .errors import CheckpointError, ConfigError, Rma2Error
from .harness import AGENTS, BASELINES, Agent, baseline_policy_config, evaluate, heatmap, train_baseline
from .phase1 import ActorCritic, PolicyConfig, PPOConfig, train_policy
from .phase2 import AdapterConfig, AdapterNets, train_adapter
from .randomization import CurriculumState, RandomizationSpec, widen_for_test

# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class RunSection:
    task: str = "pick_place"
    seed: int = 0
    library_size: int = 10
    heldout_size: int = 200
    library_seed: int = 0
    horizon: int = 50
    policy_updates: int = 800
    baseline_updates: int = 800


@dataclass(frozen=True)
class CurriculumSection:
    ramp_updates: int = 300


@dataclass(frozen=True)
class EvalSection:
    episodes: int = 500
    seeds: tuple[int, ...] = (100, 101, 102)
    batch: int = 500
    max_steps: int = 200
    heatmap_episodes: int = 20
    heatmap_bins: int = 5


SECTIONS = {
    "run": RunSection,
    "randomization": RandomizationSpec,
    "curriculum": CurriculumSection,
    "policy": PolicyConfig,
    "ppo": PPOConfig,
    "adapter": AdapterConfig,
    "eval": EvalSection,
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [p for p in (s.strip() for s in text.split(",")) if p]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from exc


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = RunSection()
    randomization: RandomizationSpec = RandomizationSpec()
    curriculum: CurriculumSection = CurriculumSection()
    policy: PolicyConfig = PolicyConfig()
    ppo: PPOConfig = PPOConfig()
    adapter: AdapterConfig = AdapterConfig()
    eval: EvalSection = EvalSection()

    @staticmethod
    def from_text(text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        unknown = [f"[{s}]" for s in cp.sections() if s not in SECTIONS]
        parts = {}
        for name, cls in SECTIONS.items():
            defaults = cls()
            known = {f.name for f in dataclasses.fields(cls)}
            changes = {}
            if cp.has_section(name):
                for key, raw in cp.items(name):
                    if key not in known:
                        unknown.append(f"{name}.{key}")
                        continue
                    changes[key] = _parse(raw, getattr(defaults, key), f"{name}.{key}")
            try:
                parts[name] = dataclasses.replace(defaults, **changes)
            except Rma2Error as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = RunConfig(**parts)
        if cfg.run.task not in T.TASKS:
            raise ConfigError(f"run.task must be one of {T.TASKS}, got {cfg.run.task!r}")
        return cfg

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        return RunConfig.from_text(Path(path).read_text())

    def to_text(self) -> str:
        out = io.StringIO()
        for name in SECTIONS:
            section = getattr(self, name)
            out.write(f"[{name}]\n")
            for f in dataclasses.fields(section):
                out.write(f"{f.name} = {_format(getattr(section, f.name))}\n")
            out.write("\n")
        return out.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_task(self, task: str | None) -> "RunConfig":
        if task is None:
            return self
        return dataclasses.replace(self, run=dataclasses.replace(self.run, task=task))


def config_digest(text: str) -> str:
    return RunConfig.from_text(text).digest()


# -------------------------------------------------------------- checkpoint

MAGIC = b"RMA2CKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")  # magic, version, header length


@dataclass
class Checkpoint:
    phase: str
    config_text: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    parent: str = ""  # payload hash of the checkpoint this one was trained against

    @property
    def config_digest(self) -> str:
        return config_digest(self.config_text)

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_text(self.config_text)

    def payload(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.arrays[k], dtype="<f4").tobytes() for k in sorted(self.arrays))

    def payload_hash(self) -> str:
        return hashlib.sha256(self.payload()).hexdigest()

    def to_bytes(self) -> bytes:
        entries, offset = [], 0
        for name in sorted(self.arrays):
            arr = self.arrays[name]
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += int(arr.size) * 4
        header = {
            "phase": self.phase,
            "config_digest": self.config_digest,
            "config": self.config_text,
            "parent": self.parent,
            "meta": self.meta,
            "arrays": entries,
            "payload_sha256": self.payload_hash(),
        }
        blob = json.dumps(header, sort_keys=True).encode()
        return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + self.payload()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def from_bytes(data: bytes) -> "Checkpoint":
        if len(data) < _PREAMBLE.size:
            raise CheckpointError("file too short for a checkpoint")
        magic, version, hlen = _PREAMBLE.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(data[_PREAMBLE.size : _PREAMBLE.size + hlen])
        except ValueError as exc:
            raise CheckpointError("corrupt checkpoint header") from exc
        body = data[_PREAMBLE.size + hlen :]
        arrays = {}
        for e in header["arrays"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            start = e["offset"]
            if start + 4 * n > len(body):
                raise CheckpointError(f"array {e['name']} runs past the end of the file")
            arrays[e["name"]] = np.frombuffer(body, dtype="<f4", count=n, offset=start).reshape(e["shape"]).astype(np.float32)
        ck = Checkpoint(header["phase"], header["config"], arrays, header.get("meta", {}), header.get("parent", ""))
        try:
            digest = ck.config_digest
        except ConfigError as exc:
            raise CheckpointError(f"checkpoint config no longer parses: {exc}") from exc
        if digest != header["config_digest"]:
            raise CheckpointError("config digest does not match the embedded config (tampered checkpoint)")
        if ck.payload_hash() != header["payload_sha256"]:
            raise CheckpointError("parameter payload hash mismatch (tampered or truncated checkpoint)")
        return ck

    @staticmethod
    def load(path: str | Path) -> "Checkpoint":
        p = Path(path)
        if not p.exists():
            raise CheckpointError(f"checkpoint {p} does not exist")
        return Checkpoint.from_bytes(p.read_bytes())


# ------------------------------------------------------------ builders


def task_library(cfg: RunConfig, split: str = "train") -> L.ObjectLibrary | None:
    task = cfg.run.task
    if task == "reach":
        return None
    if task == "faucet":
        if split != "train":
            raise ConfigError("the faucet task has no held-out library")
        return L.faucet_library(seed=cfg.run.library_seed)
    if task == "peg_insert":
        if split != "train":
            raise ConfigError("the peg task has no held-out library")
        return L.peg_library()
    count = cfg.run.library_size if split == "train" else cfg.run.heldout_size
    return L.pick_library(split, count=count, seed=cfg.run.library_seed)


def make_env(cfg: RunConfig, library=None, split="train") -> TaskEnv:
    lib = task_library(cfg, split) if library is None else library
    return TaskEnv(T.TaskConfig(cfg.run.task), lib, cfg.randomization, horizon=cfg.run.horizon)


def build_policy(cfg: RunConfig, policy_cfg: PolicyConfig, seed: int) -> ActorCritic:
    env = make_env(cfg)
    lib = env.library
    return ActorCritic(policy_cfg, env.obs_dim, env.goal_dim, env.action_dim, len(lib) if lib else 1,
                       lib.num_categories if lib else 1, np.random.default_rng(seed))


def policy_checkpoint(cfg: RunConfig, model: ActorCritic, adam, variant: str, phase: str = "policy") -> Checkpoint:
    arrays = {f"model.{k}": v for k, v in model.state_arrays().items()}
    arrays.update({k: v for k, v in adam.state_arrays().items()})
    meta = {"variant": variant, "policy": dataclasses.asdict(model.cfg), "adam_t": adam.t}
    return Checkpoint(phase, cfg.to_text(), arrays, meta)


def load_policy(ck: Checkpoint) -> tuple[ActorCritic, str]:
    if ck.phase not in ("policy", "baseline"):
        raise CheckpointError(f"expected a policy checkpoint, got phase {ck.phase!r}")
    pcfg = PolicyConfig(**ck.meta["policy"])
    model = build_policy(ck.config, pcfg, 0)
    model.load_arrays({k[len("model.") :]: v for k, v in ck.arrays.items() if k.startswith("model.")})
    return model, ck.meta["variant"]


def adapter_checkpoint(cfg: RunConfig, nets: AdapterNets, parent: Checkpoint) -> Checkpoint:
    arrays = {f"adapter.{k}": v for k, v in nets.named_arrays().items()}
    meta = {"adapter": dataclasses.asdict(nets.cfg), "teacher_variant": parent.meta.get("variant", "")}
    return Checkpoint("adapter", cfg.to_text(), arrays, meta, parent=parent.payload_hash())


def load_adapter(ck: Checkpoint, policy_ck: Checkpoint, teacher: ActorCritic) -> AdapterNets:
    if ck.phase != "adapter":
        raise CheckpointError(f"expected an adapter checkpoint, got phase {ck.phase!r}")
    if ck.parent != policy_ck.payload_hash():
        raise CheckpointError("adapter was trained against a different phase-1 checkpoint")
    acfg = AdapterConfig(**ck.meta["adapter"])
    nets = AdapterNets(acfg, teacher.cfg.z_dim, teacher.obs_dim, teacher.action_dim, np.random.default_rng(0))
    nets.load_arrays({k[len("adapter.") :]: v for k, v in ck.arrays.items() if k.startswith("adapter.")})
    return nets


# ------------------------------------------------------------- run files


class RunDir:
    """One directory per run: config copy, checkpoints, metrics and reports."""

    def __init__(self, path: str | Path, cfg: RunConfig):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.digest = cfg.digest()
        (self.path / "config.ini").write_text(cfg.to_text())

    def metrics(self, name: str = "metrics.jsonl"):
        target = self.path / name
        if target.exists():
            raise Rma2Error(f"{target} already exists; use a fresh run directory")
        fh = target.open("a")
        digest = self.digest

        def write(row: dict) -> None:
            fh.write(json.dumps({"digest": digest, **row}, sort_keys=True) + "\n")
            fh.flush()

        return write, fh


def _float_row(row: dict) -> dict:
    return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v) for k, v in row.items()}


# --------------------------------------------------------------- commands


def _load_cfg(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_task(getattr(args, "task", None))


def cmd_train_policy(args) -> int:
    cfg = _load_cfg(args)
    run = RunDir(args.out, cfg)
    env = make_env(cfg)
    model = build_policy(cfg, cfg.policy, cfg.run.seed)
    write, fh = run.metrics()
    updates = args.updates if args.updates is not None else cfg.run.policy_updates
    res = train_policy(env, model, cfg.ppo, updates, cfg.run.seed,
                       curriculum=CurriculumState(cfg.curriculum.ramp_updates), log=lambda r: write(_float_row(r)))
    fh.close()
    ck = policy_checkpoint(cfg, res.model, res.adam, "teacher" if cfg.policy.use_ids else "teacher_noid")
    ck.save(run.path / "policy.ckpt")
    last = res.metrics[-1]
    print(f"trained {updates} updates, final SR {last['success_rate']:.3f}, return {last['mean_return']:.2f}; digest {run.digest}")
    return 0


def cmd_train_baseline(args) -> int:
    cfg = _load_cfg(args)
    run = RunDir(args.out, cfg)
    env = make_env(cfg)
    write, fh = run.metrics()
    updates = args.updates if args.updates is not None else cfg.run.baseline_updates
    res, timing = train_baseline(args.variant, env, cfg.ppo, updates, cfg.run.seed, cfg.policy,
                                 curriculum=CurriculumState(cfg.curriculum.ramp_updates), log=lambda r: write(_float_row(r)))
    fh.close()
    ck = policy_checkpoint(cfg, res.model, res.adam, args.variant, phase="baseline")
    ck.meta["timing"] = {"env_steps": timing["env_steps"]}
    ck.save(run.path / "policy.ckpt")
    (run.path / "timing.json").write_text(json.dumps({"digest": run.digest, **timing}, sort_keys=True) + "\n")
    print(f"{args.variant}: {timing['seconds_per_env_step'] * 1e3:.3f} ms per env step; digest {run.digest}")
    return 0


def cmd_train_adapter(args) -> int:
    policy_ck = Checkpoint.load(args.policy)
    teacher, variant = load_policy(policy_ck)
    if teacher.mu is None:
        raise CheckpointError(f"policy checkpoint variant {variant!r} has no environment encoder to distil")
    cfg = _load_cfg(args) if args.config else policy_ck.config
    if args.no_depth:
        cfg = dataclasses.replace(cfg, adapter=dataclasses.replace(cfg.adapter, use_depth=False))
    if cfg.run.task != policy_ck.config.run.task:
        raise ConfigError("adapter task differs from the policy checkpoint task")
    run = RunDir(args.out, cfg)
    env = make_env(cfg)
    nets = AdapterNets(cfg.adapter, teacher.cfg.z_dim, env.obs_dim, env.action_dim, np.random.default_rng([cfg.run.seed, 17]))
    write, fh = run.metrics()
    res = train_adapter(env, teacher, nets, cfg.run.seed, updates=args.updates, log=write)
    fh.close()
    adapter_checkpoint(cfg, res.nets, policy_ck).save(run.path / "adapter.ckpt")
    last = res.metrics[-1]
    print(f"adapter held-out loss {last['heldout_loss_init']:.4f} -> {last['heldout_loss']:.4f}; digest {run.digest}")
    return 0


def _agent(args) -> tuple[Agent, RunConfig, str]:
    policy_ck = Checkpoint.load(args.policy)
    policy, _ = load_policy(policy_ck)
    adapter = None
    if args.agent in ("rma2", "nova", "nooe"):
        if not args.adapter:
            raise ConfigError(f"agent {args.agent} needs --adapter")
        adapter = load_adapter(Checkpoint.load(args.adapter), policy_ck, policy)
    return Agent(args.agent, policy, adapter), policy_ck.config, policy_ck.config_digest


def _eval_spec(cfg: RunConfig, widen: bool) -> RandomizationSpec:
    return widen_for_test(cfg.randomization) if widen else cfg.randomization


def cmd_evaluate(args) -> int:
    agent, cfg, digest = _agent(args)
    if args.config:
        cfg = RunConfig.load(args.config)
        digest = cfg.digest()
    lib = task_library(cfg, args.library)
    spec = _eval_spec(cfg, args.test_widening)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.eval.seeds)
    episodes = args.episodes if args.episodes is not None else cfg.eval.episodes
    rep = evaluate(agent, T.TaskConfig(cfg.run.task), lib, spec, episodes, seeds, cfg.eval.batch, cfg.eval.max_steps, digest)
    line = json.dumps(rep.to_dict(), sort_keys=True)
    print(rep.summary())
    print("effective ranges: " + ", ".join(f"{k} [{v[0]}, {v[1]}]" for k, v in rep.ranges.items()))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("a") as fh:
            fh.write(line + "\n")
    return 0


def cmd_heatmap(args) -> int:
    agent, cfg, digest = _agent(args)
    lib = task_library(cfg, args.library)
    spec = _eval_spec(cfg, args.test_widening)
    hm = heatmap(agent, T.TaskConfig(cfg.run.task), lib, spec, args.episodes or cfg.eval.heatmap_episodes,
                 seed=args.seed, bins=cfg.eval.heatmap_bins, batch=cfg.eval.batch)
    text = hm.to_csv(digest)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_verify(args) -> int:
    """Check that every artifact in a run directory matches its config digest."""
    path = Path(args.path)
    files = sorted(path.iterdir()) if path.is_dir() else [path]
    cfg_path = (path if path.is_dir() else path.parent) / "config.ini"
    expected = RunConfig.load(cfg_path).digest() if cfg_path.exists() else None
    bad = 0
    for f in files:
        status = "ok"
        try:
            if f.suffix == ".ckpt":
                ck = Checkpoint.load(f)
                if expected and ck.config_digest != expected:
                    status = "digest differs from config.ini"
            elif f.suffix in (".jsonl", ".json"):
                for n, line in enumerate(f.read_text().splitlines()):
                    rec = json.loads(line)
                    if expected and rec.get("digest") not in (expected, None):
                        status = f"line {n + 1}: digest differs from config.ini"
                        break
                    if rec.get("digest") is None:
                        status = f"line {n + 1}: no digest"
                        break
            elif f.name == "config.ini":
                RunConfig.load(f)
            else:
                continue
        except Rma2Error as exc:
            status = f"fault: {exc}"
        if status != "ok":
            bad += 1
        print(f"{f.name}: {status}")
    return 1 if bad else 0


def cmd_trace(args) -> int:
    """Write per-step simulator state of a short deterministic rollout as JSON lines."""
    agent, cfg, digest = _agent(args)
    env = TaskEnv(T.TaskConfig(cfg.run.task), task_library(cfg), _eval_spec(cfg, args.test_widening),
                  horizon=args.steps, terminate_on_success=False)
    from .harness import _Runner

    env.reset(np.arange(args.episodes), args.seed, ramp=1.0)
    runner = _Runner(agent, env)
    out = Path(args.out)
    with out.open("w") as fh:
        for t in range(args.steps):
            a = runner.act()
            r, s, _ = env.step(a)
            arrays = env.state.arrays()
            rec = {"digest": digest, "step": t + 1, "reward": r.tolist(), "success": s.tolist(),
                   "action": a.tolist(), **{k: np.asarray(v).tolist() for k, v in arrays.items()}}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rma2", description="Planar manipulation with two-phase motor adaptation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, task=True):
        sp.add_argument("--config", help="run config (INI); defaults when omitted")
        if task:
            sp.add_argument("--task", choices=T.TASKS, help="override run.task")

    sp = sub.add_parser("train-policy", help="phase 1: PPO teacher with the privileged encoder")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--updates", type=int)
    sp.set_defaults(func=cmd_train_policy)

    sp = sub.add_parser("train-adapter", help="phase 2: adapter regression against a frozen teacher")
    common(sp, task=False)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--updates", type=int)
    sp.add_argument("--no-depth", action="store_true", help="NoVA adapter (history only)")
    sp.set_defaults(func=cmd_train_adapter)

    sp = sub.add_parser("train-baseline", help="single-phase baselines")
    common(sp)
    sp.add_argument("--variant", required=True, choices=BASELINES)
    sp.add_argument("--out", required=True)
    sp.add_argument("--updates", type=int)
    sp.set_defaults(func=cmd_train_baseline)

    def agent_args(sp):
        sp.add_argument("--agent", required=True, choices=AGENTS)
        sp.add_argument("--policy", required=True)
        sp.add_argument("--adapter")
        sp.add_argument("--test-widening", action="store_true")

    sp = sub.add_parser("evaluate", help="success rate and episode length")
    agent_args(sp)
    sp.add_argument("--config", help="evaluation config; defaults to the policy's own")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--seeds", help="comma separated")
    sp.add_argument("--library", default="train", choices=("train", "held_out"))
    sp.add_argument("--out", help="append the report as one JSON line")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("heatmap", help="per-object SR on score-quantile buckets (CSV)")
    agent_args(sp)
    sp.add_argument("--library", default="held_out", choices=("train", "held_out"))
    sp.add_argument("--episodes", type=int, help="episodes per instance")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_heatmap)

    sp = sub.add_parser("verify", help="recompute and check digests of a run directory or file")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("trace", help="dump per-step simulator state of a deterministic rollout")
    agent_args(sp)
    sp.add_argument("--episodes", type=int, default=1)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_trace)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except Rma2Error as exc:
        print(f"rma2: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
