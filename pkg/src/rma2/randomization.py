"""Domain randomization: sampling ranges, the linear curriculum, test-time
widening and an automatic domain randomization (ADR) controller."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import Rma2Error
from .library import ObjectLibrary
from .sense import NoiseSpec
from .sim import EnvParams

ENV_FIELDS = ("scale", "density", "friction", "force_scale")
NOISE_FIELDS = ("obj_pos_noise", "obj_rot_noise_deg", "joint_pos_noise")


def _widen(x: float, factor: float) -> float:
    # rounding keeps products like 0.7 * 0.8 at their decimal value
    return round(x * factor, 12)


@dataclass(frozen=True)
class RandomizationSpec:
    scale: tuple[float, float] = (0.70, 1.20)
    density: tuple[float, float] = (0.50, 5.00)
    friction: tuple[float, float] = (0.50, 1.10)
    force_scale: tuple[float, float] = (0.00, 2.00)
    obj_pos_noise: tuple[float, float] = (-0.005, 0.005)
    obj_rot_noise_deg: tuple[float, float] = (-10.0, 10.0)
    joint_pos_noise: tuple[float, float] = (-0.005, 0.005)
    disturb_prob: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        for name in ENV_FIELDS + NOISE_FIELDS:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise Rma2Error(f"randomization range {name} has low {lo} > high {hi}")
        if self.mode not in ("train", "test"):
            raise Rma2Error(f"mode must be train or test, got {self.mode!r}")
        if not 0.0 <= self.disturb_prob <= 1.0:
            raise Rma2Error("disturb_prob must lie in [0, 1]")

    def noise(self, ramp: float = 1.0) -> NoiseSpec:
        bound = lambda r: ramp * max(abs(r[0]), abs(r[1]))  # noqa: E731
        return NoiseSpec(bound(self.obj_pos_noise), bound(self.obj_rot_noise_deg), bound(self.joint_pos_noise))

    def ranges(self) -> dict[str, tuple[float, float]]:
        return {name: tuple(getattr(self, name)) for name in ENV_FIELDS + NOISE_FIELDS}


def widen_for_test(spec: RandomizationSpec) -> RandomizationSpec:
    """Environment and disturbance ranges: low x0.8, high x1.2. Noise: both x1.2."""
    if spec.mode != "train":
        raise Rma2Error("widen_for_test called on a spec that is already test-widened")
    changes = {name: (_widen(getattr(spec, name)[0], 0.8), _widen(getattr(spec, name)[1], 1.2)) for name in ENV_FIELDS}
    changes.update({name: (_widen(getattr(spec, name)[0], 1.2), _widen(getattr(spec, name)[1], 1.2)) for name in NOISE_FIELDS})
    return dataclasses.replace(spec, mode="test", **changes)


@dataclass
class CurriculumState:
    ramp_updates: int = 300
    update_idx: int = 0

    @property
    def ramp(self) -> float:
        if self.ramp_updates <= 0:
            return 1.0
        return min(self.update_idx / self.ramp_updates, 1.0)

    def advance(self) -> None:
        self.update_idx += 1

    @staticmethod
    def full() -> "CurriculumState":
        return CurriculumState(ramp_updates=0)


def sample_env(
    spec: RandomizationSpec,
    ramp: float,
    library: ObjectLibrary | None,
    rng: np.random.Generator,
    ranges: dict[str, tuple[float, float]] | None = None,
) -> EnvParams:
    """One episode's parameters, as a batch of one.

    Each scalar is uniform on ``mid +- ramp * half_width`` of its range.
    ``ranges`` overrides the spec's environment ranges (used by ADR).
    """
    vals = {}
    for name in ENV_FIELDS:
        lo, hi = (ranges or {}).get(name, getattr(spec, name))
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        vals[name] = float(mid + ramp * half * (2.0 * rng.random() - 1.0))
    if library is not None:
        if len(library) == 0:
            raise Rma2Error("cannot sample from an empty object library")
        inst = int(rng.integers(len(library)))
        cat = int(library.cat[inst])
    else:
        inst = cat = 0
        rng.random()  # keep stream alignment identical across tasks
    return EnvParams(
        scale_mult=np.array([vals["scale"]]),
        density_mult=np.array([vals["density"]]),
        friction=np.array([vals["friction"]]),
        instance_id=np.array([inst]),
        category_id=np.array([cat]),
        force_scale=np.array([vals["force_scale"]]),
        disturb_prob=np.array([spec.disturb_prob * ramp]),
        task_slot=np.zeros((1, 2)),
    )


# -------------------------------------------------------------------- ADR


@dataclass
class AdrState:
    ranges: dict[str, list[float]]
    bounds: dict[str, tuple[float, float]]
    step: dict[str, float]
    buffer_size: int = 128
    sr_hi: float = 0.7
    sr_lo: float = 0.3
    boundary_prob: float = 0.5
    buffers: dict[tuple[str, int], list[float]] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @staticmethod
    def from_spec(spec: RandomizationSpec, step_frac: float = 0.05, **kw) -> "AdrState":
        outer = widen_for_test(spec) if spec.mode == "train" else spec
        bounds = {n: tuple(getattr(outer, n)) for n in ENV_FIELDS}
        ranges = {n: [max(getattr(spec, n)[0], bounds[n][0]), min(getattr(spec, n)[1], bounds[n][1])] for n in ENV_FIELDS}
        step = {n: step_frac * (bounds[n][1] - bounds[n][0]) for n in ENV_FIELDS}
        return AdrState(ranges, bounds, step, **kw)

    def range_dict(self) -> dict[str, tuple[float, float]]:
        return {n: (lo, hi) for n, (lo, hi) in self.ranges.items()}

    def sample(self, spec: RandomizationSpec, library, rng: np.random.Generator) -> tuple[EnvParams, tuple[str, int] | None]:
        """Sample under the current ADR ranges, pinning one boundary half the time."""
        params = sample_env(spec, 1.0, library, rng, self.range_dict())
        pinned = None
        if rng.random() < self.boundary_prob:
            name = ENV_FIELDS[int(rng.integers(len(ENV_FIELDS)))]
            side = int(rng.integers(2))
            value = self.ranges[name][side]
            attr = {"scale": "scale_mult", "density": "density_mult", "friction": "friction", "force_scale": "force_scale"}[name]
            getattr(params, attr)[0] = value
            pinned = (name, side)
        return params, pinned


def adr_update(adr: AdrState, pinned: tuple[str, int] | None, success: bool) -> AdrState:
    """Record one episode's outcome; move a boundary when its buffer fills."""
    if pinned is None:
        return adr
    buf = adr.buffers.setdefault(pinned, [])
    buf.append(float(success))
    if len(buf) < adr.buffer_size:
        return adr
    name, side = pinned
    sr = float(np.mean(buf))
    buf.clear()
    lo, hi = adr.ranges[name]
    outer_lo, outer_hi = adr.bounds[name]
    d = adr.step[name]
    sign = -1.0 if side == 0 else 1.0  # outward direction for this boundary
    moved = 0.0
    if sr >= adr.sr_hi:
        moved = sign * d
    elif sr <= adr.sr_lo:
        moved = -sign * d
    if moved:
        if side == 0:
            lo = float(np.clip(lo + moved, outer_lo, hi))
        else:
            hi = float(np.clip(hi + moved, lo, outer_hi))
        adr.ranges[name] = [lo, hi]
    adr.history.append({"param": name, "side": side, "sr": sr, "range": [lo, hi]})
    return adr
