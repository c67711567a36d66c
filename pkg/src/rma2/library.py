"""Procedural 2D object libraries and their complexity scores.

Each family maps a small parameter record to a simple polygon centred on its
centroid. The train split samples parameters inside fixed ranges; the held-out
split samples every parameter from a band just outside those ranges, so the two
parameter sets can never overlap.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import Rma2Error

FORMAT_HEADER = "rma2-object-library v1"
AREAL_DENSITY = 10.0  # kg / m^2 at density multiplier 1
PICK_CATEGORIES = ("box", "tee", "ell", "disk", "cup", "bar")
FAUCET_CATEGORIES = ("straight", "bent", "paddle")

# (low, high) canonical ranges in metres / radians for the train split
FAMILY_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "box": {"width": (0.035, 0.05), "length": (0.06, 0.10)},
    "bar": {"width": (0.025, 0.04), "length": (0.11, 0.16)},
    "tee": {"top": (0.08, 0.11), "top_t": (0.025, 0.035), "stem": (0.04, 0.07), "stem_t": (0.025, 0.035)},
    "ell": {"long": (0.07, 0.10), "short": (0.04, 0.07), "thick": (0.03, 0.04)},
    "disk": {"radius": (0.017, 0.026)},
    "cup": {"width": (0.05, 0.065), "depth": (0.04, 0.06), "wall": (0.012, 0.018), "base": (0.02, 0.03)},
    "straight": {"length": (0.10, 0.16), "width": (0.02, 0.035)},
    "bent": {"length": (0.10, 0.16), "width": (0.02, 0.035), "bend": (0.25, 0.6)},
    "paddle": {"length": (0.10, 0.16), "width": (0.02, 0.03), "paddle": (0.035, 0.045)},
    "peg": {"length": (0.10, 0.10), "width": (0.025, 0.025)},
}
HELD_OUT_BAND = 0.25


@dataclass(frozen=True)
class ObjectInstance:
    category: str
    params: dict
    vertices: np.ndarray  # (V, 2), canonical scale, counter-clockwise, centroid (or pivot) at origin

    @property
    def area(self) -> float:
        return abs(geo.polygon_area_centroid(self.vertices)[0])

    @property
    def canonical_mass(self) -> float:
        return AREAL_DENSITY * self.area

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * (self.vertices.max(axis=0) - self.vertices.min(axis=0))

    def key(self) -> tuple:
        return (self.category,) + tuple(sorted((k, round(float(v), 12)) for k, v in self.params.items()))


@dataclass
class ObjectLibrary:
    categories: tuple[str, ...]
    instances: list[ObjectInstance]
    split: str = "train"
    _cat_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.instances:
            raise Rma2Error("object library is empty")
        self._cat_index = {c: i for i, c in enumerate(self.categories)}
        self.cat = np.array([self._cat_index[inst.category] for inst in self.instances], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def max_vertices(self) -> int:
        v = max(len(inst.vertices) for inst in self.instances)
        return v + (v % 2)

    def padded(self, size: int | None = None) -> np.ndarray:
        size = size or self.max_vertices()
        return np.stack([geo.pad_polygon(inst.vertices, size) for inst in self.instances])

    def to_text(self) -> str:
        lines = [FORMAT_HEADER, json.dumps({"split": self.split, "categories": list(self.categories)})]
        for inst in self.instances:
            lines.append(
                json.dumps(
                    {
                        "category": inst.category,
                        "params": inst.params,
                        "vertices": [[float(x), float(y)] for x, y in inst.vertices],
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ObjectLibrary":
        lines = text.strip().splitlines()
        if not lines or lines[0] != FORMAT_HEADER:
            raise Rma2Error(f"not an object library (expected header {FORMAT_HEADER!r})")
        meta = json.loads(lines[1])
        instances = []
        for line in lines[2:]:
            rec = json.loads(line)
            instances.append(ObjectInstance(rec["category"], rec["params"], np.array(rec["vertices"], dtype=float)))
        return cls(tuple(meta["categories"]), instances, meta["split"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


# ---------------------------------------------------------------- polygons


def _rect(w: float, l: float) -> np.ndarray:
    return np.array([[-l / 2, -w / 2], [l / 2, -w / 2], [l / 2, w / 2], [-l / 2, w / 2]])


def _regular(n: int, r: float) -> np.ndarray:
    a = 2 * np.pi * np.arange(n) / n
    return r * np.stack([np.cos(a), np.sin(a)], -1)


def _strip(points: np.ndarray, width: float) -> np.ndarray:
    """Outline of a thick polyline (mitred joints), counter-clockwise."""
    d = np.diff(points, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    nrm = np.stack([-d[:, 1], d[:, 0]], -1)
    left, right = [], []
    for i, p in enumerate(points):
        if i == 0:
            m = nrm[0]
        elif i == len(points) - 1:
            m = nrm[-1]
        else:
            m = nrm[i - 1] + nrm[i]
            m = m / np.dot(m, nrm[i])
        left.append(p + m * width / 2)
        right.append(p - m * width / 2)
    return np.array(right + left[::-1])


def family_polygon(category: str, p: dict) -> np.ndarray:
    if category in ("box", "bar", "peg"):
        return _rect(p["width"], p["length"])
    if category == "disk":
        return _regular(32, p["radius"])
    if category == "tee":
        a, t, b, t2 = p["top"], p["top_t"], p["stem"], p["stem_t"]
        return np.array(
            [[-t2 / 2, 0], [t2 / 2, 0], [t2 / 2, b], [a / 2, b], [a / 2, b + t], [-a / 2, b + t], [-a / 2, b], [-t2 / 2, b]]
        )
    if category == "ell":
        a, b, t = p["long"], p["short"], p["thick"]
        return np.array([[0, 0], [a, 0], [a, t], [t, t], [t, b], [0, b]])
    if category == "cup":
        w, d, wall, base = p["width"], p["depth"], p["wall"], p["base"]
        return np.array(
            [[0, 0], [w, 0], [w, d], [w - wall, d], [w - wall, base], [wall, base], [wall, d], [0, d]]
        )
    if category == "straight":
        return _strip(np.array([[0.0, 0.0], [p["length"], 0.0]]), p["width"])
    if category == "bent":
        half = p["length"] / 2
        knee = np.array([half, 0.0])
        end = knee + half * np.array([np.cos(p["bend"]), np.sin(p["bend"])])
        return _strip(np.array([[0.0, 0.0], knee, end]), p["width"])
    if category == "paddle":
        l, w, pw = p["length"], p["width"], p["paddle"]
        k = 0.6 * l
        return np.array([[0, -w / 2], [k, -w / 2], [k, -pw / 2], [l, -pw / 2], [l, pw / 2], [k, pw / 2], [k, w / 2], [0, w / 2]])
    raise Rma2Error(f"unknown object family {category!r}")


def _valid(verts: np.ndarray) -> bool:
    area, centroid = geo.polygon_area_centroid(verts)
    if area <= 0 or not geo.is_simple(verts):
        return False
    return bool(geo.point_in_polygon(centroid[None, None, :], verts[None])[0, 0])


def make_instance(category: str, params: dict, centre: bool = True) -> ObjectInstance:
    verts = family_polygon(category, params).astype(float)
    area, centroid = geo.polygon_area_centroid(verts)
    if area < 0:
        verts = verts[::-1].copy()
    if centre:
        verts = verts - centroid
    return ObjectInstance(category, dict(params), verts)


def _sample_params(category: str, rng: np.random.Generator, held_out: bool) -> dict:
    out = {}
    for name, (lo, hi) in FAMILY_RANGES[category].items():
        if not held_out or lo == hi:
            out[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        elif rng.random() < 0.5:
            out[name] = float(rng.uniform(lo * (1 - HELD_OUT_BAND), lo))
        else:
            out[name] = float(rng.uniform(np.nextafter(hi, np.inf), hi * (1 + HELD_OUT_BAND)))
    return out


def build_library(
    categories: tuple[str, ...],
    count: int,
    split: str = "train",
    seed: int = 0,
    centre: bool = True,
) -> ObjectLibrary:
    """Round-robin over ``categories`` until ``count`` valid instances exist."""
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    instances = []
    i = 0
    while len(instances) < count:
        cat = categories[i % len(categories)]
        for _ in range(1000):
            params = _sample_params(cat, rng, held_out=(split != "train"))
            inst = make_instance(cat, params, centre=centre)
            if not centre or _valid(inst.vertices):
                break
        else:
            raise Rma2Error(f"could not sample a valid {cat} instance")
        instances.append(inst)
        i += 1
    return ObjectLibrary(tuple(categories), instances, split)


def pick_library(split: str = "train", count: int | None = None, seed: int = 0) -> ObjectLibrary:
    if count is None:
        count = 60 if split == "train" else 200
    return build_library(PICK_CATEGORIES, count, split, seed)


def faucet_library(count: int = 20, seed: int = 0) -> ObjectLibrary:
    # lever polygons keep the pivot at the origin
    return build_library(FAUCET_CATEGORIES, count, "train", seed, centre=False)


def peg_library() -> ObjectLibrary:
    return ObjectLibrary(("peg",), [make_instance("peg", {"length": 0.10, "width": 0.025})], "train")


# ------------------------------------------------------------- complexity


@dataclass(frozen=True)
class ComplexityScore:
    shape_complexity: float
    grasp_difficulty: float


def turning_angles(verts: np.ndarray) -> np.ndarray:
    e_in = verts - np.roll(verts, 1, axis=0)
    e_out = np.roll(verts, -1, axis=0) - verts
    return np.arctan2(geo.cross2(e_in, e_out), np.einsum("ij,ij->i", e_in, e_out))


def shape_complexity(verts: np.ndarray, bins: int = 16) -> float:
    """Shannon entropy (bits) of the vertex turning-angle histogram over (-pi, pi]."""
    ang = turning_angles(verts)
    edges = np.linspace(-np.pi, np.pi, bins + 1)
    idx = np.clip(np.searchsorted(edges, ang, side="left") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(max(0.0, -(p * np.log2(p)).sum()))


def antipodal_qualities(
    verts: np.ndarray, samples: int = 256, mu: float = 0.5, max_width: float = 0.08, seed: int = 0
) -> np.ndarray:
    """Force-closure quality of ``samples`` antipodal pairs along the boundary.

    A pair starts at a boundary point, shoots along the inward normal and takes
    the first exit as the opposing contact. The angular term falls linearly
    from 1 (opposing normal aligned with the grasp line) to 0 at the
    friction-cone edge and is multiplied by the aperture margin
    ``1 - (width / max_width)**2``, so pairs wider than the gripper score 0.
    """
    rng = np.random.default_rng(seed)
    a, b = geo.edges(verts)
    seg = b - a
    lengths = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    t = rng.uniform(0.0, cum[-1], samples)
    k = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(seg) - 1)
    frac = (t - cum[k]) / np.where(lengths[k] > 0, lengths[k], 1.0)
    pts = a[k] + frac[:, None] * seg[k]
    inward = np.stack([-seg[k, 1], seg[k, 0]], -1) / lengths[k, None]  # CCW polygon: left normal points inside
    origins = pts + 1e-7 * inward
    dist = geo.ray_cast(origins, inward[:, None, :], np.broadcast_to(a, (samples,) + a.shape), np.broadcast_to(b, (samples,) + b.shape))[:, 0]
    hit = origins + dist[:, None] * inward
    # normal of the hit edge
    e = seg[None, :, :]
    w = a[None, :, :] - origins[:, None, :]
    d = inward[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        tt = geo.cross2(w, e) / geo.cross2(d, e)
    tt = np.where(np.isfinite(tt) & (tt > 0), tt, np.inf)
    j = np.argmin(tt, axis=1)
    n2 = np.stack([-seg[j, 1], seg[j, 0]], -1) / np.maximum(lengths[j, None], 1e-12)
    cos2 = np.clip(np.einsum("ij,ij->i", n2, -inward), -1.0, 1.0)
    angle = np.arccos(cos2)
    width = np.linalg.norm(hit - pts, axis=1)
    margin = np.clip(1.0 - (width / max_width) ** 2, 0.0, 1.0)
    quality = np.clip(1.0 - angle / np.arctan(mu), 0.0, 1.0) * margin
    quality = np.where(np.isfinite(dist), quality, 0.0)
    return quality


def score_complexity(inst: ObjectInstance | np.ndarray, samples: int = 256) -> ComplexityScore:
    verts = inst.vertices if isinstance(inst, ObjectInstance) else np.asarray(inst, dtype=float)
    if len(verts) < 3:
        raise Rma2Error("complexity needs a polygon with at least 3 vertices")
    q = antipodal_qualities(verts, samples)
    return ComplexityScore(shape_complexity(verts), float(1.0 - np.percentile(q, 75)))


def complexity_csv(library: ObjectLibrary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance_id", "category", "shape_complexity", "grasp_difficulty"])
    for i, inst in enumerate(library.instances):
        sc = score_complexity(inst)
        w.writerow([i, inst.category, f"{sc.shape_complexity:.6f}", f"{sc.grasp_difficulty:.6f}"])
    return buf.getvalue()
