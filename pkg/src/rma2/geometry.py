"""Vectorized planar geometry: transforms, ray casting, line/polygon chords.

Polygons are stored as ``(B, V, 2)`` vertex arrays. Shorter polygons are padded
by repeating their last vertex, which yields zero-length edges that never
intersect anything, so padded and unpadded polygons behave identically.
"""

from __future__ import annotations

import numpy as np


def rotation(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def to_world(local: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """Map ``(B, V, 2)`` local points through ``(B, 3)`` poses ``(x, y, theta)``."""
    rot = rotation(pose[:, 2])
    return np.einsum("bij,bvj->bvi", rot, local) + pose[:, None, :2]


def to_local(points: np.ndarray, pose: np.ndarray) -> np.ndarray:
    rot = rotation(pose[:, 2])
    return np.einsum("bji,bvj->bvi", rot, points - pose[:, None, :2])


def edges(verts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return verts, np.roll(verts, -1, axis=-2)


def pad_polygon(verts: np.ndarray, size: int) -> np.ndarray:
    verts = np.asarray(verts, dtype=float)
    if len(verts) > size:
        raise ValueError(f"polygon with {len(verts)} vertices exceeds pad size {size}")
    tail = np.repeat(verts[-1:], size - len(verts), axis=0)
    return np.concatenate([verts, tail], axis=0)


def cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def ray_cast(origins: np.ndarray, dirs: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> np.ndarray:
    """Distance along each ray to the nearest segment hit, ``inf`` when none.

    Shapes: origins ``(B, 2)``, dirs ``(B, R, 2)`` unit vectors, segments
    ``(B, S, 2)``. Returns ``(B, R)``.
    """
    e = (seg_b - seg_a)[:, None, :, :]  # B,1,S,2
    w = (seg_a - origins[:, None, :])[:, None, :, :]  # B,1,S,2
    d = dirs[:, :, None, :]  # B,R,1,2
    denom = cross2(d, e)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross2(w, e) / denom
        u = cross2(w, d) / denom
    hit = (np.abs(denom) > 1e-12) & (t > 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(hit, t, np.inf)
    return t.min(axis=-1)


def line_crossings(point: np.ndarray, axis: np.ndarray, verts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Where the line ``point + s * axis`` crosses each polygon edge.

    Returns ``(s, cos)`` of shape ``(B, V)``: the line coordinate of the crossing
    (NaN for edges the line misses) and ``|axis . edge_normal|`` at that edge.
    """
    a, b = edges(verts)
    normal = np.stack([-axis[:, 1], axis[:, 0]], -1)  # perpendicular to the line
    da = np.einsum("bvi,bi->bv", a - point[:, None, :], normal)
    db = np.einsum("bvi,bi->bv", b - point[:, None, :], normal)
    crosses = (da > 0) != (db > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = da / (da - db)
        at = a + frac[..., None] * (b - a)
    s = np.einsum("bvi,bi->bv", at - point[:, None, :], axis)
    s = np.where(crosses, s, np.nan)
    e = b - a
    elen = np.linalg.norm(e, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.abs(cross2(e, axis[:, None, :])) / elen
    cos = np.where(crosses, cos, np.nan)
    return s, cos


def point_in_polygon(pts: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd test. ``pts`` ``(B, P, 2)``, ``verts`` ``(B, V, 2)`` -> ``(B, P)``."""
    a, b = edges(verts)
    ax, ay = a[:, None, :, 0], a[:, None, :, 1]
    bx, by = b[:, None, :, 0], b[:, None, :, 1]
    px, py = pts[:, :, None, 0], pts[:, :, None, 1]
    straddle = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
    hits = straddle & (px < xint)
    return (np.count_nonzero(hits, axis=-1) % 2) == 1


def polygon_area_centroid(verts: np.ndarray) -> tuple[float, np.ndarray]:
    """Signed area and centroid of a single ``(V, 2)`` polygon."""
    x, y = verts[:, 0], verts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    c = x * yn - xn * y
    area = 0.5 * c.sum()
    cx = ((x + xn) * c).sum() / (6 * area)
    cy = ((y + yn) * c).sum() / (6 * area)
    return float(area), np.array([cx, cy])


def segments_intersect(p1, p2, q1, q2) -> bool:
    d1 = cross2(q2 - q1, p1 - q1)
    d2 = cross2(q2 - q1, p2 - q1)
    d3 = cross2(p2 - p1, q1 - p1)
    d4 = cross2(p2 - p1, q2 - p1)
    return bool((d1 * d2 < 0) and (d3 * d4 < 0))


def is_simple(verts: np.ndarray) -> bool:
    n = len(verts)
    for i in range(n):
        for j in range(i + 1, n):
            if abs(i - j) <= 1 or (i == 0 and j == n - 1):
                continue
            if segments_intersect(verts[i], verts[(i + 1) % n], verts[j], verts[(j + 1) % n]):
                return False
    return True
