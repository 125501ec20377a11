"""Axis-aligned boxes, object shapes, and ray/box intersection."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in world meters."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))

    @property
    def size(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def center(self):
        return tuple(0.5 * (l + h) for l, h in zip(self.lo, self.hi))

    @property
    def volume(self):
        s = self.size
        return max(s[0], 0.0) * max(s[1], 0.0) * max(s[2], 0.0)

    def contains_box(self, other: "Box", tol: float = 1e-9) -> bool:
        return all(other.lo[a] >= self.lo[a] - tol and other.hi[a] <= self.hi[a] + tol for a in range(3))

    def contains_points(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def overlap_volume(self, other: "Box") -> float:
        v = 1.0
        for a in range(3):
            d = min(self.hi[a], other.hi[a]) - max(self.lo[a], other.lo[a])
            if d <= 0:
                return 0.0
            v *= d
        return v

    def expanded(self, margin: float) -> "Box":
        return Box(tuple(l - margin for l in self.lo), tuple(h + margin for h in self.hi))

    def to_json(self):
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @staticmethod
    def from_json(d):
        return Box(tuple(d["lo"]), tuple(d["hi"]))


def _to_local(pts, position, yaw_deg):
    """World points -> object-local frame (rotate by -yaw about z through position)."""
    p = np.asarray(pts, dtype=np.float64) - np.asarray(position)
    ang = -np.deg2rad(yaw_deg)
    c, s = np.cos(ang), np.sin(ang)
    out = p.copy()
    out[..., 0] = c * p[..., 0] - s * p[..., 1]
    out[..., 1] = s * p[..., 0] + c * p[..., 1]
    return out


def points_in_shape(pts, shape, position, yaw_deg, size, parts=None):
    """Membership mask of world points in an object's shape.

    shape: "box", "cylinder", or "composite" (list of (offset, extents) box
    parts in the local frame). size is the overall extent triple.
    """
    local = _to_local(pts, position, yaw_deg)
    ex, ey, ez = size
    if shape == "box":
        return (
            (np.abs(local[..., 0]) <= ex / 2)
            & (np.abs(local[..., 1]) <= ey / 2)
            & (np.abs(local[..., 2]) <= ez / 2)
        )
    if shape == "cylinder":
        r = min(ex, ey) / 2
        return (local[..., 0] ** 2 + local[..., 1] ** 2 <= r * r) & (
            np.abs(local[..., 2]) <= ez / 2
        )
    if shape == "composite":
        mask = np.zeros(local.shape[:-1], dtype=bool)
        for off, ext in parts:
            q = local - np.asarray(off)
            mask |= (
                (np.abs(q[..., 0]) <= ext[0] / 2)
                & (np.abs(q[..., 1]) <= ext[1] / 2)
                & (np.abs(q[..., 2]) <= ext[2] / 2)
            )
        return mask
    raise ValueError(f"unknown shape {shape!r}")


def shape_world_bbox(shape, position, yaw_deg, size, parts=None) -> Box:
    """Axis-aligned world bounding box of a (possibly yawed) shape."""
    ang = np.deg2rad(yaw_deg)
    c, s = np.cos(ang), np.sin(ang)

    def rot(v):
        return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])

    corners = []
    if shape == "composite" and parts:
        boxes = [(np.asarray(off), np.asarray(ext)) for off, ext in parts]
    else:
        boxes = [(np.zeros(3), np.asarray(size, dtype=float))]
    for off, ext in boxes:
        for sx in (-0.5, 0.5):
            for sy in (-0.5, 0.5):
                for sz in (-0.5, 0.5):
                    local = off + np.array([sx * ext[0], sy * ext[1], sz * ext[2]])
                    corners.append(rot(local))
    corners = np.asarray(corners) + np.asarray(position)
    return Box(tuple(corners.min(axis=0)), tuple(corners.max(axis=0)))


def ray_box_intersect(origin, direction, box_lo, box_hi):
    """Slab test -> (t_near, t_far); miss encoded as (0.0, -1.0)."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    t0, t1 = 0.0, np.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < box_lo[a] or o[a] > box_hi[a]:
                return 0.0, -1.0
            continue
        ta = (box_lo[a] - o[a]) / d[a]
        tb = (box_hi[a] - o[a]) / d[a]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if t1 <= t0:
        return 0.0, -1.0
    return t0, t1


def ray_box_intersect_batch(origins, dirs, box_lo, box_hi):
    """Vectorized slab test -> (t0 (R,), t1 (R,)); misses get (0, -1)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo[None, :] - o) / d
        tb = (hi[None, :] - o) / d
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    par = d == 0.0
    inside_slab = (o >= lo[None, :]) & (o <= hi[None, :])
    tmin[par] = -np.inf
    tmax[par] = np.inf
    tmin[par & ~inside_slab] = np.inf
    tmax[par & ~inside_slab] = -np.inf
    t0 = np.maximum(tmin.max(axis=1), 0.0)
    t1 = tmax.min(axis=1)
    miss = ~(t1 > t0)
    t0[miss] = 0.0
    t1[miss] = -1.0
    return t0, t1
