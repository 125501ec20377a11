"""Geometric relation predicates and the pluggable relation evaluator.

The 11-relation vocabulary: inside, above, below, on the top of, close,
far, large, small, between, on the left, on the right. Predicates are
defined over voxel point sets (indices + world positions) so the scene
graph oracle and the executor evaluate relations over identical inputs.

Plain relation names score {0, 1}; comparative/superlative names score
continuously (monotone in the compared quantity) so Relation_More/Most can
rank candidates. large/small are unary, thresholded against the scene's
25th/75th size percentiles carried by the evaluator.
"""

import itertools
from dataclasses import dataclass

import numpy as np

_uid_counter = itertools.count()


def take_uid() -> int:
    """Process-unique id for instance sets (stable cache keys)."""
    return next(_uid_counter)

RELATIONS = [
    "inside", "above", "below", "on the top of", "close", "far",
    "large", "small", "between", "on the left", "on the right",
]
BINARY_RELATIONS = [
    "inside", "above", "below", "on the top of", "close", "far",
    "on the left", "on the right",
]
UNARY_RELATIONS = ["large", "small"]
TERNARY_RELATIONS = ["between"]

# comparative / superlative surface names -> scoring key
COMPARATIVES = {
    "closer": "closer", "closest": "closer",
    "farther": "farther", "farthest": "farther",
    "more left": "more left", "leftmost": "more left",
    "more right": "more right", "rightmost": "more right",
    "higher": "higher", "highest": "higher",
    "lower": "lower", "lowest": "lower",
    "larger": "larger", "largest": "larger",
    "smaller": "smaller", "smallest": "smaller",
}
# comparative -> base relation (for learned scoring); size comparatives have
# no learnable base (crops normalize scale away) and stay geometric.
COMPARATIVE_BASE = {
    "closer": "close", "farther": "far",
    "more left": "on the left", "more right": "on the right",
    "higher": "above", "lower": "below",
    "larger": None, "smaller": None,
}

ABOVE_MIN_DZ = 0.1
ON_TOP_MAX_GAP = 0.05
CLOSE_FRAC = 0.15
FAR_FRAC = 0.5
BETWEEN_FRAC = 0.1
LEFT_MIN_DX = 0.1
INSIDE_MIN_FRAC = 0.9

_FOOTPRINT_STRIDE = 1 << 21


@dataclass
class InstanceStats:
    count: int
    centroid: np.ndarray
    lo: np.ndarray  # voxel-cube bbox
    hi: np.ndarray
    footprint: np.ndarray  # sorted linearized (ix, iy) cells
    positions: np.ndarray


def stats_of(vs) -> InstanceStats:
    """Geometric statistics of a voxel set (cached on the object)."""
    cached = getattr(vs, "_stats", None)
    if cached is not None:
        return cached
    pos = np.asarray(vs.positions, dtype=np.float64)
    idx = np.asarray(vs.indices)
    h = float(vs.voxel_size)
    if pos.shape[0] == 0:
        st = InstanceStats(0, np.zeros(3), np.zeros(3), np.zeros(3),
                           np.zeros(0, dtype=np.int64), pos)
    else:
        lin = idx[:, 0].astype(np.int64) * _FOOTPRINT_STRIDE + idx[:, 1]
        st = InstanceStats(
            count=int(pos.shape[0]),
            centroid=pos.mean(axis=0),
            lo=pos.min(axis=0) - h / 2,
            hi=pos.max(axis=0) + h / 2,
            footprint=np.unique(lin),
            positions=pos,
        )
    try:
        vs._stats = st
    except AttributeError:
        pass
    return st


def footprint_iou(a: InstanceStats, b: InstanceStats) -> float:
    if a.count == 0 or b.count == 0:
        return 0.0
    inter = np.intersect1d(a.footprint, b.footprint, assume_unique=True).size
    union = a.footprint.size + b.footprint.size - inter
    return inter / union if union else 0.0


def is_above(a: InstanceStats, b: InstanceStats) -> bool:
    if a.count == 0 or b.count == 0:
        return False
    return (a.centroid[2] - b.centroid[2] > ABOVE_MIN_DZ) and footprint_iou(a, b) > 0


def is_on_top(a: InstanceStats, b: InstanceStats) -> bool:
    return is_above(a, b) and (a.lo[2] - b.hi[2]) <= ON_TOP_MAX_GAP


def is_inside(a: InstanceStats, b: InstanceStats) -> bool:
    if a.count == 0 or b.count == 0:
        return False
    within = np.all((a.positions >= b.lo) & (a.positions <= b.hi), axis=1)
    return within.mean() >= INSIDE_MIN_FRAC


def is_left(a: InstanceStats, b: InstanceStats) -> bool:
    if a.count == 0 or b.count == 0:
        return False
    return b.centroid[0] - a.centroid[0] > LEFT_MIN_DX


def is_between(c: InstanceStats, a: InstanceStats, b: InstanceStats) -> bool:
    if min(c.count, a.count, b.count) == 0:
        return False
    ab = b.centroid - a.centroid
    norm = np.linalg.norm(ab)
    if norm == 0:
        return False
    t = np.clip(np.dot(c.centroid - a.centroid, ab) / (norm * norm), 0.0, 1.0)
    d = np.linalg.norm(c.centroid - (a.centroid + t * ab))
    return d <= BETWEEN_FRAC * norm


def size_thresholds(counts):
    """(25th, 75th) percentile of instance voxel counts."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        return 0.0, 0.0
    return float(np.percentile(counts, 25)), float(np.percentile(counts, 75))


def _logistic(t):
    if t >= 0:
        return 1.0 / (1.0 + np.exp(-t))
    e = np.exp(t)
    return e / (1.0 + e)


class GeometricEvaluator:
    """Relation scorer from geometry alone.

    diag: scene diagonal in meters (close/far thresholds); size_lo/hi:
    25th/75th percentile instance voxel counts (large/small thresholds).
    """

    name = "geometric"

    def __init__(self, diag, size_lo=0.0, size_hi=0.0):
        self.diag = float(diag)
        self.size_lo = float(size_lo)
        self.size_hi = float(size_hi)
        self._cache = {}

    def score(self, instances, relation) -> float:
        uids = tuple(getattr(v, "uid", None) for v in instances)
        key = (uids, relation) if None not in uids else None
        if key is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        st = tuple(stats_of(v) for v in instances)
        if relation in COMPARATIVES:
            out = float(self._comparative(COMPARATIVES[relation], st))
        else:
            out = 1.0 if self._predicate(relation, st) else 0.0
        if key is not None and len(self._cache) < 1_000_000:
            self._cache[key] = out
        return out

    def _predicate(self, relation, st):
        if relation == "above":
            self._need(st, 2, relation)
            return is_above(st[0], st[1])
        if relation == "below":
            self._need(st, 2, relation)
            return is_above(st[1], st[0])
        if relation == "on the top of":
            self._need(st, 2, relation)
            return is_on_top(st[0], st[1])
        if relation == "inside":
            self._need(st, 2, relation)
            return is_inside(st[0], st[1])
        if relation == "close":
            self._need(st, 2, relation)
            if st[0].count == 0 or st[1].count == 0:
                return False
            return np.linalg.norm(st[0].centroid - st[1].centroid) <= CLOSE_FRAC * self.diag
        if relation == "far":
            self._need(st, 2, relation)
            if st[0].count == 0 or st[1].count == 0:
                return False
            return np.linalg.norm(st[0].centroid - st[1].centroid) >= FAR_FRAC * self.diag
        if relation == "on the left":
            self._need(st, 2, relation)
            return is_left(st[0], st[1])
        if relation == "on the right":
            self._need(st, 2, relation)
            return is_left(st[1], st[0])
        if relation == "between":
            self._need(st, 3, relation)
            return is_between(st[0], st[1], st[2])
        if relation == "large":
            self._need(st, 1, relation)
            return st[0].count > self.size_hi
        if relation == "small":
            self._need(st, 1, relation)
            return st[0].count < self.size_lo
        raise ValueError(f"unknown relation {relation!r}")

    def _comparative(self, key, st):
        """Continuous score of (candidate, anchor); higher = more so."""
        if len(st) != 2:
            raise ValueError(f"comparative {key!r} scores (candidate, anchor) pairs")
        cand, anchor = st
        if cand.count == 0 or anchor.count == 0:
            return 0.0
        if key == "closer":
            return 1.0 / (1.0 + np.linalg.norm(cand.centroid - anchor.centroid))
        if key == "farther":
            d = np.linalg.norm(cand.centroid - anchor.centroid)
            return d / (1.0 + d)
        if key == "more left":
            return _logistic(anchor.centroid[0] - cand.centroid[0])
        if key == "more right":
            return _logistic(cand.centroid[0] - anchor.centroid[0])
        if key == "higher":
            return _logistic(cand.centroid[2] - anchor.centroid[2])
        if key == "lower":
            return _logistic(anchor.centroid[2] - cand.centroid[2])
        if key == "larger":
            return _logistic(np.log(cand.count / anchor.count))
        if key == "smaller":
            return _logistic(np.log(anchor.count / cand.count))
        raise ValueError(f"unknown comparative {key!r}")

    @staticmethod
    def _need(st, arity, relation):
        if len(st) != arity:
            raise ValueError(f"relation {relation!r} takes {arity} instances, got {len(st)}")


def relation_arity(relation: str) -> int:
    if relation in TERNARY_RELATIONS:
        return 3
    if relation in UNARY_RELATIONS:
        return 1
    if relation in BINARY_RELATIONS:
        return 2
    if relation in COMPARATIVES:
        return 2
    raise ValueError(f"unknown relation {relation!r}")
