"""Typed evaluator for reasoning programs over grounded 3D representations.

Programs are ASTs over the operator catalogue (filter, get_instance, query,
count, exist, the room and relation families, relation_more/most,
larger/smaller_than). Instances come from per-concept DBSCAN clustering
(eps in voxel units, L1 metric); relations are scored by a pluggable
evaluator. The same executor runs against a fitted SemanticField or, via a
scene-graph environment, against ground truth (see benchgen).
"""

from dataclasses import dataclass, field as dfield
from itertools import product
from typing import Optional

import numpy as np
from scipy import ndimage

from . import kernels
from .relations import (
    BINARY_RELATIONS, COMPARATIVES, TERNARY_RELATIONS, UNARY_RELATIONS,
    GeometricEvaluator, size_thresholds, take_uid,
)

EPS_DEFAULT = 1.5
MIN_SAMPLES_DEFAULT = 2


class ProgramTypeError(ValueError):
    pass


class ExecutionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# values


@dataclass
class VoxelSet:
    """Point set in voxel space with optional per-point concept indices."""

    indices: np.ndarray  # (N, 3) int64
    positions: np.ndarray  # (N, 3) world meters
    voxel_size: float
    dims: tuple
    concept_idx: Optional[np.ndarray] = None  # (N,)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.uid = take_uid()

    @property
    def count(self):
        return self.indices.shape[0]

    @property
    def lin(self):
        """Sorted linear voxel ids (cached) for set operations."""
        cached = getattr(self, "_lin", None)
        if cached is None:
            X, Y, Z = self.dims
            cached = np.sort((self.indices[:, 0] * Y + self.indices[:, 1]) * Z + self.indices[:, 2])
            self._lin = cached
        return cached

    def take(self, mask_or_idx):
        ci = self.concept_idx[mask_or_idx] if self.concept_idx is not None else None
        return VoxelSet(self.indices[mask_or_idx], self.positions[mask_or_idx],
                        self.voxel_size, self.dims, ci)


@dataclass
class Value:
    tag: str  # scene | voxel_set | voxel_set_list | integer | boolean |
    #           concept | relation_name | tuple_list
    value: object


# ---------------------------------------------------------------------------
# program AST

SCENE_SYMBOL = "SCENE"


@dataclass
class PNode:
    kind: str  # "op" | "str" | "int" | "scene"
    op: Optional[str] = None
    value: object = None
    args: list = dfield(default_factory=list)
    type_: Optional[str] = None
    pos: int = -1


@dataclass
class Program:
    root: PNode

    @property
    def return_type(self):
        return self.root.type_


# signature grammar: fixed prefix types, then optional variadic voxel args
# described by ("sets", lo, hi) or ("lists", lo, hi), then a trailing
# relation_name literal for the relation family.
OPERATOR_TABLE = {
    "filter": (("scene", "concept"), "voxel_set"),
    "get_instance": (("voxel_set",), "voxel_set_list"),
    "query": (("voxel_set",), "concept"),
    "count": (("voxel_set_list",), "integer"),
    "exist": (("voxel_set_list",), "boolean"),
    "get_room_instance": (("scene",), "voxel_set_list"),
    "filter_room": (("voxel_set_list", "voxel_set"), "voxel_set_list"),
    "count_room": (("voxel_set_list", "voxel_set"), "integer"),
    "exist_room": (("voxel_set_list", "voxel_set"), "boolean"),
    "relation": (("sets", 1, 3, "relation_name"), "boolean"),
    "filter_relation": (("lists", 2, 3, "relation_name"), "tuple_list"),
    "exist_relation": (("lists", 2, 3, "relation_name"), "boolean"),
    "count_relation": (("lists", 2, 3, "relation_name"), "integer"),
    "relation_more": (("relation_name", "voxel_set", "voxel_set", "voxel_set"), "voxel_set"),
    "relation_most": (("relation_name", "voxel_set", "voxel_set_list"), "voxel_set"),
    "larger_than": (("integer", "integer"), "boolean"),
    "smaller_than": (("integer", "integer"), "boolean"),
}


def _relation_set_arity(name: str) -> int:
    if name in TERNARY_RELATIONS:
        return 3
    if name in UNARY_RELATIONS:
        return 1
    if name in BINARY_RELATIONS:
        return 2
    raise ProgramTypeError(f"unknown relation name {name!r}")


def typecheck(node: PNode) -> str:
    """Annotate types bottom-up; raises ProgramTypeError naming the node."""
    if node.kind == "scene":
        node.type_ = "scene"
        return node.type_
    if node.kind == "int":
        node.type_ = "integer"
        return node.type_
    if node.kind == "str":
        # literal strings get their type from the consuming operator slot
        node.type_ = node.type_ or "string"
        return node.type_
    if node.op not in OPERATOR_TABLE:
        raise ProgramTypeError(f"unknown operator {node.op!r} at offset {node.pos}")
    sig, ret = OPERATOR_TABLE[node.op]
    args = node.args

    def fail(msg):
        raise ProgramTypeError(f"{node.op}: {msg} (at offset {node.pos})")

    if sig[0] in ("sets", "lists"):
        want = "voxel_set" if sig[0] == "sets" else "voxel_set_list"
        lo, hi = sig[1], sig[2]
        if not args or args[-1].kind != "str":
            fail("expects a relation-name literal as the last argument")
        rel = args[-1].value
        arity = _relation_set_arity(rel)
        if node.op != "relation" and arity == 1:
            fail(f"relation {rel!r} is unary and cannot be used here")
        nsets = len(args) - 1
        if nsets != arity:
            fail(f"relation {rel!r} takes {arity} arguments, got {nsets}")
        if not (lo <= nsets <= hi):
            fail(f"takes between {lo} and {hi} voxel arguments")
        for a in args[:-1]:
            if typecheck(a) != want:
                fail(f"argument must be {want}, got {a.type_}")
        args[-1].type_ = "relation_name"
    else:
        if len(args) != len(sig):
            fail(f"takes {len(sig)} arguments, got {len(args)}")
        for a, want in zip(args, sig):
            if want in ("concept", "relation_name"):
                if a.kind != "str":
                    fail(f"expects a string literal for {want}")
                if want == "relation_name":
                    name = a.value
                    if node.op in ("relation_more", "relation_most"):
                        if name not in COMPARATIVES:
                            fail(f"{name!r} is not a comparative relation")
                    elif name not in COMPARATIVES:
                        _relation_set_arity(name)
                a.type_ = want
            else:
                got = typecheck(a)
                if got != want:
                    fail(f"argument must be {want}, got {got}")
    node.type_ = ret
    return ret


def clone_with_literals(node: PNode, sub: dict) -> PNode:
    """Copy a tree, replacing string-literal values via sub (types kept)."""
    if node.kind == "str":
        return PNode("str", value=sub.get(node.value, node.value),
                     type_=node.type_, pos=node.pos)
    if node.kind != "op":
        return PNode(node.kind, op=node.op, value=node.value, type_=node.type_, pos=node.pos)
    return PNode("op", op=node.op,
                 args=[clone_with_literals(a, sub) for a in node.args],
                 type_=node.type_, pos=node.pos)


def program_hops(node: PNode) -> int:
    """Number of relation operators in the AST."""
    n = 1 if node.kind == "op" and node.op in (
        "relation", "filter_relation", "exist_relation", "count_relation",
        "relation_more", "relation_most",
    ) else 0
    return n + sum(program_hops(a) for a in node.args)


# ---------------------------------------------------------------------------
# DBSCAN


def _integral_neighbors(pts, eps):
    """Exact L1 neighbor CSR for integer-valued points via offset lookup."""
    ipts = np.rint(pts).astype(np.int64)
    r = int(np.floor(eps))
    offs = [
        (dx, dy, dz)
        for dx in range(-r, r + 1)
        for dy in range(-r, r + 1)
        for dz in range(-r, r + 1)
        if 0 < abs(dx) + abs(dy) + abs(dz) <= eps
    ]
    span = ipts.max(axis=0) - ipts.min(axis=0) + 2 * r + 3 if len(ipts) else np.ones(3, dtype=np.int64)
    base = ipts - ipts.min(axis=0) + r + 1 if len(ipts) else ipts
    key = (base[:, 0] * span[1] + base[:, 1]) * span[2] + base[:, 2]
    order = np.argsort(key, kind="stable")
    skey = key[order]
    rows = [[] for _ in range(len(pts))]
    for dx, dy, dz in offs:
        dk = (dx * span[1] + dy) * span[2] + dz
        target = key + dk
        pos = np.searchsorted(skey, target)
        ok = (pos < len(skey)) & (skey[np.minimum(pos, len(skey) - 1)] == target)
        for i in np.nonzero(ok)[0]:
            rows[i].append(order[pos[i]])
    indptr = np.zeros(len(pts) + 1, dtype=np.int64)
    for i, row in enumerate(rows):
        indptr[i + 1] = indptr[i] + len(row)
    indices = np.array([j for row in rows for j in row], dtype=np.int64)
    return indptr, indices


def dbscan(points, eps=EPS_DEFAULT, min_samples=MIN_SAMPLES_DEFAULT):
    """DBSCAN with L1 metric; returns labels (noise = -1).

    Canonicalized: border points join the lowest-indexed claiming cluster
    and labels are renumbered by first occurrence, so relabeling does not
    depend on visit order.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    if n > 64 and np.allclose(pts, np.rint(pts)):
        indptr, indices = _integral_neighbors(pts, eps)
    else:
        indptr, indices = kernels.l1_neighbors(np.ascontiguousarray(pts), float(eps))
    ncount = indptr[1:] - indptr[:-1]
    core = (ncount + 1) >= min_samples  # the point itself counts
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = cluster
        stack = [i]
        while stack:
            p = stack.pop()
            for q in indices[indptr[p]:indptr[p + 1]]:
                if core[q] and labels[q] == -1:
                    labels[q] = cluster
                    stack.append(q)
        cluster += 1
    # border points: lowest-indexed claiming cluster
    for i in range(n):
        if core[i] or labels[i] != -1:
            continue
        claims = [labels[q] for q in indices[indptr[i]:indptr[i + 1]] if core[q]]
        if claims:
            labels[i] = min(claims)
    # renumber by first occurrence
    remap = {}
    out = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if labels[i] == -1:
            continue
        if labels[i] not in remap:
            remap[labels[i]] = len(remap)
        out[i] = remap[labels[i]]
    return out


# ---------------------------------------------------------------------------
# environments


class FieldEnv:
    """Execution environment over a grounded SemanticField."""

    def __init__(self, field, evaluator=None, eps=EPS_DEFAULT, min_samples=MIN_SAMPLES_DEFAULT):
        self.field = field
        self.eps = eps
        self.min_samples = min_samples
        self._instances_all = None
        if evaluator is None:
            evaluator = GeometricEvaluator(
                float(np.linalg.norm(np.array(field.dims) * field.voxel_size)), 0.0, 0.0
            )
            lo, hi = size_thresholds([inst.count for inst in self.all_instances()])
            evaluator.size_lo, evaluator.size_hi = lo, hi
        self.evaluator = evaluator

    def scene_set(self) -> VoxelSet:
        f = self.field
        return VoxelSet(f.indices, f.positions, f.voxel_size, f.dims, f.concept_idx)

    def filter(self, concept: str) -> VoxelSet:
        f = self.field
        if concept not in f.vocab:
            return VoxelSet(np.zeros((0, 3)), np.zeros((0, 3)), f.voxel_size, f.dims,
                            np.zeros(0, dtype=np.int64))
        mask = f.concept_idx == f.vocab.index(concept)
        return VoxelSet(f.indices[mask], f.positions[mask], f.voxel_size, f.dims,
                        f.concept_idx[mask])

    def get_instance(self, vs: VoxelSet):
        """Cluster per concept (vocabulary order), drop noise, concatenate."""
        if vs.count == 0:
            return []
        if vs.concept_idx is None:
            groups = [np.arange(vs.count)]
        else:
            groups = []
            for ci in np.unique(vs.concept_idx):
                groups.append(np.nonzero(vs.concept_idx == ci)[0])
        out = []
        for sel in groups:
            labels = dbscan(vs.indices[sel].astype(np.float64), self.eps, self.min_samples)
            for lab in range(labels.max() + 1 if labels.size else 0):
                member = sel[labels == lab]
                out.append(vs.take(member))
        return out

    def all_instances(self):
        if self._instances_all is None:
            self._instances_all = self.get_instance(self.scene_set())
        return self._instances_all

    def rooms(self):
        """Flood-fill rooms from the 2D projection of wall-labelled voxels."""
        f = self.field
        X, Y, Z = f.dims
        wall_cells = np.zeros((X, Y), dtype=bool)
        if "wall" in f.vocab:
            wi = f.vocab.index("wall")
            wmask = f.concept_idx == wi
            wall_cells[f.indices[wmask, 0], f.indices[wmask, 1]] = True
        if not wall_cells.any():
            idx = np.argwhere(np.ones((X, Y), dtype=bool))
            return [self._column_set(idx)]
        free = ~wall_cells
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        labels, nlab = ndimage.label(free, structure=structure)
        rooms = []
        for lab in range(1, nlab + 1):
            cells = np.argwhere(labels == lab)
            touches_border = (
                (cells[:, 0] == 0).any() or (cells[:, 0] == X - 1).any()
                or (cells[:, 1] == 0).any() or (cells[:, 1] == Y - 1).any()
            )
            if touches_border and cells.shape[0] < 4:
                continue
            rooms.append(self._column_set(cells))
        return rooms

    def _column_set(self, cells):
        f = self.field
        Z = f.dims[2]
        nx = cells.shape[0]
        idx = np.empty((nx * Z, 3), dtype=np.int64)
        idx[:, 0] = np.repeat(cells[:, 0], Z)
        idx[:, 1] = np.repeat(cells[:, 1], Z)
        idx[:, 2] = np.tile(np.arange(Z), nx)
        pos = np.asarray(f.origin)[None, :] + (idx + 0.5) * f.voxel_size
        return VoxelSet(idx, pos, f.voxel_size, f.dims)

    def concept_name(self, concept_index: int) -> str:
        return self.field.vocab.concepts[int(concept_index)]


# ---------------------------------------------------------------------------
# execution


def _intersects(a: VoxelSet, b: VoxelSet) -> bool:
    if a.count == 0 or b.count == 0:
        return False
    return np.intersect1d(a.lin, b.lin, assume_unique=False).size > 0


def execute(program, env, literals=None) -> Value:
    """Evaluate a typed program bottom-up; returns the root Value.

    literals optionally remaps string-literal values at evaluation time
    (used to run pre-typed template skeletons without copying the AST).
    """
    root = program.root if isinstance(program, Program) else program
    if root.type_ is None:
        typecheck(root)
    return _eval(root, env, literals)


def _eval(node: PNode, env, literals=None) -> Value:
    if node.kind == "scene":
        return Value("scene", env)
    if node.kind == "int":
        return Value("integer", int(node.value))
    if node.kind == "str":
        v = node.value
        if literals is not None:
            v = literals.get(v, v)
        return Value(node.type_ if node.type_ != "string" else "concept", v)
    args = [_eval(a, env, literals) for a in node.args]
    fn = _OPS[node.op]
    return fn(env, args)


def _op_filter(env, args):
    return Value("voxel_set", env.filter(args[1].value))


def _op_get_instance(env, args):
    return Value("voxel_set_list", env.get_instance(args[0].value))


def _op_query(env, args):
    vs = args[0].value
    if vs.count == 0:
        raise ExecutionError("query of an empty instance")
    if vs.concept_idx is None:
        raise ExecutionError("query of a set without concept labels")
    counts = np.bincount(vs.concept_idx)
    return Value("concept", env.concept_name(int(np.argmax(counts))))


def _op_count(env, args):
    return Value("integer", len(args[0].value))


def _op_exist(env, args):
    return Value("boolean", len(args[0].value) > 0)


def _op_get_room_instance(env, args):
    return Value("voxel_set_list", env.rooms())


def _filter_rooms(env, rooms, vs):
    return [r for r in rooms if env.room_intersects(r, vs)] if hasattr(env, "room_intersects") \
        else [r for r in rooms if _intersects(r, vs)]


def _op_filter_room(env, args):
    return Value("voxel_set_list", _filter_rooms(env, args[0].value, args[1].value))


def _op_count_room(env, args):
    return Value("integer", len(_filter_rooms(env, args[0].value, args[1].value)))


def _op_exist_room(env, args):
    return Value("boolean", len(_filter_rooms(env, args[0].value, args[1].value)) > 0)


def _op_relation(env, args):
    rel = args[-1].value
    sets = tuple(a.value for a in args[:-1])
    return Value("boolean", env.evaluator.score(sets, rel) > 0.5)


def _relation_tuples(env, args):
    rel = args[-1].value
    lists = [a.value for a in args[:-1]]
    out = []
    for tup in product(*lists):
        if len({id(t) for t in tup}) != len(tup):
            continue
        if env.evaluator.score(tup, rel) > 0.5:
            out.append(tup)
    return out


def _op_filter_relation(env, args):
    return Value("tuple_list", _relation_tuples(env, args))


def _op_exist_relation(env, args):
    return Value("boolean", len(_relation_tuples(env, args)) > 0)


def _op_count_relation(env, args):
    return Value("integer", len(_relation_tuples(env, args)))


def _op_relation_more(env, args):
    rel = args[0].value
    anchor, ca, cb = args[1].value, args[2].value, args[3].value
    sa = env.evaluator.score((ca, anchor), rel)
    sb = env.evaluator.score((cb, anchor), rel)
    return Value("voxel_set", cb if sb > sa else ca)


def _op_relation_most(env, args):
    rel = args[0].value
    anchor = args[1].value
    cands = args[2].value
    if not cands:
        raise ExecutionError("relation_most over an empty candidate list")
    scores = [env.evaluator.score((c, anchor), rel) for c in cands]
    return Value("voxel_set", cands[int(np.argmax(scores))])


def _op_larger_than(env, args):
    return Value("boolean", args[0].value > args[1].value)


def _op_smaller_than(env, args):
    return Value("boolean", args[0].value < args[1].value)


_OPS = {
    "filter": _op_filter,
    "get_instance": _op_get_instance,
    "query": _op_query,
    "count": _op_count,
    "exist": _op_exist,
    "get_room_instance": _op_get_room_instance,
    "filter_room": _op_filter_room,
    "count_room": _op_count_room,
    "exist_room": _op_exist_room,
    "relation": _op_relation,
    "filter_relation": _op_filter_relation,
    "exist_relation": _op_exist_relation,
    "count_relation": _op_count_relation,
    "relation_more": _op_relation_more,
    "relation_most": _op_relation_most,
    "larger_than": _op_larger_than,
    "smaller_than": _op_smaller_than,
}


def answer_string(value: Value) -> str:
    """Single-word answer form of a root value."""
    if value.tag == "boolean":
        return "yes" if value.value else "no"
    if value.tag == "integer":
        return str(value.value)
    if value.tag == "concept":
        return value.value
    raise ExecutionError(f"value of type {value.tag} is not an answer")
