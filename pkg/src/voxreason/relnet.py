"""Per-relation trainable scorers.

Each relation gets a small 3D CNN: three stride-2 conv layers (kernel 3,
hidden width 64, rectifier), global average pooling, and a linear head
squashed by a logistic, trained with cross-entropy on tuples harvested from
one-hop yes/no relational questions. Inputs are fixed-resolution occupancy
crops over the tuple's joint bounding box, one channel per tuple member.

The batched im2col convolution here is the production path; the naive
direct-loop kernels in kernels.py are the independent reference the tests
check it against.
"""

import json
import os
from dataclasses import dataclass, field as dfield
from typing import Optional

import numpy as np

from . import vxg
from .field import Adam, sigmoid
from .relations import (
    COMPARATIVE_BASE, COMPARATIVES, GeometricEvaluator, UNARY_RELATIONS,
)

HIDDEN = 64
CROP_RES = 16


class InsufficientDataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# batched conv (im2col via 27 strided slices)


def _cols(xp, ox, oy, oz, stride):
    """(B, Cin, 3,3,3, ox,oy,oz) patch tensor from the padded input."""
    B, Cin = xp.shape[:2]
    out = np.empty((B, Cin, 3, 3, 3, ox, oy, oz))
    for kx in range(3):
        for ky in range(3):
            for kz in range(3):
                out[:, :, kx, ky, kz] = xp[
                    :, :,
                    kx:kx + ox * stride:stride,
                    ky:ky + oy * stride:stride,
                    kz:kz + oz * stride:stride,
                ]
    return out


def conv3d_batch_forward(x, w, b, stride):
    """x (B,Cin,X,Y,Z), w (Cout,Cin,3,3,3) -> y (B,Cout,OX,OY,OZ); pad 1."""
    B, Cin, X, Y, Z = x.shape
    Cout = w.shape[0]
    ox = (X - 1) // stride + 1
    oy = (Y - 1) // stride + 1
    oz = (Z - 1) // stride + 1
    xp = np.zeros((B, Cin, X + 2, Y + 2, Z + 2))
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    cols = _cols(xp, ox, oy, oz, stride).reshape(B, Cin * 27, ox * oy * oz)
    y = np.matmul(w.reshape(Cout, -1), cols) + b[None, :, None]
    return y.reshape(B, Cout, ox, oy, oz)


def conv3d_batch_backward(x, w, dy, stride):
    """Gradients of conv3d_batch_forward -> (dx, dw, db)."""
    B, Cin, X, Y, Z = x.shape
    Cout = w.shape[0]
    ox, oy, oz = dy.shape[2:]
    xp = np.zeros((B, Cin, X + 2, Y + 2, Z + 2))
    xp[:, :, 1:-1, 1:-1, 1:-1] = x
    cols = _cols(xp, ox, oy, oz, stride).reshape(B, Cin * 27, ox * oy * oz)
    dy2 = dy.reshape(B, Cout, -1)
    db = dy2.sum(axis=(0, 2))
    dw = np.einsum("bop,bcp->oc", dy2, cols).reshape(w.shape)
    dcols = np.matmul(w.reshape(Cout, -1).T, dy2)  # (B, Cin*27, P)
    dcols = dcols.reshape(B, Cin, 3, 3, 3, ox, oy, oz)
    dxp = np.zeros_like(xp)
    for kx in range(3):
        for ky in range(3):
            for kz in range(3):
                dxp[
                    :, :,
                    kx:kx + ox * stride:stride,
                    ky:ky + oy * stride:stride,
                    kz:kz + oz * stride:stride,
                ] += dcols[:, :, kx, ky, kz]
    return dxp[:, :, 1:-1, 1:-1, 1:-1], dw, db


# ---------------------------------------------------------------------------
# network


@dataclass
class RelationNet:
    relation: str
    in_channels: int
    params: dict  # w1,b1,w2,b2,w3,b3,wl,bl
    seed: int = 0
    crop_res: int = CROP_RES
    metrics: dict = dfield(default_factory=dict)

    @staticmethod
    def init(relation, in_channels, seed=0, crop_res=CROP_RES):
        gen = np.random.default_rng(np.uint64(seed) ^ np.uint64(0x5E17AB1E))

        def conv_w(cout, cin):
            fan = cin * 27
            return gen.normal(0.0, np.sqrt(2.0 / fan), size=(cout, cin, 3, 3, 3))

        params = {
            "w1": conv_w(HIDDEN, in_channels), "b1": np.zeros(HIDDEN),
            "w2": conv_w(HIDDEN, HIDDEN), "b2": np.zeros(HIDDEN),
            "w3": conv_w(HIDDEN, HIDDEN), "b3": np.zeros(HIDDEN),
            "wl": gen.normal(0.0, np.sqrt(1.0 / HIDDEN), size=HIDDEN),
            "bl": np.zeros(1),
        }
        return RelationNet(relation, in_channels, params, seed, crop_res)

    def save(self, dirpath):
        os.makedirs(dirpath, exist_ok=True)
        flat = np.concatenate([self.params[k].ravel() for k in _PARAM_ORDER])
        vxg.write_vxg(os.path.join(dirpath, f"{_fname(self.relation)}.vxg"),
                      flat.reshape(-1, 1, 1, 1), 1.0, (0, 0, 0))
        manifest = {
            "relation": self.relation,
            "in_channels": self.in_channels,
            "hidden": HIDDEN,
            "crop_res": self.crop_res,
            "seed": self.seed,
            "metrics": self.metrics,
            "shapes": {k: list(self.params[k].shape) for k in _PARAM_ORDER},
        }
        with open(os.path.join(dirpath, f"{_fname(self.relation)}.json"), "w") as f:
            json.dump(manifest, f, indent=1)

    @staticmethod
    def load(dirpath, relation):
        with open(os.path.join(dirpath, f"{_fname(relation)}.json")) as f:
            manifest = json.load(f)
        flat, _, _ = vxg.read_vxg(os.path.join(dirpath, f"{_fname(relation)}.vxg"))
        flat = flat.ravel()
        params = {}
        at = 0
        for k in _PARAM_ORDER:
            shape = tuple(manifest["shapes"][k])
            n = int(np.prod(shape))
            params[k] = flat[at:at + n].reshape(shape)
            at += n
        net = RelationNet(relation, manifest["in_channels"], params,
                          manifest["seed"], manifest["crop_res"])
        net.metrics = manifest.get("metrics", {})
        return net


_PARAM_ORDER = ["w1", "b1", "w2", "b2", "w3", "b3", "wl", "bl"]


def _fname(relation):
    return relation.replace(" ", "_")


@dataclass
class TupleSample:
    """Occupancy crops of a tuple's members over their joint bounding box."""

    channels: np.ndarray  # (C, R, R, R) in [0, 1]
    label: Optional[int] = None


def crop_resample(instances, resolution=CROP_RES) -> TupleSample:
    """Fractional-coverage resampling of instance voxel cubes into R^3 crops.

    The joint axis-aligned bounding box (all members' voxel cubes) is
    expanded 10% per side; each member fills its own channel.
    """
    if any(getattr(v, "count", v.positions.shape[0]) == 0 for v in instances):
        raise ValueError("crop_resample needs non-empty instances")
    h2 = float(instances[0].voxel_size) / 2.0
    los = np.min([v.positions.min(axis=0) for v in instances], axis=0) - h2
    his = np.max([v.positions.max(axis=0) for v in instances], axis=0) + h2
    size = his - los
    los = los - 0.1 * size
    his = his + 0.1 * size
    R = resolution
    edges = [np.linspace(los[a], his[a], R + 1) for a in range(3)]
    cell = [(edges[a][1] - edges[a][0]) for a in range(3)]
    chans = np.zeros((len(instances), R, R, R))
    for ci, inst in enumerate(instances):
        pos = np.asarray(inst.positions)
        ov = []
        for a in range(3):
            lo_v = pos[:, a] - h2
            hi_v = pos[:, a] + h2
            left = np.maximum(edges[a][:-1][:, None], lo_v[None, :])
            right = np.minimum(edges[a][1:][:, None], hi_v[None, :])
            ov.append(np.clip(right - left, 0.0, None) / cell[a])
        chans[ci] = np.einsum("iv,jv,kv->ijk", ov[0], ov[1], ov[2])
    return TupleSample(np.clip(chans, 0.0, 1.0))


def _forward_cached(net, x):
    p = net.params
    a1 = conv3d_batch_forward(x, p["w1"], p["b1"], 2)
    r1 = np.maximum(a1, 0.0)
    a2 = conv3d_batch_forward(r1, p["w2"], p["b2"], 2)
    r2 = np.maximum(a2, 0.0)
    a3 = conv3d_batch_forward(r2, p["w3"], p["b3"], 2)
    r3 = np.maximum(a3, 0.0)
    gap = r3.mean(axis=(2, 3, 4))  # (B, HIDDEN)
    logit = gap @ p["wl"] + p["bl"][0]
    score = sigmoid(logit)
    return score, (x, a1, r1, a2, r2, a3, r3, gap, logit)


def forward(net: RelationNet, sample) -> float:
    """Score in (0, 1) of one TupleSample (or a (C,R,R,R) array)."""
    x = sample.channels if isinstance(sample, TupleSample) else np.asarray(sample)
    if x.shape[0] != net.in_channels:
        raise ValueError(f"net expects {net.in_channels} channels, got {x.shape[0]}")
    score, _ = _forward_cached(net, x[None])
    return float(score[0])


def forward_batch(net: RelationNet, x) -> np.ndarray:
    score, _ = _forward_cached(net, x)
    return score


def backward(net: RelationNet, sample, label):
    """Cross-entropy gradients for one sample -> (loss, grads dict)."""
    x = sample.channels if isinstance(sample, TupleSample) else np.asarray(sample)
    loss, grads = _backward_batch(net, x[None], np.array([label], dtype=np.float64))
    return loss, grads


def _backward_batch(net, x, labels):
    p = net.params
    score, cache = _forward_cached(net, x)
    x0, a1, r1, a2, r2, a3, r3, gap, logit = cache
    B = x.shape[0]
    eps = 1e-12
    loss = float(-np.mean(labels * np.log(score + eps) + (1 - labels) * np.log(1 - score + eps)))
    dlogit = (score - labels) / B  # (B,)
    dwl = gap.T @ dlogit
    dbl = np.array([dlogit.sum()])
    dgap = dlogit[:, None] * p["wl"][None, :]  # (B, HIDDEN)
    n_sp = r3.shape[2] * r3.shape[3] * r3.shape[4]
    dr3 = (dgap / n_sp)[:, :, None, None, None] * np.ones_like(r3)
    da3 = dr3 * (a3 > 0)
    dr2, dw3, db3 = conv3d_batch_backward(r2, p["w3"], da3, 2)
    da2 = dr2 * (a2 > 0)
    dr1, dw2, db2 = conv3d_batch_backward(r1, p["w2"], da2, 2)
    da1 = dr1 * (a1 > 0)
    _, dw1, db1 = conv3d_batch_backward(x0, p["w1"], da1, 2)
    grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2,
             "w3": dw3, "b3": db3, "wl": dwl, "bl": dbl}
    return loss, grads


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    val_fraction: float = 0.2
    betas: tuple = (0.9, 0.99)


def train_relation(relation, samples, labels, config: TrainConfig = None):
    """Train one relation net; returns (net, metrics)."""
    config = config or TrainConfig()
    labels = np.asarray(labels, dtype=np.float64)
    if len(samples) == 0 or labels.min() == labels.max():
        raise InsufficientDataError(f"insufficient data for relation {relation!r}")
    x = np.stack([s.channels if isinstance(s, TupleSample) else s for s in samples])
    gen = np.random.default_rng(np.uint64(config.seed) ^ np.uint64(0x7A41))
    order = gen.permutation(len(x))
    x, labels = x[order], labels[order]
    n_val = max(1, int(round(config.val_fraction * len(x))))
    xv, yv = x[:n_val], labels[:n_val]
    xt, yt = x[n_val:], labels[n_val:]
    if len(xt) == 0 or yt.min() == yt.max():
        raise InsufficientDataError(f"insufficient data for relation {relation!r}")
    net = RelationNet.init(relation, x.shape[1], seed=config.seed)
    opts = {k: Adam(net.params[k].shape, config.betas) for k in _PARAM_ORDER}
    losses = []
    for epoch in range(config.epochs):
        idx = gen.permutation(len(xt))
        for at in range(0, len(idx), config.batch_size):
            sel = idx[at:at + config.batch_size]
            loss, grads = _backward_batch(net, xt[sel], yt[sel])
            losses.append(loss)
            for k in _PARAM_ORDER:
                opts[k].step(net.params[k], grads[k], config.lr)

    def acc(xs, ys):
        if len(xs) == 0:
            return float("nan")
        s = forward_batch(net, xs)
        return float(np.mean((s > 0.5) == (ys > 0.5)))

    net.metrics = {
        "train_accuracy": acc(xt, yt),
        "val_accuracy": acc(xv, yv),
        "n_train": int(len(xt)),
        "n_val": int(len(xv)),
        "final_loss": losses[-1] if losses else float("nan"),
    }
    return net, net.metrics


def train_relations(tuples_by_relation, config: TrainConfig = None, strict=True):
    """Train a net per relation from {relation: (samples, labels)}.

    strict=False skips relations with insufficient data instead of raising.
    """
    out = {}
    skipped = {}
    for relation in sorted(tuples_by_relation):
        samples, labels = tuples_by_relation[relation]
        try:
            net, _ = train_relation(relation, samples, labels, config)
            out[relation] = net
        except InsufficientDataError as e:
            if strict:
                raise
            skipped[relation] = str(e)
    return out, skipped


# ---------------------------------------------------------------------------
# harvesting training tuples from one-hop yes/no questions


def build_tuple_dataset(records, envs, templates, crop_resolution=CROP_RES,
                        max_negative_ratio=3.0, seed=0):
    """Tuples + labels per relation from one-hop yes/no questions.

    A "yes" answer labels the single cross pair positive when both concepts
    have exactly one instance; a "no" answer labels every cross pair
    negative. Negatives are subsampled to max_negative_ratio x positives.
    """
    by_rel = {}
    for rec in records:
        if rec.template not in ("relation_exist", "relation_the"):
            continue
        _, bindings = templates.match_question(rec.question)
        env = envs[rec.scene_id]
        rel = bindings["r1"]
        a_list = env.get_instance(env.filter(bindings["c1"]))
        b_list = env.get_instance(env.filter(bindings["c2"]))
        if not a_list or not b_list:
            continue
        pairs = []
        if rec.answer == "yes":
            if len(a_list) == 1 and len(b_list) == 1:
                pairs = [(a_list[0], b_list[0], 1)]
        else:
            pairs = [(a, b, 0) for a in a_list for b in b_list]
        for a, b, label in pairs:
            by_rel.setdefault(rel, []).append((crop_resample((a, b), crop_resolution), label))
    gen = np.random.default_rng(np.uint64(seed) ^ np.uint64(0xBADA))
    out = {}
    for rel, items in sorted(by_rel.items()):
        pos = [s for s, l in items if l == 1]
        neg = [s for s, l in items if l == 0]
        cap = int(max(8, max_negative_ratio * len(pos)))
        if len(neg) > cap:
            sel = gen.choice(len(neg), size=cap, replace=False)
            neg = [neg[i] for i in sorted(sel)]
        samples = pos + neg
        labels = [1] * len(pos) + [0] * len(neg)
        out[rel] = (samples, labels)
    return out


# ---------------------------------------------------------------------------
# learned relation evaluator


class LearnedEvaluator:
    """Relation scorer backed by trained nets, geometric where unlearnable.

    Unary large/small and the size comparatives are always geometric (crops
    normalize absolute scale away); relations without a trained net fall
    back to geometry and are recorded in .fallbacks.
    """

    name = "learned"

    def __init__(self, nets, geometric: GeometricEvaluator, crop_resolution=CROP_RES):
        self.nets = dict(nets)
        self.geometric = geometric
        self.crop_resolution = crop_resolution
        self.fallbacks = set()
        self._cache = {}

    def _net_score(self, net, instances):
        sample = crop_resample(instances, self.crop_resolution)
        return float(forward(net, sample))

    def score(self, instances, relation) -> float:
        uids = tuple(getattr(v, "uid", None) for v in instances)
        key = (uids, relation) if None not in uids else None
        if key is not None and key in self._cache:
            return self._cache[key]
        out = self._score(instances, relation)
        if key is not None:
            self._cache[key] = out
        return out

    def _score(self, instances, relation):
        if any(getattr(v, "count", 1) == 0 for v in instances):
            return self.geometric.score(instances, relation)
        if relation in COMPARATIVES:
            base = COMPARATIVE_BASE[COMPARATIVES[relation]]
            if base is not None and base in self.nets:
                return self._net_score(self.nets[base], instances)
            self.fallbacks.add(relation)
            return self.geometric.score(instances, relation)
        if relation in UNARY_RELATIONS:
            return self.geometric.score(instances, relation)
        net = self.nets.get(relation)
        if net is None:
            self.fallbacks.add(relation)
            return self.geometric.score(instances, relation)
        return self._net_score(net, instances)
