"""Differentiable voxel fields and their fitting.

A FieldModel holds raw density (softplus-activated so sigma >= 0), raw
color (logistic-activated into [0,1]) and a feature grid. Photometric
fitting minimizes mean squared pixel error over random ray batches with an
adaptive-moment optimizer; feature fitting then freezes density/color and
minimizes the rendering-weighted L1 alignment loss against per-pixel
teacher features.
"""

import json
import os
from dataclasses import dataclass, field as dfield, replace

import numpy as np

from . import kernels, render, rng, vxg


class FitDivergence(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-12))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-9, 1 - 1e-9)
    return np.log(p) - np.log1p(-p)


@dataclass
class VoxelGrid:
    """Dense grid of C channels; voxel centers at origin + (idx + 0.5) * h."""

    values: np.ndarray  # (X, Y, Z, C) float64
    origin: np.ndarray  # (3,)
    voxel_size: float

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim == 3:
            self.values = self.values[..., None]
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if any(d < 2 for d in self.values.shape[:3]):
            raise ValueError("grid needs at least 2 voxels per axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def dims(self):
        return self.values.shape[:3]

    @property
    def channels(self):
        return self.values.shape[3]

    @property
    def bounds(self):
        lo = self.origin
        hi = self.origin + np.array(self.dims) * self.voxel_size
        return lo, hi

    def centers(self, idx):
        """World positions of voxel indices (N, 3)."""
        return self.origin[None, :] + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def all_centers(self):
        X, Y, Z = self.dims
        gi, gj, gk = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
        idx = np.stack([gi.ravel(), gj.ravel(), gk.ravel()], axis=1)
        return idx, self.centers(idx)

    @staticmethod
    def zeros(dims, channels, origin, voxel_size):
        return VoxelGrid(np.zeros((*dims, channels)), origin, voxel_size)


def trilinear(grid: VoxelGrid, point) -> np.ndarray:
    """Interpolated channel vector at one point; zeros (flagged) outside bounds."""
    out, inside = kernels.trilinear_gather(
        grid.values, grid.origin, float(grid.voxel_size),
        np.asarray(point, dtype=np.float64)[None, :],
    )
    return out[0]


def trilinear_many(grid: VoxelGrid, points):
    """(N, C) interpolated values plus the inside mask."""
    return kernels.trilinear_gather(
        grid.values, grid.origin, float(grid.voxel_size),
        np.ascontiguousarray(points, dtype=np.float64),
    )


def trilinear_backprop(grid: VoxelGrid, point, upstream):
    """Gradient of trilinear() wrt the grid -> (corner indices (8,3), grads (8,C)).

    Corner gradients are the interpolation weights times the upstream vector.
    """
    u = (np.asarray(point, dtype=np.float64) - grid.origin) / grid.voxel_size - 0.5
    dims = np.array(grid.dims)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
    f = np.clip(u - i0, 0.0, 1.0)
    corners = np.empty((8, 3), dtype=np.int64)
    weights = np.empty(8)
    for c in range(8):
        d = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
        corners[c] = i0 + d
        w = 1.0
        for a in range(3):
            w *= f[a] if d[a] else 1.0 - f[a]
        weights[c] = w
    grads = weights[:, None] * np.asarray(upstream, dtype=np.float64)[None, :]
    return corners, grads


@dataclass
class FieldModel:
    """Density + color + feature grids with fixed activations."""

    density_raw: VoxelGrid
    color_raw: VoxelGrid
    feature: VoxelGrid
    background: np.ndarray = dfield(default_factory=lambda: np.zeros(3))
    loss_trace: list = dfield(default_factory=list)
    feature_loss_trace: list = dfield(default_factory=list)

    @property
    def origin(self):
        return self.density_raw.origin

    @property
    def voxel_size(self):
        return self.density_raw.voxel_size

    @property
    def dims(self):
        return self.density_raw.dims

    def sigma(self):
        return softplus(self.density_raw.values[..., 0])

    def colors(self):
        return sigmoid(self.color_raw.values)

    def radiance_source(self):
        return render.RadianceSource(
            dgrid=self.density_raw.values[..., 0],
            cgrid=self.color_raw.values,
            origin=self.origin,
            voxel_size=self.voxel_size,
            act=1,
            background=self.background,
        )

    @staticmethod
    def init(dims, origin, voxel_size, feature_dim, init_sigma=1.0, background=None):
        draw = np.full((*dims, 1), float(softplus_inv(init_sigma)))
        return FieldModel(
            density_raw=VoxelGrid(draw, origin, voxel_size),
            color_raw=VoxelGrid.zeros(dims, 3, origin, voxel_size),
            feature=VoxelGrid.zeros(dims, feature_dim, origin, voxel_size),
            background=np.zeros(3) if background is None else np.asarray(background, dtype=np.float64),
        )

    def save(self, dirpath):
        os.makedirs(dirpath, exist_ok=True)
        vxg.write_vxg(os.path.join(dirpath, "density.vxg"), self.density_raw.values,
                      self.voxel_size, self.origin)
        vxg.write_vxg(os.path.join(dirpath, "color.vxg"), self.color_raw.values,
                      self.voxel_size, self.origin)
        vxg.write_vxg(os.path.join(dirpath, "feature.vxg"), self.feature.values,
                      self.voxel_size, self.origin)
        header = {
            "density_activation": "softplus",
            "color_activation": "logistic",
            "dims": list(self.dims),
            "feature_dim": self.feature.channels,
            "background": [float(v) for v in self.background],
            "loss_trace": [float(v) for v in self.loss_trace],
            "feature_loss_trace": [float(v) for v in self.feature_loss_trace],
        }
        with open(os.path.join(dirpath, "model.json"), "w") as f:
            json.dump(header, f, indent=1)

    @staticmethod
    def load(dirpath):
        dv, h, o = vxg.read_vxg(os.path.join(dirpath, "density.vxg"))
        cv, _, _ = vxg.read_vxg(os.path.join(dirpath, "color.vxg"))
        fv, _, _ = vxg.read_vxg(os.path.join(dirpath, "feature.vxg"))
        with open(os.path.join(dirpath, "model.json")) as f:
            header = json.load(f)
        m = FieldModel(
            density_raw=VoxelGrid(dv, o, h),
            color_raw=VoxelGrid(cv, o, h),
            feature=VoxelGrid(fv, o, h),
            background=np.array(header.get("background", [0, 0, 0]), dtype=np.float64),
        )
        m.loss_trace = list(header.get("loss_trace", []))
        m.feature_loss_trace = list(header.get("feature_loss_trace", []))
        return m


@dataclass
class OptimConfig:
    step_size: float = 0.1
    iterations: int = 3000
    rays_per_batch: int = 2048
    seed: int = 0
    betas: tuple = (0.9, 0.99)
    samples_per_ray: int = 128

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, shape, betas=(0.9, 0.99), eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def step(self, param, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        param -= lr * mh / (np.sqrt(vh) + self.eps)


def _gather_view_rays(views, source_bounds):
    """All pixel rays of all views -> dict of stacked arrays (misses dropped)."""
    from .geometry import ray_box_intersect_batch

    ro_l, rd_l, rgb_l, teach_l = [], [], [], []
    for view in views:
        H, W = view.rgb.shape[:2]
        o, d = render.view_rays(view.pose, W, H)
        ro_l.append(o)
        rd_l.append(d)
        rgb_l.append(view.rgb.reshape(-1, 3))
        teach_l.append(view.teacher_features.reshape(H * W, -1))
    ro = np.concatenate(ro_l)
    rd = np.concatenate(rd_l)
    gt = np.concatenate(rgb_l)
    teach = np.concatenate(teach_l)
    t0, t1 = ray_box_intersect_batch(ro, rd, *source_bounds)
    keep = t1 > t0
    return {
        "ro": ro[keep], "rd": rd[keep], "gt": gt[keep], "teacher": teach[keep],
        "t0": t0[keep], "t1": t1[keep], "ids": np.nonzero(keep)[0],
    }


def _check_divergence(trace, where):
    if len(trace) >= 2 and trace[0] > 0 and trace[-1] > 10.0 * trace[0]:
        raise FitDivergence(f"{where}: loss {trace[-1]:.4g} exceeds 10x initial {trace[0]:.4g}", trace)
    if len(trace) >= 2 and trace[0] == 0.0 and trace[-1] > 0.0:
        raise FitDivergence(f"{where}: loss left exact zero start", trace)


def fit_radiance(views, config: OptimConfig, dims, origin, voxel_size,
                 feature_dim=16, background=None, model=None):
    """Fit density and color grids to rendered views by Adam on ray batches.

    Returns the model with loss_trace attached (mean per-pixel squared error,
    summed over channels, per iteration batch).
    """
    if len(views) < 2:
        raise ValueError("need at least 2 views")
    first = views[0].pose
    for v in views[1:]:
        p = v.pose
        if (p.focal_px, p.width, p.height) != (first.focal_px, first.width, first.height):
            raise ValueError("views must share intrinsics")
    if model is None:
        model = FieldModel.init(dims, origin, voxel_size, feature_dim, background=background)
    src = model.radiance_source()
    rays = _gather_view_rays(views, src.bounds)
    n = rays["ro"].shape[0]
    gen = np.random.default_rng(config.seed)
    opt_d = Adam(model.dims, config.betas)
    opt_c = Adam((*model.dims, 3), config.betas)
    gd = np.zeros(model.dims)
    gc = np.zeros((*model.dims, 3))
    trace = []
    K = config.samples_per_ray
    for it in range(config.iterations):
        batch = gen.integers(0, n, size=min(config.rays_per_batch, n))
        jit = rng.jitter_grid(rng.key_of(config.seed, it), rays["ids"][batch], K)
        gd[:] = 0.0
        gc[:] = 0.0
        loss_sum = kernels.fit_photometric(
            model.density_raw.values[..., 0], model.color_raw.values,
            model.origin, float(model.voxel_size),
            rays["ro"][batch], rays["rd"][batch],
            rays["t0"][batch], rays["t1"][batch], jit, rays["gt"][batch],
            model.background, gd, gc, 1.0 / batch.size,
        )
        trace.append(loss_sum / batch.size)
        _check_divergence(trace, "fit_radiance")
        opt_d.step(model.density_raw.values[..., 0], gd, config.step_size)
        opt_c.step(model.color_raw.values, gc, config.step_size)
    model.loss_trace = trace
    return model


def alignment_terms(weights, point_features, teacher):
    """Core alignment loss: sum_i w_i * ||f_i - F||_1 -> (loss, dL/df (K, D))."""
    w = np.asarray(weights, dtype=np.float64)
    f = np.asarray(point_features, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    resid = f - t[None, :]
    loss = float(np.sum(w * np.abs(resid).sum(axis=1)))
    grad = w[:, None] * np.sign(resid)
    return loss, grad


def alignment_loss(model: FieldModel, ray, k, teacher, seed=0, ray_id=0):
    """Alignment loss of one ray plus the dense feature-grid gradient.

    Weights come from the frozen density and are constants; the gradient
    flows only to the feature grid.
    """
    gf = np.zeros(model.feature.values.shape)
    if isinstance(ray, render.Ray):
        o, d = ray.origin, ray.direction
    else:
        o, d = ray
    o = np.asarray(o, dtype=np.float64)[None, :]
    d = np.asarray(d, dtype=np.float64)[None, :]
    from .geometry import ray_box_intersect_batch

    lo, hi = model.density_raw.bounds
    t0, t1 = ray_box_intersect_batch(o, d, lo, hi)
    jit = rng.jitter_grid(seed, np.array([ray_id]), k)
    loss = kernels.fit_features(
        model.density_raw.values[..., 0], model.feature.values,
        model.origin, float(model.voxel_size),
        o, d, t0, t1, jit, np.asarray(teacher, dtype=np.float64)[None, :], gf, 1.0,
    )
    return loss, gf


def fit_features(model: FieldModel, views, config: OptimConfig, infill=True):
    """Fit the feature grid to teacher features; density and color untouched."""
    src = model.radiance_source()
    rays = _gather_view_rays(views, src.bounds)
    if rays["teacher"].shape[1] != model.feature.channels:
        raise ValueError("teacher feature dim does not match model feature grid")
    n = rays["ro"].shape[0]
    gen = np.random.default_rng(config.seed)
    opt = Adam(model.feature.values.shape, config.betas)
    gf = np.zeros(model.feature.values.shape)
    trace = []
    K = config.samples_per_ray
    for it in range(config.iterations):
        batch = gen.integers(0, n, size=min(config.rays_per_batch, n))
        jit = rng.jitter_grid(rng.key_of(config.seed, 0xFEA7, it), rays["ids"][batch], K)
        gf[:] = 0.0
        loss_sum = kernels.fit_features(
            model.density_raw.values[..., 0], model.feature.values,
            model.origin, float(model.voxel_size),
            rays["ro"][batch], rays["rd"][batch],
            rays["t0"][batch], rays["t1"][batch], jit,
            rays["teacher"][batch], gf, 1.0 / batch.size,
        )
        trace.append(loss_sum / batch.size)
        _check_divergence(trace, "fit_features")
        opt.step(model.feature.values, gf, config.step_size)
    model.feature_loss_trace = trace
    if infill:
        feature_infill(model)
    return model


def feature_infill(model: FieldModel, threshold=0.5):
    """Copy fitted features into occupied voxels the optimizer never touched.

    Unobserved interior voxels keep their exact-zero init; BFS over the
    occupied 6-neighborhood propagates the nearest fitted feature.
    """
    occ = model.sigma() > threshold
    fitted = np.any(model.feature.values != 0.0, axis=3)
    need = occ & ~fitted
    if not np.any(need):
        return model
    from collections import deque

    X, Y, Z = model.dims
    frontier = deque()
    seeds = np.argwhere(occ & fitted)
    for i, j, k in seeds:
        frontier.append((int(i), int(j), int(k)))
    visited = fitted.copy()
    while frontier:
        i, j, k = frontier.popleft()
        for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + di, j + dj, k + dk
            if 0 <= a < X and 0 <= b < Y and 0 <= c < Z and occ[a, b, c] and not visited[a, b, c]:
                model.feature.values[a, b, c] = model.feature.values[i, j, k]
                visited[a, b, c] = True
                frontier.append((a, b, c))
    return model


@dataclass
class OccupiedSet:
    """Voxel centers with activated density above threshold, with features."""

    indices: np.ndarray  # (N, 3) int
    positions: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, D)
    origin: np.ndarray
    voxel_size: float
    dims: tuple


def extract_occupied(model: FieldModel, threshold=0.5) -> OccupiedSet:
    """All voxel centers with sigma > threshold, each with its feature vector."""
    occ = model.sigma() > threshold
    idx = np.argwhere(occ)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    idx = idx[order]
    return OccupiedSet(
        indices=idx,
        positions=model.density_raw.centers(idx),
        features=model.feature.values[idx[:, 0], idx[:, 1], idx[:, 2]],
        origin=model.origin.copy(),
        voxel_size=float(model.voxel_size),
        dims=model.dims,
    )
