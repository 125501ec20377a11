"""Ray-marching volume renderer over voxel grids.

Produces RGB views by exponential-transmittance alpha compositing
(T_{i+1} = T_i * exp(-sigma_i * delta_i), w_i = T_i * (1 - exp(-sigma_i *
delta_i))), plus per-pixel teacher feature maps that stand in for a
pretrained 2D segmentation backbone: the feature of a pixel is the concept
embedding of the first occupied voxel along its ray, plus Gaussian noise.
"""

from dataclasses import dataclass, field as dfield
from typing import Optional

import numpy as np

from . import kernels, rng
from .geometry import ray_box_intersect_batch

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class CameraPose:
    """Camera at position, yaw about +z (0 = facing +x), pitch up/down."""

    position: np.ndarray
    yaw_deg: float
    pitch_deg: float
    focal_px: float
    width: int
    height: int

    def to_json(self):
        return {
            "position": [float(v) for v in self.position],
            "yaw_deg": float(self.yaw_deg),
            "pitch_deg": float(self.pitch_deg),
            "focal_px": float(self.focal_px),
            "width": int(self.width),
            "height": int(self.height),
        }

    @staticmethod
    def from_json(d):
        return CameraPose(
            np.array(d["position"], dtype=np.float64),
            d["yaw_deg"], d["pitch_deg"], d["focal_px"], d["width"], d["height"],
        )


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction norm {n} != 1")
        if not self.t_near < self.t_far:
            raise ValueError("ray requires t_near < t_far")


@dataclass
class RenderedView:
    pose: CameraPose
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    teacher_features: np.ndarray  # (H, W, D); D may be 0
    hit_mask: np.ndarray  # (H, W) bool


@dataclass
class RadianceSource:
    """Grids prepared for rendering; act=1 for model grids, 0 for ground truth."""

    dgrid: np.ndarray  # (X, Y, Z)
    cgrid: np.ndarray  # (X, Y, Z, 3)
    origin: np.ndarray
    voxel_size: float
    act: int
    sigma_scale: float = 1.0
    background: np.ndarray = dfield(default_factory=lambda: np.zeros(3))

    @property
    def bounds(self):
        lo = self.origin
        hi = self.origin + np.array(self.dgrid.shape) * self.voxel_size
        return lo, hi


def pose_axes(pose: CameraPose):
    """(forward, right, down) unit vectors of the camera frame."""
    y = np.deg2rad(pose.yaw_deg)
    p = np.deg2rad(pose.pitch_deg)
    forward = np.array([np.cos(p) * np.cos(y), np.cos(p) * np.sin(y), np.sin(p)])
    right = np.cross(forward, WORLD_UP)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return forward, right, down


def view_rays(pose: CameraPose, width=None, height=None):
    """Pixel rays in row-major order -> (origins (R,3), dirs (R,3) unit)."""
    W = int(width or pose.width)
    H = int(height or pose.height)
    fwd, right, down = pose_axes(pose)
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    u = (jj.ravel() + 0.5 - W / 2.0) / pose.focal_px
    v = (ii.ravel() + 0.5 - H / 2.0) / pose.focal_px
    dirs = fwd[None, :] + u[:, None] * right[None, :] + v[:, None] * down[None, :]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, dirs


def rendering_weights(densities, deltas):
    """Quadrature weights from per-sample densities and step lengths.

    Returns (weights, transmittances) with T_1 = 1, T_{i+1} = T_i *
    exp(-sigma_i * delta_i), w_i = T_i * (1 - exp(-sigma_i * delta_i)).
    """
    sig = np.asarray(densities, dtype=np.float64)
    dl = np.asarray(deltas, dtype=np.float64)
    if sig.shape != dl.shape or sig.ndim != 1 or sig.size < 1:
        raise ValueError("densities and deltas must be equal-length 1-D arrays")
    if not (np.all(np.isfinite(sig)) and np.all(np.isfinite(dl))):
        raise ValueError("non-finite density or step input")
    if np.any(sig < 0) or np.any(dl <= 0):
        raise ValueError("densities must be >= 0 and deltas > 0")
    sd = sig * dl
    trans = np.exp(-(np.cumsum(sd) - sd))  # T_i before sample i
    weights = trans * (1.0 - np.exp(-sd))
    return weights, trans


def _ray_batch_t(source: RadianceSource, origins, dirs):
    lo, hi = source.bounds
    return ray_box_intersect_batch(origins, dirs, lo, hi)


def render_rays(source: RadianceSource, origins, dirs, k, seed=0, ray_ids=None):
    """Render a batch of rays -> (rgb (R,3), wsum (R,))."""
    R = origins.shape[0]
    if ray_ids is None:
        ray_ids = np.arange(R)
    t0, t1 = _ray_batch_t(source, origins, dirs)
    jit = rng.jitter_grid(seed, ray_ids, k)
    return kernels.render_forward(
        source.dgrid, source.cgrid, np.asarray(source.origin, dtype=np.float64),
        float(source.voxel_size), origins, dirs, t0, t1, jit,
        np.asarray(source.background, dtype=np.float64), source.act,
        float(source.sigma_scale),
    )


def render_ray_rgb(source: RadianceSource, ray, k, seed=0, ray_id=0):
    """Render one ray; rays missing the grid return the background exactly."""
    if k < 2:
        raise ValueError("need at least 2 samples per ray")
    if isinstance(ray, Ray):
        o, d = ray.origin, ray.direction
    else:
        o, d = ray
    rgb, _ = render_rays(
        source, np.asarray(o, dtype=np.float64)[None, :],
        np.asarray(d, dtype=np.float64)[None, :], k, seed=seed,
        ray_ids=np.array([ray_id]),
    )
    return rgb[0]


def teacher_features_batch(grids, vocab, origins, dirs, noise_std, seed, ray_ids):
    """First-hit concept embeddings with per-ray Gaussian noise -> (R, D).

    grids must expose .occupancy (X,Y,Z), .semantic_ids, .id_to_concept,
    .origin, .voxel_size (GroundTruthGrids does).
    """
    occ = np.ascontiguousarray(grids.occupancy, dtype=np.uint8)
    sem = grids.semantic_ids
    lo = np.asarray(grids.origin, dtype=np.float64)
    hi = lo + np.array(occ.shape) * grids.voxel_size
    t0, t1 = ray_box_intersect_batch(origins, dirs, lo, hi)
    idx, _ = kernels.dda_first_hit(occ, lo, float(grids.voxel_size), origins, dirs, t0, t1)
    D = vocab.dim
    out = np.empty((origins.shape[0], D))
    bg = vocab.embedding("background")
    for r in range(origins.shape[0]):
        if idx[r, 0] < 0:
            emb = bg
        else:
            oid = int(sem[idx[r, 0], idx[r, 1], idx[r, 2]])
            emb = vocab.embedding(grids.id_to_concept[oid])
        out[r] = emb
    if noise_std > 0:
        for r in range(origins.shape[0]):
            key = rng.key_of(seed, 0x7EAC, int(ray_ids[r]))
            out[r] = out[r] + noise_std * rng.gaussians(key, D)
    return out, idx


def teacher_feature(grids, vocab, ray, noise_std=0.0, seed=0, ray_id=0):
    """Teacher feature of a single ray (see teacher_features_batch)."""
    if isinstance(ray, Ray):
        o, d = ray.origin, ray.direction
    else:
        o, d = ray
    out, _ = teacher_features_batch(
        grids, vocab,
        np.asarray(o, dtype=np.float64)[None, :],
        np.asarray(d, dtype=np.float64)[None, :],
        noise_std, seed, np.array([ray_id]),
    )
    return out[0]


def save_view(view: RenderedView, path_base):
    """Persist a view: P6 PPM for RGB + feature planes in the grid format."""
    from . import vxg

    vxg.write_ppm(path_base + ".ppm", view.rgb)
    H, W, D = view.teacher_features.shape
    planes = view.teacher_features.transpose(1, 0, 2).reshape(W, H, 1, D)
    vxg.write_vxg(path_base + ".vxg", planes, 1.0, (0, 0, 0))


def load_view(path_base, pose: CameraPose) -> RenderedView:
    from . import vxg

    rgb = vxg.read_ppm(path_base + ".ppm")
    planes, _, _ = vxg.read_vxg(path_base + ".vxg")
    W, H = planes.shape[0], planes.shape[1]
    teacher = planes.reshape(W, H, planes.shape[3]).transpose(1, 0, 2)
    return RenderedView(pose=pose, rgb=rgb, teacher_features=teacher,
                        hit_mask=np.zeros(rgb.shape[:2], dtype=bool))


def render_view(source, pose, width=None, height=None, k=128, seed=0,
                grids=None, vocab=None, noise_std=0.0):
    """Render a full view; teacher features are filled when grids+vocab given."""
    W = int(width or pose.width)
    H = int(height or pose.height)
    origins, dirs = view_rays(pose, W, H)
    ray_ids = np.arange(W * H)
    t0, t1 = _ray_batch_t(source, origins, dirs)
    jit = rng.jitter_grid(seed, ray_ids, k)
    rgb, wsum = kernels.render_forward(
        source.dgrid, source.cgrid, np.asarray(source.origin, dtype=np.float64),
        float(source.voxel_size), origins, dirs, t0, t1, jit,
        np.asarray(source.background, dtype=np.float64), source.act,
        float(source.sigma_scale),
    )
    if grids is not None and vocab is not None:
        feats, hit_idx = teacher_features_batch(
            grids, vocab, origins, dirs, noise_std, seed, ray_ids
        )
        hits = hit_idx[:, 0] >= 0
        teacher = feats.reshape(H, W, vocab.dim)
    else:
        teacher = np.zeros((H, W, 0))
        hits = wsum > 0.5
    return RenderedView(
        pose=pose,
        rgb=rgb.reshape(H, W, 3),
        teacher_features=teacher,
        hit_mask=hits.reshape(H, W),
    )
