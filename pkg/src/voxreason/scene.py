"""Procedural indoor scene synthesis and ground-truth extraction.

Scenes are 1-4 sealed rooms (outer walls plus full-height dividers, no
doorways) populated with boxy furniture. Everything downstream needs
determinism, so synthesis is a pure function of (config, seed), and the
relation oracle is evaluated over rasterized per-object voxel sets: the
executor sees the same point sets via DBSCAN, which is what makes the
dual-path answer equivalence exact on separable scenes.
"""

import json
from dataclasses import dataclass, field as dfield
from typing import Optional

import numpy as np

from . import kernels
from .field import VoxelGrid
from .geometry import Box, points_in_shape, ray_box_intersect_batch, shape_world_bbox
from .relations import GeometricEvaluator, size_thresholds, take_uid
from .render import CameraPose, pose_axes

WALL_CONCEPT = "wall"
WALL_ALBEDO = (0.75, 0.72, 0.68)

DEFAULT_CONCEPTS = [
    "chair", "table", "sofa", "bed", "lamp", "desk", "cabinet", "bookshelf",
    "television", "plant", "stool", "wardrobe", "nightstand", "dresser",
    "bench", "armchair", "ottoman", "refrigerator", "sink", "bathtub",
    "counter", "cushion", "crate", "piano",
]

# concept -> (shape, size_lo, size_hi, base albedo, stackable, support)
_CAT = {
    "chair":        ("composite", (0.45, 0.45, 0.80), (0.55, 0.55, 0.95), (0.55, 0.35, 0.20), False, False),
    "table":        ("composite", (1.00, 0.60, 0.70), (1.40, 0.90, 0.80), (0.60, 0.45, 0.30), False, True),
    "sofa":         ("composite", (1.50, 0.75, 0.75), (1.90, 0.95, 0.90), (0.30, 0.35, 0.55), False, False),
    "bed":          ("box",       (1.80, 1.40, 0.45), (2.10, 1.70, 0.60), (0.70, 0.70, 0.80), False, True),
    "lamp":         ("cylinder",  (0.30, 0.30, 0.45), (0.40, 0.40, 0.60), (0.90, 0.85, 0.55), True,  False),
    "desk":         ("composite", (1.10, 0.55, 0.70), (1.40, 0.70, 0.80), (0.45, 0.30, 0.20), False, True),
    "cabinet":      ("box",       (0.80, 0.45, 1.00), (1.10, 0.60, 1.40), (0.50, 0.38, 0.25), False, False),
    "bookshelf":    ("box",       (0.80, 0.35, 1.50), (1.10, 0.45, 1.90), (0.42, 0.30, 0.22), False, False),
    "television":   ("box",       (0.90, 0.30, 0.55), (1.20, 0.35, 0.70), (0.10, 0.10, 0.12), True,  False),
    "plant":        ("cylinder",  (0.35, 0.35, 0.60), (0.50, 0.50, 0.90), (0.20, 0.55, 0.20), True,  False),
    "stool":        ("cylinder",  (0.35, 0.35, 0.40), (0.45, 0.45, 0.50), (0.60, 0.50, 0.35), False, False),
    "wardrobe":     ("box",       (1.00, 0.55, 1.70), (1.30, 0.65, 2.00), (0.55, 0.42, 0.30), False, False),
    "nightstand":   ("box",       (0.45, 0.40, 0.50), (0.55, 0.50, 0.60), (0.52, 0.40, 0.28), False, True),
    "dresser":      ("box",       (1.00, 0.45, 0.80), (1.30, 0.55, 0.95), (0.48, 0.36, 0.26), False, True),
    "bench":        ("box",       (1.20, 0.40, 0.45), (1.50, 0.50, 0.50), (0.58, 0.44, 0.30), False, False),
    "armchair":     ("composite", (0.70, 0.70, 0.75), (0.85, 0.85, 0.90), (0.45, 0.25, 0.25), False, False),
    "ottoman":      ("box",       (0.55, 0.55, 0.40), (0.70, 0.70, 0.45), (0.40, 0.30, 0.35), False, False),
    "refrigerator": ("box",       (0.70, 0.65, 1.60), (0.85, 0.75, 1.90), (0.82, 0.84, 0.86), False, False),
    "sink":         ("box",       (0.55, 0.45, 0.85), (0.70, 0.55, 0.95), (0.85, 0.88, 0.90), False, False),
    "bathtub":      ("box",       (1.50, 0.70, 0.55), (1.80, 0.85, 0.65), (0.88, 0.90, 0.92), False, False),
    "counter":      ("box",       (1.20, 0.60, 0.85), (1.60, 0.70, 0.95), (0.62, 0.58, 0.52), False, True),
    "cushion":      ("box",       (0.40, 0.40, 0.30), (0.50, 0.50, 0.35), (0.75, 0.30, 0.35), True,  False),
    "crate":        ("box",       (0.45, 0.45, 0.40), (0.60, 0.60, 0.55), (0.55, 0.45, 0.28), True,  False),
    "piano":        ("composite", (1.40, 0.60, 1.00), (1.60, 0.70, 1.20), (0.08, 0.08, 0.10), False, False),
}


class SceneInfeasibleError(RuntimeError):
    pass


class TrajectoryError(RuntimeError):
    pass


@dataclass
class ObjectSpec:
    id: int
    concept: str
    shape: str  # box | cylinder | composite
    position: np.ndarray  # center of the overall extents
    yaw_deg: float
    size: tuple  # overall extents (ex, ey, ez)
    albedo: tuple
    parts: Optional[list] = None  # composite: [(offset, extents), ...]

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if any(e <= 0 for e in self.size):
            raise ValueError("object extents must be positive")

    def world_bbox(self) -> Box:
        return shape_world_bbox(self.shape, self.position, self.yaw_deg, self.size, self.parts)

    def contains(self, pts):
        return points_in_shape(pts, self.shape, self.position, self.yaw_deg, self.size, self.parts)

    def to_json(self):
        d = {
            "id": self.id,
            "concept": self.concept,
            "shape": self.shape,
            "position": [float(v) for v in self.position],
            "yaw_deg": float(self.yaw_deg),
            "size": [float(v) for v in self.size],
            "albedo": [float(v) for v in self.albedo],
        }
        if self.parts is not None:
            d["parts"] = [[list(map(float, o)), list(map(float, e))] for o, e in self.parts]
        return d

    @staticmethod
    def from_json(d):
        parts = None
        if "parts" in d:
            parts = [(tuple(o), tuple(e)) for o, e in d["parts"]]
        return ObjectSpec(d["id"], d["concept"], d["shape"], np.array(d["position"]),
                          d["yaw_deg"], tuple(d["size"]), tuple(d["albedo"]), parts)


@dataclass
class RoomSpec:
    id: int
    floor_box: Box  # interior region (full height)
    wall_segments: list  # Boxes owned by this room's layout step

    def to_json(self):
        return {
            "id": self.id,
            "floor_box": self.floor_box.to_json(),
            "wall_segments": [w.to_json() for w in self.wall_segments],
        }

    @staticmethod
    def from_json(d):
        return RoomSpec(d["id"], Box.from_json(d["floor_box"]),
                        [Box.from_json(w) for w in d["wall_segments"]])


@dataclass
class SceneGraph:
    scene_id: str
    bounds: Box
    rooms: list
    objects: list
    relations: set  # {(relation, *ids)}
    rng_seed: int
    concept_vocabulary: list

    @property
    def walls(self):
        out = []
        for r in self.rooms:
            out.extend(r.wall_segments)
        return out

    def id_to_concept(self):
        return [o.concept for o in self.objects] + [WALL_CONCEPT]

    @property
    def wall_id(self):
        return len(self.objects)

    def to_json(self):
        return {
            "scene_id": self.scene_id,
            "bounds": self.bounds.to_json(),
            "rng_seed": int(self.rng_seed),
            "concept_vocabulary": list(self.concept_vocabulary),
            "rooms": [r.to_json() for r in self.rooms],
            "objects": [o.to_json() for o in self.objects],
            "relations": sorted([list(t) for t in self.relations]),
        }

    def dumps(self):
        return json.dumps(self.to_json(), separators=(",", ":"), sort_keys=False)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.dumps())

    @staticmethod
    def from_json(d):
        return SceneGraph(
            scene_id=d["scene_id"],
            bounds=Box.from_json(d["bounds"]),
            rooms=[RoomSpec.from_json(r) for r in d["rooms"]],
            objects=[ObjectSpec.from_json(o) for o in d["objects"]],
            relations={tuple(t) for t in d["relations"]},
            rng_seed=d["rng_seed"],
            concept_vocabulary=list(d["concept_vocabulary"]),
        )

    @staticmethod
    def load(path):
        with open(path) as f:
            return SceneGraph.from_json(json.load(f))


@dataclass
class SceneConfig:
    rooms: tuple = (2, 4)  # inclusive range (or int)
    objects_per_room: tuple = (2, 5)
    concepts: list = dfield(default_factory=lambda: list(DEFAULT_CONCEPTS))
    room_size: tuple = (3.2, 4.6)
    wall_thickness: float = 0.25
    wall_height: float = 2.6
    min_gap: float = 0.3
    stack_prob: float = 0.35
    resolution: int = 64  # canonical grid for the relation oracle
    max_place_attempts: int = 1000
    palette_size: Optional[int] = None  # per-scene concept palette (None = all)

    def __post_init__(self):
        if isinstance(self.rooms, int):
            self.rooms = (self.rooms, self.rooms)
        if isinstance(self.objects_per_room, int):
            self.objects_per_room = (self.objects_per_room, self.objects_per_room)
        if not (1 <= self.rooms[0] <= self.rooms[1] <= 4):
            raise ValueError("room count must lie in 1..4")
        if not (2 <= self.objects_per_room[0] <= self.objects_per_room[1] <= 8):
            raise ValueError("objects per room must lie in 2..8")
        if len(self.concepts) < 12:
            raise ValueError("concept vocabulary needs at least 12 concepts")
        for c in self.concepts:
            if c not in _CAT:
                raise ValueError(f"no shape catalogue entry for concept {c!r}")


@dataclass
class GroundTruthGrids:
    """Rasterized scene: occupancy, albedo color, object-id semantics."""

    density: VoxelGrid  # 1 channel, {0, 1}
    color: VoxelGrid  # 3 channels
    semantic: VoxelGrid  # 1 channel, object id or -1
    instance: VoxelGrid  # identical id channel
    id_to_concept: list

    @property
    def occupancy(self):
        return self.density.values[..., 0]

    @property
    def semantic_ids(self):
        return self.semantic.values[..., 0].astype(np.int64)

    @property
    def origin(self):
        return self.density.origin

    @property
    def voxel_size(self):
        return self.density.voxel_size

    @property
    def dims(self):
        return self.density.dims

    # duck-typed alias used by render.teacher_features_batch
    @property
    def semantic_array(self):
        return self.semantic_ids

    def radiance_source(self, sigma_scale=8.0, background=None):
        from .render import RadianceSource

        return RadianceSource(
            dgrid=self.density.values[..., 0],
            cgrid=self.color.values,
            origin=self.origin,
            voxel_size=self.voxel_size,
            act=0,
            sigma_scale=sigma_scale,
            background=np.zeros(3) if background is None else background,
        )

    def save(self, path):
        from . import vxg

        stacked = np.concatenate(
            [self.density.values, self.color.values, self.semantic.values, self.instance.values],
            axis=3,
        )
        vxg.write_vxg(path, stacked, self.voxel_size, self.origin)

    @staticmethod
    def load(path, scene: "SceneGraph"):
        from . import vxg

        values, h, origin = vxg.read_vxg(path)
        if values.shape[3] != 6:
            raise vxg.FormatError(f"{path}: expected 6 channels, got {values.shape[3]}")
        return GroundTruthGrids(
            density=VoxelGrid(values[..., 0:1], origin, h),
            color=VoxelGrid(values[..., 1:4], origin, h),
            semantic=VoxelGrid(np.rint(values[..., 4:5]), origin, h),
            instance=VoxelGrid(np.rint(values[..., 5:6]), origin, h),
            id_to_concept=scene.id_to_concept(),
        )


def _room_layout(n_rooms, gen, cfg):
    """Split the floor into a row or 2x2 grid of rooms; returns rooms + walls."""
    t = cfg.wall_thickness
    H = cfg.wall_height
    if n_rooms <= 3:
        nx, ny = n_rooms, 1
    else:
        nx, ny = 2, 2
    if n_rooms > 1 and gen.random() < 0.5:
        nx, ny = ny, nx
    widths = gen.uniform(cfg.room_size[0], cfg.room_size[1], size=nx)
    depths = gen.uniform(cfg.room_size[0], cfg.room_size[1], size=ny)
    Lx = float(widths.sum() + t * (nx + 1))
    Ly = float(depths.sum() + t * (ny + 1))
    bounds = Box((0, 0, 0), (Lx, Ly, H))
    ext = 0.5  # walls extend past bounds so grid-edge voxels stay solid
    top = H + ext
    walls = [
        Box((-ext, -ext, 0), (Lx + ext, t, top)),
        Box((-ext, Ly - t, 0), (Lx + ext, Ly + ext, top)),
        Box((-ext, -ext, 0), (t, Ly + ext, top)),
        Box((Lx - t, -ext, 0), (Lx + ext, Ly + ext, top)),
    ]
    xs = [t]
    for w in widths:
        xs.append(xs[-1] + w + t)
    ys = [t]
    for d in depths:
        ys.append(ys[-1] + d + t)
    for i in range(1, nx):
        x0 = xs[i] - t
        walls.append(Box((x0, 0, 0), (x0 + t, Ly, top)))
    for j in range(1, ny):
        y0 = ys[j] - t
        walls.append(Box((0, y0, 0), (Lx, y0 + t, top)))
    rooms = []
    rid = 0
    for j in range(ny):
        for i in range(nx):
            if rid >= n_rooms:
                break
            lo = (xs[i], ys[j], 0.0)
            hi = (xs[i] + widths[i], ys[j] + depths[j], H)
            segs = walls if rid == 0 else []
            rooms.append(RoomSpec(rid, Box(lo, hi), list(segs)))
            rid += 1
    return bounds, rooms


def _sample_object(gen, concept, oid):
    shape, lo, hi, albedo, _, _ = _CAT[concept]
    size = tuple(float(gen.uniform(a, b)) for a, b in zip(lo, hi))
    yaw = float(gen.choice([0.0, 90.0, 180.0, 270.0]) + gen.uniform(-15, 15))
    alb = tuple(float(np.clip(c + gen.uniform(-0.08, 0.08), 0.02, 0.98)) for c in albedo)
    parts = None
    ex, ey, ez = size
    if shape == "composite":
        # base slab plus a back/top feature; offsets in the local frame
        if concept in ("chair", "armchair", "sofa"):
            base_h = 0.45 * ez
            parts = [
                ((0, 0, -ez / 2 + base_h / 2), (ex, ey, base_h)),
                ((0, ey / 2 - 0.12 * ey, base_h / 2 - ez * 0.05), (ex, 0.24 * ey, ez - base_h + ez * 0.1)),
            ]
        elif concept in ("table", "desk"):
            top_h = 0.14 * ez
            parts = [
                ((0, 0, ez / 2 - top_h / 2), (ex, ey, top_h)),
                ((0, 0, -top_h / 2), (0.3 * ex, 0.4 * ey, ez - top_h)),
            ]
        elif concept == "piano":
            parts = [
                ((0, 0, -ez / 2 + 0.3 * ez), (ex, ey, 0.6 * ez)),
                ((0, ey / 2 - 0.2 * ey, 0.2 * ez), (ex, 0.4 * ey, 0.6 * ez)),
            ]
        else:
            parts = [((0, 0, 0), (ex, ey, ez))]
    return ObjectSpec(oid, concept, shape, np.zeros(3), yaw, size, alb, parts)


def _bbox_gap(a: Box, b: Box) -> float:
    """Largest per-axis separation between two boxes (<= 0 if overlapping)."""
    g = -np.inf
    for ax in range(3):
        g = max(g, max(a.lo[ax] - b.hi[ax], b.lo[ax] - a.hi[ax]))
    return g


def synth_scene(config: SceneConfig, seed: int) -> SceneGraph:
    """Synthesize a deterministic scene graph; see SceneConfig for knobs."""
    gen = np.random.default_rng(np.uint64(seed))
    n_rooms = int(gen.integers(config.rooms[0], config.rooms[1] + 1))
    bounds, rooms = _room_layout(n_rooms, gen, config)
    palette = list(config.concepts)
    if config.palette_size and config.palette_size < len(palette):
        # a per-scene palette concentrates instances on fewer classes, which
        # gives counting questions a usable answer distribution; half of it
        # is drawn from small-footprint classes so rooms stay packable
        def footprint(c):
            lo, hi = _CAT[c][1], _CAT[c][2]
            return 0.25 * (lo[0] + hi[0]) * (lo[1] + hi[1])

        small = [c for c in config.concepts if footprint(c) < 0.45]
        big = [c for c in config.concepts if c not in small]
        k = config.palette_size
        ks = min(len(small), (k + 1) // 2)
        palette = [str(c) for c in gen.choice(small, size=ks, replace=False)]
        rest = [c for c in config.concepts if c not in palette]
        palette += [str(c) for c in gen.choice(rest, size=k - ks, replace=False)]
    objects = []
    clearance = 0.1
    for room in rooms:
        n_obj = int(gen.integers(config.objects_per_room[0], config.objects_per_room[1] + 1))
        placed_in_room = []
        for _ in range(n_obj):
            ok = False
            for _attempt in range(config.max_place_attempts):
                concept = str(gen.choice(palette))
                obj = _sample_object(gen, concept, len(objects))
                support = None
                stackable = _CAT[concept][4]
                supports = [o for o in placed_in_room
                            if _CAT[o.concept][5] and o.concept != concept]
                if stackable and supports and gen.random() < config.stack_prob:
                    support = supports[int(gen.integers(0, len(supports)))]
                bb0 = obj.world_bbox()
                half = np.array(bb0.size) / 2
                if support is not None:
                    sb = support.world_bbox()
                    xlo = sb.lo[0] + half[0]
                    xhi = sb.hi[0] - half[0]
                    ylo = sb.lo[1] + half[1]
                    yhi = sb.hi[1] - half[1]
                    if xlo >= xhi or ylo >= yhi:
                        continue
                    z = sb.hi[2] + half[2]
                    if z + half[2] > config.wall_height - 0.2:
                        continue
                    pos = np.array([gen.uniform(xlo, xhi), gen.uniform(ylo, yhi), z])
                else:
                    fb = room.floor_box
                    xlo = fb.lo[0] + half[0] + clearance
                    xhi = fb.hi[0] - half[0] - clearance
                    ylo = fb.lo[1] + half[1] + clearance
                    yhi = fb.hi[1] - half[1] - clearance
                    if xlo >= xhi or ylo >= yhi:
                        continue
                    pos = np.array([gen.uniform(xlo, xhi), gen.uniform(ylo, yhi), half[2]])
                obj.position = pos
                bb = obj.world_bbox()
                if not room.floor_box.contains_box(bb, tol=1e-9):
                    continue
                good = True
                for other in placed_in_room:
                    if support is not None and other.id == support.id:
                        continue
                    ob = other.world_bbox()
                    ov = bb.overlap_volume(ob)
                    if ov > 0.05 * min(bb.volume, ob.volume):
                        good = False
                        break
                    if ov > 0 or _bbox_gap(bb, ob) < config.min_gap:
                        good = False
                        break
                if good:
                    objects.append(obj)
                    placed_in_room.append(obj)
                    ok = True
                    break
            if not ok:
                raise SceneInfeasibleError(f"scene infeasible: room {room.id}")
    scene = SceneGraph(
        scene_id=f"scene_{seed:016x}",
        bounds=bounds,
        rooms=rooms,
        objects=objects,
        relations=set(),
        rng_seed=int(seed),
        concept_vocabulary=list(config.concepts),
    )
    scene.relations = relation_oracle(scene, resolution=config.resolution)
    return scene


def rasterize(scene: SceneGraph, resolution: int) -> GroundTruthGrids:
    """Voxelize the scene: a voxel is occupied iff its center lies inside a
    shape or wall; overlap ties go to the larger (later-placed) object id."""
    if not 16 <= resolution <= 256:
        raise ValueError("resolution must lie in [16, 256]")
    size = np.array(scene.bounds.size)
    h = float(size.max() / resolution)
    dims = tuple(int(np.ceil(s / h - 1e-9)) for s in size)
    origin = np.asarray(scene.bounds.lo, dtype=np.float64)
    X, Y, Z = dims
    semantic = np.full(dims, -1, dtype=np.int64)
    color = np.zeros((*dims, 3))
    axes = [origin[a] + (np.arange(dims[a]) + 0.5) * h for a in range(3)]

    def paint_box(box: Box, oid, albedo):
        sl = []
        for a in range(3):
            i0 = int(np.searchsorted(axes[a], box.lo[a], side="left"))
            i1 = int(np.searchsorted(axes[a], box.hi[a], side="right"))
            if i0 >= i1:
                return
            sl.append((i0, i1))
        (x0, x1), (y0, y1), (z0, z1) = sl
        semantic[x0:x1, y0:y1, z0:z1] = oid
        color[x0:x1, y0:y1, z0:z1] = albedo

    def paint_shape(obj: ObjectSpec):
        bb = obj.world_bbox()
        rng_idx = []
        for a in range(3):
            i0 = int(np.searchsorted(axes[a], bb.lo[a], side="left"))
            i1 = int(np.searchsorted(axes[a], bb.hi[a], side="right"))
            if i0 >= i1:
                return
            rng_idx.append((i0, i1))
        (x0, x1), (y0, y1), (z0, z1) = rng_idx
        gx, gy, gz = np.meshgrid(axes[0][x0:x1], axes[1][y0:y1], axes[2][z0:z1], indexing="ij")
        pts = np.stack([gx, gy, gz], axis=-1)
        mask = obj.contains(pts)
        sub = semantic[x0:x1, y0:y1, z0:z1]
        sub[mask] = obj.id
        csub = color[x0:x1, y0:y1, z0:z1]
        csub[mask] = obj.albedo

    wall_id = scene.wall_id
    for wbox in scene.walls:
        paint_box(wbox, wall_id, WALL_ALBEDO)
    for obj in scene.objects:  # ascending id: later-placed wins ties
        paint_shape(obj)
    density = (semantic >= 0).astype(np.float64)
    return GroundTruthGrids(
        density=VoxelGrid(density[..., None], origin, h),
        color=VoxelGrid(color, origin, h),
        semantic=VoxelGrid(semantic.astype(np.float64)[..., None], origin, h),
        instance=VoxelGrid(semantic.astype(np.float64)[..., None], origin, h),
        id_to_concept=scene.id_to_concept(),
    )


class _ObjectPoints:
    """Voxel point set of one object (duck-typed like executor.VoxelSet)."""

    def __init__(self, indices, origin, h):
        self.indices = indices
        self.voxel_size = h
        self.positions = origin[None, :] + (indices + 0.5) * h
        self.count = indices.shape[0]
        self.uid = take_uid()


def object_point_sets(scene: SceneGraph, grids: GroundTruthGrids):
    """Per-object voxel point sets from the (tie-broken) instance channel."""
    ids = grids.semantic_ids
    sets = {}
    occ_idx = np.argwhere(ids >= 0)
    vals = ids[occ_idx[:, 0], occ_idx[:, 1], occ_idx[:, 2]]
    order = np.argsort(vals, kind="stable")
    occ_idx = occ_idx[order]
    vals = vals[order]
    cut = np.searchsorted(vals, np.arange(len(scene.objects) + 2))
    origin = grids.origin
    h = float(grids.voxel_size)
    for oid in range(len(scene.objects) + 1):
        idx = occ_idx[cut[oid]:cut[oid + 1]]
        sets[oid] = _ObjectPoints(np.ascontiguousarray(idx.astype(np.float64)), origin, h)
    return sets


def grid_diagonal(grids) -> float:
    return float(np.linalg.norm(np.array(grids.dims) * grids.voxel_size))


def scene_evaluator(scene: SceneGraph, grids: GroundTruthGrids) -> GeometricEvaluator:
    """Geometric evaluator with this scene's size percentiles and diagonal."""
    sets = object_point_sets(scene, grids)
    counts = [sets[o.id].count for o in scene.objects if sets[o.id].count > 0]
    lo, hi = size_thresholds(counts)
    return GeometricEvaluator(grid_diagonal(grids), lo, hi)


def relation_oracle(scene: SceneGraph, resolution: int = 64, grids=None) -> set:
    """All true relation tuples over pairs (and triples for 'between')."""
    if grids is None:
        grids = rasterize(scene, resolution)
    sets = object_point_sets(scene, grids)
    ev = scene_evaluator(scene, grids)
    ids = [o.id for o in scene.objects if sets[o.id].count > 0]
    out = set()
    for a in ids:
        for b in ids:
            if a == b:
                continue
            for rel in ("above", "below", "on the top of", "inside",
                        "close", "far", "on the left", "on the right"):
                if ev.score((sets[a], sets[b]), rel) > 0.5:
                    out.add((rel, a, b))
    for c in ids:
        for a in ids:
            if a == c:
                continue
            for b in ids:
                if b == c or b == a:
                    continue
                if ev.score((sets[c], sets[a], sets[b]), "between") > 0.5:
                    out.add(("between", c, a, b))
    return out


def sample_trajectory(scene: SceneGraph, n_waypoints: int, seed: int,
                      grids: Optional[GroundTruthGrids] = None, resolution: int = 64,
                      width: int = 64, height: int = 64, focal_px: float = 55.0):
    """Camera poses of an exploring agent: 12 yaw steps of 30 degrees per
    waypoint, each with independent pitch in [-10, 10] degrees. Poses whose
    central ray hits matter nearer than 0.3 m, or nothing at all, are
    discarded; fully-discarded waypoints are resampled (up to 100 times)."""
    if n_waypoints < 1:
        raise ValueError("need at least one waypoint")
    if grids is None:
        grids = rasterize(scene, resolution)
    gen = np.random.default_rng(np.uint64(seed) ^ np.uint64(0xA5A5A5A5))
    occ = np.ascontiguousarray(grids.occupancy, dtype=np.uint8)
    empty_scene = not bool(occ.any())
    lo = grids.origin
    hi = lo + np.array(grids.dims) * grids.voxel_size
    eye = min(1.5, scene.bounds.hi[2] - 0.5)
    obj_boxes = [o.world_bbox().expanded(0.05) for o in scene.objects]
    poses = []
    for w in range(n_waypoints):
        room = scene.rooms[w % len(scene.rooms)] if scene.rooms else None
        ok = False
        for _retry in range(100):
            if room is not None:
                fb = room.floor_box
                margin = 0.4
                if fb.hi[0] - fb.lo[0] < 2 * margin or fb.hi[1] - fb.lo[1] < 2 * margin:
                    margin = 0.1
                pos = np.array([
                    gen.uniform(fb.lo[0] + margin, fb.hi[0] - margin),
                    gen.uniform(fb.lo[1] + margin, fb.hi[1] - margin),
                    eye,
                ])
            else:
                pos = np.array([
                    gen.uniform(scene.bounds.lo[0], scene.bounds.hi[0]),
                    gen.uniform(scene.bounds.lo[1], scene.bounds.hi[1]),
                    eye,
                ])
            if any(b.contains_points(pos[None, :])[0] for b in obj_boxes):
                continue
            cand = []
            for k in range(12):
                pitch = float(gen.uniform(-10.0, 10.0))
                pose = CameraPose(pos.copy(), yaw_deg=30.0 * k, pitch_deg=pitch,
                                  focal_px=focal_px, width=width, height=height)
                cand.append(pose)
            if empty_scene:
                kept = cand
            else:
                fwd = np.stack([pose_axes(p)[0] for p in cand])
                org = np.stack([p.position for p in cand])
                t0, t1 = ray_box_intersect_batch(org, fwd, lo, hi)
                _, thit = kernels.dda_first_hit(occ, lo, float(grids.voxel_size), org, fwd, t0, t1)
                kept = [p for p, t in zip(cand, thit) if np.isfinite(t) and t >= 0.3]
            if kept:
                poses.extend(kept)
                ok = True
                break
        if not ok:
            raise TrajectoryError(f"waypoint {w}: no valid views after 100 placements")
    return poses
