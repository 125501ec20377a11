"""Scene synthesis, rasterization, relation oracle, trajectories.

The oracles here are deliberately independent re-implementations: a
per-voxel point-in-shape rasterizer and a second relation-predicate
implementation working from first principles.
"""

import numpy as np
import pytest

from conftest import make_scene
from voxreason.geometry import Box
from voxreason.scene import (
    SceneConfig, SceneGraph, SceneInfeasibleError, TrajectoryError,
    object_point_sets, rasterize, relation_oracle, sample_trajectory,
    scene_evaluator, synth_scene, grid_diagonal,
)


# ---------------------------------------------------------------------------
# brute-force oracles


def brute_rasterize_semantic(scene, resolution):
    """Independent per-voxel rasterizer: direct point-in-shape test over all
    centers, wall first, objects in ascending id order (later wins)."""
    size = np.array(scene.bounds.size)
    h = size.max() / resolution
    dims = tuple(int(np.ceil(s / h - 1e-9)) for s in size)
    sem = np.full(dims, -1, dtype=np.int64)
    wall_id = scene.wall_id
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                p = scene.bounds.lo + (np.array([i, j, k]) + 0.5) * h
                for w in scene.walls:
                    if np.all(p >= w.lo) and np.all(p <= w.hi):
                        sem[i, j, k] = wall_id
                for obj in scene.objects:
                    if obj.contains(p[None, :])[0]:
                        sem[i, j, k] = obj.id
    return sem, h


def second_relation_implementation(scene, resolution=48):
    """Second, from-scratch evaluation of the 11-relation geometry."""
    grids = rasterize(scene, resolution)
    sem = grids.semantic_ids
    h = grids.voxel_size
    diag = float(np.linalg.norm(np.array(sem.shape) * h))
    per = {}
    for obj in scene.objects:
        idx = np.argwhere(sem == obj.id)
        if idx.shape[0] == 0:
            continue
        pos = grids.origin + (idx + 0.5) * h
        per[obj.id] = (idx, pos)

    def centroid(o):
        return per[o][1].mean(axis=0)

    def fp(o):
        return {(int(a), int(b)) for a, b in per[o][0][:, :2]}

    def bbox(o):
        return per[o][1].min(axis=0) - h / 2, per[o][1].max(axis=0) + h / 2

    out = set()
    ids = sorted(per)
    for a in ids:
        for b in ids:
            if a == b:
                continue
            ca, cb = centroid(a), centroid(b)
            fa, fbp = fp(a), fp(b)
            iou = len(fa & fbp) / len(fa | fbp)
            if ca[2] - cb[2] > 0.1 and iou > 0:
                out.add(("above", a, b))
                out.add(("below", b, a))
                gap = (per[a][1][:, 2].min() - h / 2) - (per[b][1][:, 2].max() + h / 2)
                if gap <= 0.05:
                    out.add(("on the top of", a, b))
            lo_b, hi_b = bbox(b)
            frac = np.mean(np.all((per[a][1] >= lo_b) & (per[a][1] <= hi_b), axis=1))
            if frac >= 0.9:
                out.add(("inside", a, b))
            d = np.linalg.norm(ca - cb)
            if d <= 0.15 * diag:
                out.add(("close", a, b))
            if d >= 0.5 * diag:
                out.add(("far", a, b))
            if cb[0] - ca[0] > 0.1:
                out.add(("on the left", a, b))
                out.add(("on the right", b, a))
    for c in ids:
        for a in ids:
            for b in ids:
                if len({a, b, c}) < 3:
                    continue
                ca, cb, cc = centroid(a), centroid(b), centroid(c)
                ab = cb - ca
                n = np.linalg.norm(ab)
                if n == 0:
                    continue
                t = np.clip(np.dot(cc - ca, ab) / (n * n), 0, 1)
                if np.linalg.norm(cc - (ca + t * ab)) <= 0.1 * n:
                    out.add(("between", c, a, b))
    return out


# ---------------------------------------------------------------------------


class TestSynth:
    def test_minimal_config(self):
        cfg = SceneConfig(rooms=1, objects_per_room=2)
        s = synth_scene(cfg, 7)
        assert len(s.rooms) == 1
        assert len(s.objects) == 2
        for o in s.objects:
            assert s.rooms[0].floor_box.contains_box(o.world_bbox(), tol=1e-9)

    def test_determinism_byte_identical(self):
        cfg = SceneConfig(rooms=(2, 3), objects_per_room=(2, 4))
        a = synth_scene(cfg, 42).dumps()
        b = synth_scene(cfg, 42).dumps()
        assert a == b

    def test_multiroom_containment_brute_force(self):
        cfg = SceneConfig(rooms=3, objects_per_room=5)
        s = synth_scene(cfg, 42)
        assert len(s.objects) == 15
        assert len(s.rooms) == 3
        for o in s.objects:
            bb = o.world_bbox()
            inside = [r.id for r in s.rooms if r.floor_box.contains_box(bb, tol=1e-9)]
            assert len(inside) == 1, f"object {o.id} in rooms {inside}"

    def test_object_ids_dense(self):
        s = synth_scene(SceneConfig(rooms=2, objects_per_room=(2, 4)), 3)
        assert [o.id for o in s.objects] == list(range(len(s.objects)))

    def test_overlap_bound(self):
        s = synth_scene(SceneConfig(rooms=(1, 2), objects_per_room=(4, 6)), 11)
        for a in s.objects:
            for b in s.objects:
                if a.id >= b.id:
                    continue
                ov = a.world_bbox().overlap_volume(b.world_bbox())
                assert ov <= 0.05 * min(a.world_bbox().volume, b.world_bbox().volume) + 1e-12

    def test_infeasible_names_room(self):
        # a room too small for large furniture placements must fail loudly
        cfg = SceneConfig(rooms=1, objects_per_room=8, room_size=(3.2, 3.3),
                          concepts=["bed", "sofa", "wardrobe", "piano", "bathtub",
                                    "counter", "refrigerator", "bookshelf", "cabinet",
                                    "desk", "table", "dresser"],
                          min_gap=1.5, max_place_attempts=50)
        with pytest.raises(SceneInfeasibleError, match="room 0"):
            synth_scene(cfg, 0)

    def test_relations_vocabulary_and_arity(self):
        s = synth_scene(SceneConfig(rooms=2, objects_per_room=(3, 5)), 5)
        from voxreason.relations import RELATIONS

        ids = {o.id for o in s.objects}
        for t in s.relations:
            assert t[0] in RELATIONS
            assert all(a in ids for a in t[1:])
            assert len(t) == (4 if t[0] == "between" else 3)


class TestRasterize:
    def test_empty_scene_all_zero(self):
        s = make_scene([], walls=())
        g = rasterize(s, 16)
        assert g.occupancy.sum() == 0
        assert np.all(g.semantic_ids == -1)

    def test_single_box_matches_point_in_box_count(self):
        s = make_scene([("crate", (2.0, 2.0, 2.0), (1.0, 1.0, 1.0))],
                       bounds=((0, 0, 0), (4, 4, 4)))
        g = rasterize(s, 32)
        h = g.voxel_size
        count = 0
        for i in range(32):
            for j in range(32):
                for k in range(32):
                    p = (np.array([i, j, k]) + 0.5) * h
                    if np.all(np.abs(p - 2.0) <= 0.5):
                        count += 1
        assert int(g.occupancy.sum()) == count

    def test_two_disjoint_boxes_two_ids(self):
        s = make_scene([
            ("crate", (1.0, 1.0, 1.0), (0.8, 0.8, 0.8)),
            ("bench", (3.0, 3.0, 1.0), (0.8, 0.8, 0.8)),
        ])
        g = rasterize(s, 24)
        ids = set(np.unique(g.semantic_ids)) - {-1}
        assert ids == {0, 1}

    def test_brute_force_oracle_full_grid(self):
        cfg = SceneConfig(rooms=1, objects_per_room=3)
        s = synth_scene(cfg, 9)
        g = rasterize(s, 24)
        sem, h = brute_rasterize_semantic(s, 24)
        assert g.dims == sem.shape
        assert np.array_equal(g.semantic_ids, sem)

    def test_monotone_in_objects(self):
        cfg = SceneConfig(rooms=1, objects_per_room=4)
        s = synth_scene(cfg, 13)
        full = int(rasterize(s, 32).occupancy.sum())
        s2 = SceneGraph.from_json(s.to_json())
        s2.objects = s2.objects[:-1]
        fewer = int(rasterize(s2, 32).occupancy.sum())
        assert fewer <= full

    def test_tie_break_later_object_wins(self):
        s = make_scene([
            ("crate", (2.0, 2.0, 2.0), (1.0, 1.0, 1.0)),
            ("bench", (2.4, 2.0, 2.0), (1.0, 1.0, 1.0)),
        ])
        g = rasterize(s, 32)
        # overlapping region voxels carry id 1
        h = g.voxel_size
        p = np.array([2.3, 2.0, 2.0])
        idx = tuple((p / h).astype(int))
        assert g.semantic_ids[idx] == 1

    def test_semantic_iff_density(self):
        s = synth_scene(SceneConfig(rooms=2, objects_per_room=(2, 3)), 21)
        g = rasterize(s, 32)
        assert np.all((g.semantic_ids >= 0) == (g.occupancy > 0))

    def test_resolution_bounds(self):
        s = make_scene([])
        with pytest.raises(ValueError):
            rasterize(s, 8)
        with pytest.raises(ValueError):
            rasterize(s, 512)


class TestRelationOracle:
    def test_stacked_pair_above_below(self):
        s = make_scene([
            ("table", (2.0, 2.0, 0.4), (1.2, 0.8, 0.8)),
            ("lamp", (2.0, 2.0, 1.05), (0.3, 0.3, 0.5)),
        ])
        rels = relation_oracle(s, resolution=32)
        assert ("above", 1, 0) in rels
        assert ("below", 0, 1) in rels
        assert ("on the top of", 1, 0) in rels

    def test_inside_detected(self):
        s = make_scene([
            ("crate", (2.0, 2.0, 1.0), (2.0, 2.0, 2.0)),
            ("lamp", (2.0, 2.0, 0.5), (0.4, 0.4, 0.6)),
        ])
        rels = relation_oracle(s, resolution=32)
        assert ("inside", 1, 0) in rels

    def test_antisymmetry_properties(self):
        s = synth_scene(SceneConfig(rooms=2, objects_per_room=(3, 5)), 17)
        rels = s.relations
        for t in rels:
            if t[0] == "above":
                assert ("below", t[2], t[1]) in rels
            if t[0] == "on the left":
                assert ("on the right", t[2], t[1]) in rels

    def test_matches_second_implementation(self):
        for seed in (3, 17):
            s = synth_scene(SceneConfig(rooms=(1, 2), objects_per_room=(3, 6),
                                        resolution=48), seed)
            ours = relation_oracle(s, resolution=48)
            theirs = second_relation_implementation(s, resolution=48)
            assert ours == theirs


class TestTrajectory:
    def test_empty_scene_keeps_twelve(self):
        s = make_scene([], bounds=((0, 0, 0), (4, 4, 3)))
        poses = sample_trajectory(s, 1, 3, resolution=16)
        assert len(poses) <= 12
        yaws = sorted({p.yaw_deg for p in poses})
        assert yaws == [30.0 * k for k in range(12)]

    def test_pitch_range(self):
        s = synth_scene(SceneConfig(rooms=2, objects_per_room=(2, 3)), 8)
        poses = sample_trajectory(s, 3, 5)
        assert all(-10.0 <= p.pitch_deg <= 10.0 for p in poses)

    def test_determinism(self):
        s = synth_scene(SceneConfig(rooms=2, objects_per_room=(2, 3)), 8)
        a = sample_trajectory(s, 2, 5)
        b = sample_trajectory(s, 2, 5)
        assert len(a) == len(b)
        for p, q in zip(a, b):
            assert np.array_equal(p.position, q.position)
            assert (p.yaw_deg, p.pitch_deg) == (q.yaw_deg, q.pitch_deg)

    def test_positions_valid(self):
        s = synth_scene(SceneConfig(rooms=(2, 3), objects_per_room=(2, 4)), 12)
        poses = sample_trajectory(s, 4, 9)
        for p in poses:
            assert np.all(p.position >= s.bounds.lo)
            assert np.all(p.position <= s.bounds.hi)
            for o in s.objects:
                assert not o.world_bbox().contains_points(p.position[None, :])[0]

    def test_too_close_views_discarded(self):
        # camera jammed inside a huge box: every yaw ring pose hits matter
        # within 0.3 m, so each waypoint resamples until the retry cap
        s = make_scene([("crate", (2.0, 2.0, 1.5), (3.6, 3.6, 3.0))],
                       bounds=((0, 0, 0), (4, 4, 3)))
        with pytest.raises(TrajectoryError):
            sample_trajectory(s, 1, 0, resolution=32)


def test_scene_json_roundtrip():
    s = synth_scene(SceneConfig(rooms=2, objects_per_room=(2, 4)), 77)
    s2 = SceneGraph.from_json(__import__("json").loads(s.dumps()))
    assert s2.dumps() == s.dumps()
    assert s2.relations == s.relations
