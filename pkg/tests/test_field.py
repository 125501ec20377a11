"""Voxel grid interpolation, gradients, and fitting."""

import numpy as np
import pytest

from conftest import rel_err
from voxreason.field import (
    Adam, FieldModel, FitDivergence, OptimConfig, VoxelGrid, alignment_loss,
    alignment_terms, extract_occupied, fit_features, fit_radiance,
    feature_infill, softplus, softplus_inv, trilinear, trilinear_backprop,
    trilinear_many,
)
from voxreason.render import CameraPose, render_view


def grid_of(fn, dims, origin=(0, 0, 0), h=0.5, channels=1):
    g = VoxelGrid.zeros(dims, channels, np.array(origin, dtype=float), h)
    idx, centers = g.all_centers()
    vals = np.asarray(fn(centers))
    g.values[idx[:, 0], idx[:, 1], idx[:, 2]] = vals.reshape(len(idx), channels)
    return g


class TestTrilinear:
    def test_voxel_center_exact(self):
        gen = np.random.default_rng(0)
        g = VoxelGrid(gen.normal(size=(4, 5, 6, 2)), np.array([1.0, 2.0, 3.0]), 0.3)
        idx = np.array([2, 3, 4])
        center = g.centers(idx[None, :])[0]
        assert np.allclose(trilinear(g, center), g.values[2, 3, 4], atol=1e-12)

    def test_midpoint_is_mean(self):
        g = VoxelGrid.zeros((3, 3, 3), 1, np.zeros(3), 1.0)
        g.values[0, 0, 0, 0] = 2.0
        g.values[1, 0, 0, 0] = 6.0
        mid = np.array([1.0, 0.5, 0.5])  # halfway between centers of x=0 and x=1
        assert np.allclose(trilinear(g, mid), 4.0, atol=1e-12)

    def test_affine_reproduction(self):
        g = grid_of(lambda p: (p[:, 0] + 2 * p[:, 1] + 3 * p[:, 2])[:, None], (6, 6, 6))
        gen = np.random.default_rng(1)
        lo = g.origin + 0.5 * g.voxel_size
        hi = g.origin + (np.array(g.dims) - 0.5) * g.voxel_size
        pts = gen.uniform(lo, hi, size=(100, 3))
        vals, inside = trilinear_many(g, pts)
        want = pts[:, 0] + 2 * pts[:, 1] + 3 * pts[:, 2]
        assert inside.all()
        assert np.max(np.abs(vals[:, 0] - want)) < 1e-12

    def test_outside_is_zero_flagged(self):
        g = VoxelGrid(np.ones((3, 3, 3, 1)), np.zeros(3), 1.0)
        vals, inside = trilinear_many(g, np.array([[10.0, 0.5, 0.5]]))
        assert not inside[0]
        assert vals[0, 0] == 0.0


class TestTrilinearBackprop:
    def test_center_full_weight(self):
        g = VoxelGrid.zeros((4, 4, 4), 2, np.zeros(3), 1.0)
        center = g.centers(np.array([[1, 2, 3]]))[0]
        corners, grads = trilinear_backprop(g, center, np.array([1.0, 2.0]))
        total = {tuple(c): gr for c, gr in zip(corners, grads) if np.any(gr != 0)}
        assert set(total) == {(1, 2, 3)}
        assert np.allclose(total[(1, 2, 3)], [1.0, 2.0])

    def test_weights_sum_to_one(self):
        g = VoxelGrid.zeros((4, 4, 4), 1, np.zeros(3), 1.0)
        gen = np.random.default_rng(2)
        for _ in range(20):
            p = gen.uniform(0.5, 3.5, size=3)
            corners, grads = trilinear_backprop(g, p, np.array([1.0]))
            assert abs(grads.sum() - 1.0) < 1e-12

    def test_matches_finite_differences(self):
        gen = np.random.default_rng(3)
        g = VoxelGrid(gen.normal(size=(4, 4, 4, 2)), np.zeros(3), 0.7)
        up = gen.normal(size=2)
        p = gen.uniform(0.7, 2.0, size=3)
        corners, grads = trilinear_backprop(g, p, up)
        analytic = np.zeros_like(g.values)
        for c, gr in zip(corners, grads):
            analytic[tuple(c)] += gr
        eps = 1e-6
        for c in corners:
            for ch in range(2):
                g.values[tuple(c)][ch] += eps
                hi = float(trilinear(g, p) @ up)
                g.values[tuple(c)][ch] -= 2 * eps
                lo = float(trilinear(g, p) @ up)
                g.values[tuple(c)][ch] += eps
                fd = (hi - lo) / (2 * eps)
                assert rel_err(analytic[tuple(c)][ch], fd, floor=1e-6) < 1e-6


def _toy_model(dims=(8, 8, 8), feature_dim=4, seed=0, smooth=True):
    gen = np.random.default_rng(seed)
    model = FieldModel.init(dims, np.zeros(3), 1.0 / dims[0], feature_dim)
    if smooth:
        from scipy.ndimage import gaussian_filter

        model.density_raw.values[..., 0] = gaussian_filter(
            gen.normal(0.0, 2.0, size=dims), 1.5)
        model.color_raw.values[:] = gaussian_filter(
            gen.normal(0.0, 1.5, size=(*dims, 3)), (1.5, 1.5, 1.5, 0))
    else:
        model.density_raw.values[..., 0] = gen.normal(size=dims)
        model.color_raw.values[:] = gen.normal(size=(*dims, 3))
    return model


def _poses_around(dims, h, n=4, width=8, height=8, focal=8.0):
    center = np.array(dims) * h / 2
    radius = max(dims) * h * 1.6
    poses = []
    for k in range(n):
        ang = 2 * np.pi * k / n
        pos = center + radius * np.array([np.cos(ang), np.sin(ang), 0.1])
        yaw = np.rad2deg(np.arctan2(center[1] - pos[1], center[0] - pos[0]))
        poses.append(CameraPose(pos, yaw, 0.0, focal, width, height))
    return poses


class TestPhotometricGradients:
    def test_matches_finite_differences(self):
        from voxreason import kernels

        gen = np.random.default_rng(4)
        model = _toy_model(seed=4, smooth=False)
        ro = gen.uniform(-0.3, 1.3, size=(6, 3))
        rd = gen.normal(size=(6, 3))
        rd /= np.linalg.norm(rd, axis=1, keepdims=True)
        t0 = np.zeros(6)
        t1 = np.full(6, 2.5)
        jit = gen.uniform(size=(6, 12))
        gt = gen.uniform(size=(6, 3))
        bg = np.array([0.2, 0.1, 0.0])
        d = model.density_raw.values[..., 0]
        c = model.color_raw.values

        def loss_of():
            gd = np.zeros(d.shape)
            gc = np.zeros(c.shape)
            return kernels.fit_photometric(d, c, model.origin, model.voxel_size,
                                           ro, rd, t0, t1, jit, gt, bg, gd, gc, 1.0)

        gd = np.zeros(d.shape)
        gc = np.zeros(c.shape)
        kernels.fit_photometric(d, c, model.origin, model.voxel_size,
                                ro, rd, t0, t1, jit, gt, bg, gd, gc, 1.0)
        eps = 1e-5
        gen2 = np.random.default_rng(5)
        # density cells
        worst = 0.0
        for _ in range(60):
            i, j, k = gen2.integers(0, 8, size=3)
            d[i, j, k] += eps
            hi = loss_of()
            d[i, j, k] -= 2 * eps
            lo = loss_of()
            d[i, j, k] += eps
            fd = (hi - lo) / (2 * eps)
            if abs(fd) > 1e-9 or abs(gd[i, j, k]) > 1e-9:
                worst = max(worst, rel_err(gd[i, j, k], fd, floor=1e-7))
        assert worst < 1e-4, worst
        worst = 0.0
        for _ in range(60):
            i, j, k = gen2.integers(0, 8, size=3)
            ch = int(gen2.integers(0, 3))
            c[i, j, k, ch] += eps
            hi = loss_of()
            c[i, j, k, ch] -= 2 * eps
            lo = loss_of()
            c[i, j, k, ch] += eps
            fd = (hi - lo) / (2 * eps)
            if abs(fd) > 1e-9 or abs(gc[i, j, k, ch]) > 1e-9:
                worst = max(worst, rel_err(gc[i, j, k, ch], fd, floor=1e-7))
        assert worst < 1e-4, worst


class TestAlignment:
    def test_hand_computed_value(self):
        w = [0.5, 0.25]
        f = np.array([[1.0, -1.0], [2.0, 0.0]])
        teacher = np.zeros(2)
        loss, grad = alignment_terms(w, f, teacher)
        assert abs(loss - 1.5) < 1e-12
        assert np.allclose(grad, [[0.5, -0.5], [0.25, 0.0]])

    def test_zero_when_equal(self):
        f = np.tile(np.array([1.0, 2.0, 3.0]), (5, 1))
        loss, grad = alignment_terms(np.full(5, 0.2), f, f[0])
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_zero_weights_zero_loss(self):
        gen = np.random.default_rng(6)
        loss, grad = alignment_terms(np.zeros(4), gen.normal(size=(4, 3)), gen.normal(size=3))
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_gradient_matches_finite_differences(self):
        gen = np.random.default_rng(7)
        model = _toy_model(feature_dim=3, seed=7, smooth=False)
        model.feature.values[:] = gen.normal(size=model.feature.values.shape)
        teacher = gen.normal(size=3)
        ray = (np.array([-0.2, 0.45, 0.52]), np.array([1.0, 0.0, 0.0]))
        loss, grad = alignment_loss(model, ray, 16, teacher, seed=3)
        assert loss >= 0.0
        eps = 1e-6
        worst = 0.0
        f = model.feature.values
        live = np.argwhere(np.abs(grad) > 1e-9)
        assert live.shape[0] > 10
        for i, j, k, ch in live[:40]:
            f[i, j, k, ch] += eps
            hi, _ = alignment_loss(model, ray, 16, teacher, seed=3)
            f[i, j, k, ch] -= 2 * eps
            lo, _ = alignment_loss(model, ray, 16, teacher, seed=3)
            f[i, j, k, ch] += eps
            fd = (hi - lo) / (2 * eps)
            worst = max(worst, rel_err(grad[i, j, k, ch], fd, floor=1e-7))
        assert worst < 1e-4, worst


class TestFitRadiance:
    def _views(self, model, n=4, seed=0):
        src = model.radiance_source()
        return [render_view(src, p, k=48, seed=seed + 31 * i)
                for i, p in enumerate(_poses_around(model.dims, model.voxel_size, n))]

    def test_zero_iterations_identity(self):
        target = _toy_model(seed=9)
        views = self._views(target)
        cfg = OptimConfig(iterations=0, rays_per_batch=64, samples_per_ray=32)
        m = fit_radiance(views, cfg, target.dims, target.origin, target.voxel_size, 4)
        init = FieldModel.init(target.dims, target.origin, target.voxel_size, 4)
        assert np.array_equal(m.density_raw.values, init.density_raw.values)
        assert np.array_equal(m.color_raw.values, init.color_raw.values)

    def test_seed_determinism(self):
        target = _toy_model(seed=10)
        views = self._views(target)
        cfg = OptimConfig(iterations=30, rays_per_batch=64, samples_per_ray=24, seed=5)
        m1 = fit_radiance(views, cfg, target.dims, target.origin, target.voxel_size, 4)
        m2 = fit_radiance(views, cfg, target.dims, target.origin, target.voxel_size, 4)
        assert m1.loss_trace == m2.loss_trace
        assert np.array_equal(m1.density_raw.values, m2.density_raw.values)

    def test_requires_two_views(self):
        target = _toy_model(seed=11)
        views = self._views(target)[:1]
        with pytest.raises(ValueError):
            fit_radiance(views, OptimConfig(iterations=1), target.dims,
                         target.origin, target.voxel_size, 4)

    def test_divergence_error_carries_trace(self):
        target = _toy_model(seed=12)
        init = FieldModel.init(target.dims, target.origin, target.voxel_size, 4)
        src = init.radiance_source()
        views = [render_view(src, p, k=24, seed=i)
                 for i, p in enumerate(_poses_around(init.dims, init.voxel_size, 3))]
        for v in views:
            v.rgb = np.clip(v.rgb + 0.003, 0, 1)
        cfg = OptimConfig(step_size=3000.0, iterations=50, rays_per_batch=64,
                          samples_per_ray=24)
        with pytest.raises(FitDivergence) as exc:
            fit_radiance(views, cfg, init.dims, init.origin, init.voxel_size, 4)
        assert len(exc.value.trace) >= 2


class TestFitFeatures:
    def test_freezes_density_and_color(self):
        target = _toy_model(seed=13)
        views = TestFitRadiance()._views(target)
        for v in views:
            v.teacher_features = np.ones((*v.rgb.shape[:2], 4)) * 0.3
        cfg = OptimConfig(step_size=0.05, iterations=20, rays_per_batch=64,
                          samples_per_ray=24)
        before_d = target.density_raw.values.tobytes()
        before_c = target.color_raw.values.tobytes()
        fit_features(target, views, cfg)
        assert target.density_raw.values.tobytes() == before_d
        assert target.color_raw.values.tobytes() == before_c

    def test_loss_decreases(self):
        target = _toy_model(seed=14)
        views = TestFitRadiance()._views(target)
        gen = np.random.default_rng(3)
        for v in views:
            v.teacher_features = gen.uniform(-1, 1, size=4) * np.ones((*v.rgb.shape[:2], 4))
        cfg = OptimConfig(step_size=0.05, iterations=60, rays_per_batch=128,
                          samples_per_ray=24)
        fit_features(target, views, cfg, infill=False)
        assert target.feature_loss_trace[-1] <= target.feature_loss_trace[0]


class TestExtractOccupied:
    def test_vacuum_empty(self):
        m = FieldModel.init((4, 4, 4), np.zeros(3), 0.25, 2, init_sigma=0.01)
        assert extract_occupied(m).indices.shape[0] == 0

    def test_ground_truth_occupancy(self):
        m = FieldModel.init((4, 4, 4), np.zeros(3), 0.25, 2, init_sigma=0.01)
        m.density_raw.values[1, 2, 3, 0] = softplus_inv(5.0)
        m.density_raw.values[0, 0, 0, 0] = softplus_inv(5.0)
        occ = extract_occupied(m, 0.5)
        assert {tuple(i) for i in occ.indices} == {(0, 0, 0), (1, 2, 3)}

    def test_threshold_on_activated_density(self):
        m = FieldModel.init((4, 4, 4), np.zeros(3), 0.25, 1, init_sigma=0.49)
        assert extract_occupied(m, 0.5).indices.shape[0] == 0
        m2 = FieldModel.init((4, 4, 4), np.zeros(3), 0.25, 1, init_sigma=0.51)
        assert extract_occupied(m2, 0.5).indices.shape[0] == 4 ** 3


class TestFeatureInfill:
    def test_fills_interior_from_surface(self):
        m = FieldModel.init((6, 6, 6), np.zeros(3), 0.2, 3, init_sigma=2.0)
        m.feature.values[0, :, :] = np.array([1.0, 0.0, 0.0])
        feature_infill(m)
        assert np.allclose(m.feature.values[5, 5, 5], [1.0, 0.0, 0.0])


def test_adam_moves_toward_minimum():
    opt = Adam((1,))
    x = np.array([5.0])
    for _ in range(500):
        opt.step(x, 2 * x, 0.1)
    assert abs(x[0]) < 1e-2


def test_voxel_grid_validation():
    with pytest.raises(ValueError):
        VoxelGrid(np.ones((1, 4, 4, 1)), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        VoxelGrid(np.full((4, 4, 4, 1), np.nan), np.zeros(3), 1.0)
