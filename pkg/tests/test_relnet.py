"""Relation networks: crops, forward/backward, training."""

import numpy as np
import pytest

from conftest import rel_err
from voxreason import kernels
from voxreason.executor import VoxelSet
from voxreason.relations import GeometricEvaluator
from voxreason.relnet import (
    InsufficientDataError, LearnedEvaluator, RelationNet, TrainConfig,
    TupleSample, backward, conv3d_batch_backward, conv3d_batch_forward,
    crop_resample, forward, forward_batch, train_relation, train_relations,
)


def _vs(indices, h=0.1, dims=(64, 64, 64)):
    idx = np.asarray(indices, dtype=np.int64)
    pos = (idx + 0.5) * h
    return VoxelSet(idx, pos, h, dims)


def _box_vs(lo, size, h=0.1):
    ranges = [np.arange(lo[a], lo[a] + size[a]) for a in range(3)]
    gi, gj, gk = np.meshgrid(*ranges, indexing="ij")
    return _vs(np.stack([gi.ravel(), gj.ravel(), gk.ravel()], axis=1), h)


class TestCropResample:
    def test_single_voxel_fills_crop(self):
        s = crop_resample((_vs([[5, 5, 5]]),), 8)
        assert s.channels.shape == (1, 8, 8, 8)
        assert s.channels.max() <= 1.0 + 1e-12
        # the voxel cube spans the whole crop minus the 10% margin: interior
        # cells are fully covered, boundary cells only fractionally
        assert s.channels[0, 4, 4, 4] > 0.999
        assert 0.0 < s.channels[0, 0, 0, 0] < 0.5

    def test_swap_order_permutes_channels(self):
        a = _box_vs((2, 2, 2), (3, 3, 3))
        b = _box_vs((10, 2, 2), (2, 2, 2))
        ab = crop_resample((a, b), 8)
        ba = crop_resample((b, a), 8)
        assert np.array_equal(ab.channels[0], ba.channels[1])
        assert np.array_equal(ab.channels[1], ba.channels[0])

    def test_translation_invariance(self):
        a = _box_vs((2, 2, 2), (3, 2, 2))
        b = _box_vs((8, 4, 2), (2, 2, 3))
        base = crop_resample((a, b), 16)
        a2 = _box_vs((12, 22, 32), (3, 2, 2))
        b2 = _box_vs((18, 24, 32), (2, 2, 3))
        moved = crop_resample((a2, b2), 16)
        assert np.max(np.abs(base.channels - moved.channels)) < 1e-9

    def test_empty_instance_rejected(self):
        with pytest.raises(ValueError):
            crop_resample((_vs(np.zeros((0, 3))),), 8)

    def test_volume_preserved_fractionally(self):
        a = _box_vs((2, 2, 2), (4, 4, 4))
        s = crop_resample((a,), 16)
        # total coverage equals instance volume / cell volume
        h = 0.1
        lo = a.positions.min(axis=0) - h / 2
        hi = a.positions.max(axis=0) + h / 2
        size = (hi - lo) * 1.2
        cellvol = np.prod(size / 16)
        want = (4 * 4 * 4) * h ** 3 / cellvol
        assert abs(s.channels.sum() - want) < 1e-6


class TestForwardBackward:
    def test_zero_weights_score_half(self):
        net = RelationNet.init("above", 2, seed=0)
        for k in net.params:
            net.params[k] = np.zeros_like(net.params[k])
        x = np.random.default_rng(0).uniform(size=(2, 16, 16, 16))
        assert forward(net, TupleSample(x)) == 0.5

    def test_bit_stable(self):
        net = RelationNet.init("above", 2, seed=1)
        x = np.random.default_rng(1).uniform(size=(2, 16, 16, 16))
        assert forward(net, TupleSample(x)) == forward(net, TupleSample(x))

    def test_score_in_open_interval(self):
        net = RelationNet.init("above", 2, seed=2)
        gen = np.random.default_rng(2)
        for _ in range(5):
            s = forward(net, TupleSample(gen.uniform(-3, 3, size=(2, 16, 16, 16))))
            assert 0.0 < s < 1.0

    def test_batched_conv_matches_naive_kernel(self):
        gen = np.random.default_rng(3)
        x = gen.normal(size=(3, 2, 8, 8, 8))
        w = gen.normal(size=(4, 2, 3, 3, 3))
        b = gen.normal(size=4)
        for stride in (1, 2):
            y = conv3d_batch_forward(x, w, b, stride)
            for i in range(3):
                naive = kernels.conv3d_forward(x[i], w, b, stride)
                assert np.max(np.abs(y[i] - naive)) < 1e-10

    def test_batched_conv_backward_matches_naive(self):
        gen = np.random.default_rng(4)
        x = gen.normal(size=(2, 3, 6, 6, 6))
        w = gen.normal(size=(5, 3, 3, 3, 3))
        b = gen.normal(size=5)
        y = conv3d_batch_forward(x, w, b, 2)
        dy = gen.normal(size=y.shape)
        dx, dw, db = conv3d_batch_backward(x, w, dy, 2)
        dw_n = np.zeros_like(w)
        db_n = np.zeros_like(b)
        for i in range(2):
            dxi, dwi, dbi = kernels.conv3d_backward(x[i], w, dy[i], 2)
            assert np.max(np.abs(dx[i] - dxi)) < 1e-10
            dw_n += dwi
            db_n += dbi
        assert np.max(np.abs(dw - dw_n)) < 1e-10
        assert np.max(np.abs(db - db_n)) < 1e-10

    def test_saturated_near_zero_gradient(self):
        net = RelationNet.init("above", 2, seed=5)
        net.params["bl"][0] = 30.0  # score ~= 1
        x = np.random.default_rng(5).uniform(size=(2, 16, 16, 16))
        loss, grads = backward(net, TupleSample(x), 1)
        assert loss < 1e-9
        assert max(np.max(np.abs(g)) for g in grads.values()) < 1e-9

    def test_gradients_match_finite_differences(self):
        net = RelationNet.init("above", 2, seed=6)
        gen = np.random.default_rng(6)
        x = gen.uniform(size=(2, 8, 8, 8))
        sample = TupleSample(x)
        label = 1
        _, grads = backward(net, sample, label)

        def loss_of():
            s = forward(net, sample)
            return -np.log(s) if label else -np.log(1 - s)

        eps = 1e-5
        worst = 0.0
        for key in ("w1", "b1", "w2", "b2", "w3", "b3", "wl", "bl"):
            p = net.params[key]
            flat = p.reshape(-1)
            gflat = grads[key].reshape(-1)
            sel = gen.choice(flat.size, size=min(10, flat.size), replace=False)
            for i in sel:
                flat[i] += eps
                hi = loss_of()
                flat[i] -= 2 * eps
                lo = loss_of()
                flat[i] += eps
                fd = (hi - lo) / (2 * eps)
                if abs(fd) > 1e-10 or abs(gflat[i]) > 1e-10:
                    worst = max(worst, rel_err(gflat[i], fd, floor=1e-6))
        assert worst < 1e-4, worst

    def test_channel_mismatch_rejected(self):
        net = RelationNet.init("above", 2, seed=0)
        with pytest.raises(ValueError):
            forward(net, TupleSample(np.zeros((3, 16, 16, 16))))


def _planted_above(n, seed, res=16, h=0.1):
    """Pairs of boxes; label 1 when A is stacked above B."""
    gen = np.random.default_rng(seed)
    samples, labels = [], []
    for i in range(n):
        label = int(gen.random() < 0.5)
        bx, by = int(gen.integers(4, 8)), int(gen.integers(4, 8))
        b = _box_vs((20, 20, 4), (bx, by, 4), h)
        ax, ay = int(gen.integers(2, 5)), int(gen.integers(2, 5))
        if label:
            off = (int(gen.integers(19, 22)), int(gen.integers(19, 22)), 9)
        else:
            off = (int(gen.integers(30, 40)), int(gen.integers(20, 30)),
                   int(gen.integers(2, 5)))
        a = _box_vs(off, (ax, ay, 3), h)
        samples.append(crop_resample((a, b), res))
        labels.append(label)
    return samples, labels


@pytest.fixture(scope="module")
def above_net():
    samples, labels = _planted_above(120, 1)
    return train_relation("above", samples, labels, TrainConfig(epochs=12, seed=0))


class TestTraining:
    def test_loss_decreases_on_toy_set(self):
        samples, labels = _planted_above(10, 0)
        net = RelationNet.init("above", 2, seed=0)
        from voxreason.relnet import _backward_batch, _PARAM_ORDER
        from voxreason.field import Adam

        x = np.stack([s.channels for s in samples])
        y = np.array(labels, dtype=float)
        opts = {k: Adam(net.params[k].shape) for k in _PARAM_ORDER}
        losses = []
        for _ in range(50):
            loss, grads = _backward_batch(net, x, y)
            losses.append(loss)
            for k in _PARAM_ORDER:
                opts[k].step(net.params[k], grads[k], 1e-3)
        assert losses[-1] < losses[0]

    def test_planted_above_separates(self, above_net):
        _, metrics = above_net
        assert metrics["val_accuracy"] >= 0.9

    def test_seed_reproducible(self):
        samples, labels = _planted_above(40, 2)
        cfg = TrainConfig(epochs=3, seed=4)
        n1, _ = train_relation("above", samples, labels, cfg)
        n2, _ = train_relation("above", samples, labels, cfg)
        for k in n1.params:
            assert np.array_equal(n1.params[k], n2.params[k])

    def test_insufficient_data(self):
        samples, labels = _planted_above(10, 3)
        labels = [1] * len(labels)
        with pytest.raises(InsufficientDataError):
            train_relation("above", samples, labels)
        nets, skipped = train_relations({"above": (samples, labels)}, strict=False)
        assert nets == {} and "above" in skipped

    def test_save_load_roundtrip(self, tmp_path):
        samples, labels = _planted_above(40, 5)
        net, _ = train_relation("above", samples, labels, TrainConfig(epochs=2))
        net.save(str(tmp_path))
        back = RelationNet.load(str(tmp_path), "above")
        x = samples[0]
        # f32 container round trip: scores agree to float precision
        assert abs(forward(net, x) - forward(back, x)) < 1e-6


class TestLearnedEvaluator:
    def test_fallback_records_missing(self):
        geo = GeometricEvaluator(5.0, 1.0, 10.0)
        ev = LearnedEvaluator({}, geo)
        a = _box_vs((2, 2, 8), (3, 3, 3))
        b = _box_vs((2, 2, 2), (4, 4, 3))
        s = ev.score((a, b), "above")
        assert s == geo.score((a, b), "above")
        assert "above" in ev.fallbacks

    def test_net_used_when_available(self, above_net):
        net, _ = above_net
        geo = GeometricEvaluator(5.0, 1.0, 10.0)
        ev = LearnedEvaluator({"above": net}, geo)
        a = _box_vs((20, 20, 9), (3, 3, 3))
        b = _box_vs((20, 20, 4), (6, 6, 4))
        assert ev.score((a, b), "above") > 0.5
        c = _box_vs((34, 24, 2), (3, 3, 3))
        assert ev.score((c, b), "above") < 0.5

    def test_size_comparatives_stay_geometric(self):
        geo = GeometricEvaluator(5.0, 1.0, 10.0)
        ev = LearnedEvaluator({}, geo)
        big = _box_vs((2, 2, 2), (6, 6, 6))
        small = _box_vs((20, 2, 2), (2, 2, 2))
        assert ev.score((big, small), "larger") > 0.5
        assert ev.score((small, big), "larger") < 0.5
