import math

import numpy as np
import pytest

from dlaseg.autograd import Tensor, backward, grad_check
from dlaseg.data import PhantomSpec, generate_phantom
from dlaseg.layers import softmax_channels
from dlaseg.network import CascadeNet
from dlaseg.training import (AdamW, TrainConfig, augment_patch, cascade_loss,
                             cross_entropy_masked, sample_patch,
                             schedule_value, train, write_history_csv)


def cross_entropy_reference(probs, labels, mask):
    """Scalar per-voxel loop: -sum(y_i log yhat_i) averaged over the mask."""
    n, k, h, w = probs.shape
    total = 0.0
    count = 0
    for ni in range(n):
        for hi in range(h):
            for wi in range(w):
                if mask[ni, hi, wi]:
                    p = min(max(probs[ni, labels[ni, hi, wi], hi, wi],
                                1e-7), 1.0)
                    total += -math.log(p)
                    count += 1
    return total / count


def random_probs(rng, shape):
    logits = rng.normal(size=shape)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        probs = np.zeros((1, 4, 3, 3))
        labels = np.random.default_rng(0).integers(0, 4, size=(1, 3, 3))
        for c in range(4):
            probs[0, c][labels[0] == c] = 1.0
        mask = np.ones((1, 3, 3), dtype=bool)
        loss = cross_entropy_masked(Tensor(probs), labels, mask)
        assert loss.item() <= 1.1e-7

    def test_uniform_prediction_is_ln_k(self):
        probs = np.full((2, 4, 5, 5), 0.25)
        labels = np.random.default_rng(1).integers(0, 4, size=(2, 5, 5))
        mask = np.ones((2, 5, 5), dtype=bool)
        loss = cross_entropy_masked(Tensor(probs), labels, mask)
        assert abs(loss.item() - math.log(4.0)) < 1e-9

    def test_matches_per_voxel_loop_oracle(self):
        rng = np.random.default_rng(2)
        probs = random_probs(rng, (2, 3, 6, 6))
        labels = rng.integers(0, 3, size=(2, 6, 6))
        mask = rng.random((2, 6, 6)) > 0.4
        ours = cross_entropy_masked(Tensor(probs), labels, mask).item()
        ref = cross_entropy_reference(probs, labels, mask)
        assert abs(ours - ref) < 1e-6

    def test_out_of_mask_corruption_changes_nothing(self):
        rng = np.random.default_rng(3)
        probs = random_probs(rng, (1, 4, 8, 8))
        labels = rng.integers(0, 4, size=(1, 8, 8))
        mask = rng.random((1, 8, 8)) > 0.5
        base = cross_entropy_masked(Tensor(probs), labels, mask).item()
        corrupted = probs.copy()
        corrupted[:, :, ~mask[0]] = random_probs(rng, (1, 4, 8, 8)
                                                 )[:, :, ~mask[0]]
        after = cross_entropy_masked(Tensor(corrupted), labels, mask).item()
        assert after == base

    def test_empty_mask_returns_zero_with_warning(self, caplog):
        probs = random_probs(np.random.default_rng(4), (1, 3, 4, 4))
        labels = np.zeros((1, 4, 4), dtype=np.int64)
        with caplog.at_level("WARNING"):
            loss = cross_entropy_masked(Tensor(probs), labels,
                                        np.zeros((1, 4, 4), dtype=bool))
        assert loss.item() == 0.0
        assert "empty mask" in caplog.text

    def test_label_out_of_range(self):
        probs = random_probs(np.random.default_rng(5), (1, 3, 2, 2))
        labels = np.full((1, 2, 2), 3)
        with pytest.raises(ValueError, match="labels"):
            cross_entropy_masked(Tensor(probs), labels,
                                 np.ones((1, 2, 2), dtype=bool))

    def test_gradient_through_softmax(self):
        rng = np.random.default_rng(6)
        logits = Tensor(rng.uniform(-1, 1, size=(1, 3, 4, 4)),
                        requires_grad=True)
        labels = rng.integers(0, 3, size=(1, 4, 4))
        mask = rng.random((1, 4, 4)) > 0.3

        def f(t):
            return cross_entropy_masked(softmax_channels(t), labels, mask)

        assert grad_check(f, logits) < 1e-6


class TestCascadeLoss:
    def _stage_probs(self, rng, k=4):
        return [Tensor(random_probs(rng, (1, k, 4, 4))) for _ in range(3)]

    def test_unit_losses_sum_to_1_7(self):
        labels = np.zeros((1, 4, 4), dtype=np.int64)
        mask = np.ones((1, 4, 4), dtype=bool)
        # prob exp(-1) on the true class everywhere makes each stage loss 1
        probs = np.full((1, 4, 4, 4), (1 - math.exp(-1)) / 3)
        probs[:, 0] = math.exp(-1)
        total, parts = cascade_loss([Tensor(probs.copy()) for _ in range(3)],
                                    labels, mask)
        for part in parts:
            assert abs(part.item() - 1.0) < 1e-12
        assert abs(total.item() - 1.7) < 1e-12

    def test_last_stage_carries_unit_weight(self):
        rng = np.random.default_rng(0)
        labels = np.zeros((1, 4, 4), dtype=np.int64)
        mask = np.ones((1, 4, 4), dtype=bool)
        perfect = np.zeros((1, 4, 4, 4))
        perfect[:, 0] = 1.0
        stage3 = random_probs(rng, (1, 4, 4, 4))
        total, parts = cascade_loss(
            [Tensor(perfect.copy()), Tensor(perfect.copy()), Tensor(stage3)],
            labels, mask)
        assert abs(total.item() - parts[2].item()) < 1e-6

    def test_weighted_sum_recomputation(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 4, size=(1, 4, 4))
        mask = np.ones((1, 4, 4), dtype=bool)
        stage_probs = self._stage_probs(rng)
        total, parts = cascade_loss(stage_probs, labels, mask)
        recomputed = (0.3 * parts[0].item() + 0.4 * parts[1].item()
                      + 1.0 * parts[2].item())
        assert abs(total.item() - recomputed) < 1e-12

    def test_wrong_stage_count(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError, match="3 stages"):
            cascade_loss(self._stage_probs(rng)[:2],
                         np.zeros((1, 4, 4), dtype=np.int64),
                         np.ones((1, 4, 4), dtype=bool))


class TestSchedule:
    def test_paper_weight_decay_endpoints(self):
        assert schedule_value(0, 1e-3, 1e-6, 50, 170) == 1e-3
        assert schedule_value(49, 1e-3, 1e-6, 50, 170) == 1e-3
        assert abs(schedule_value(169, 1e-3, 1e-6, 50, 170) - 1e-6) < 1e-12

    def test_paper_learning_rate_endpoints(self):
        assert schedule_value(0, 1e-4, 5e-5, 50, 170) == 1e-4
        assert abs(schedule_value(169, 1e-4, 5e-5, 50, 170) - 5e-5) < 1e-12

    def test_cosine_midpoint_paper_profile_bracketed(self):
        # the paper span (50..169) is odd, so the two epochs straddling the
        # midpoint must bracket (start + end) / 2
        expected = (1e-3 + 1e-6) / 2
        lo = schedule_value(110, 1e-3, 1e-6, 50, 170)
        hi = schedule_value(109, 1e-3, 1e-6, 50, 170)
        assert lo < expected < hi

    def test_exact_midpoint_even_span(self):
        # warm 6, total 21: span 14, midpoint at epoch 13
        value = schedule_value(13, 1e-3, 1e-6, 6, 21)
        assert abs(value - (1e-3 + 1e-6) / 2) < 1e-12

    def test_monotone_non_increasing(self):
        values = [schedule_value(e, 1e-3, 1e-6, 6, 20) for e in range(20)]
        assert all(a >= b - 1e-18 for a, b in zip(values, values[1:]))

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            schedule_value(0, 1e-3, 1e-6, 20, 20)
        with pytest.raises(ValueError):
            schedule_value(25, 1e-3, 1e-6, 5, 20)


def adamw_reference(theta, grads, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """Scalar recurrences, one parameter, decoupled decay."""
    m = v = 0.0
    b1, b2 = betas
    trajectory = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps) - wd * theta
        trajectory.append(theta)
    return trajectory


class TestAdamW:
    def test_zero_gradient_zero_decay_is_noop(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        opt = AdamW([p])
        before = p.data.copy()
        opt.step(lr=1e-3, wd=0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_pure_decoupled_decay(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.zeros(1)
        AdamW([p]).step(lr=0.0, wd=0.1)
        np.testing.assert_allclose(p.data, [0.9])

    def test_five_step_trajectory_matches_scalar_oracle(self):
        grads = [0.3, -1.2, 0.8, 0.05, -0.4]
        p = Tensor(np.array([0.7]), requires_grad=True)
        opt = AdamW([p])
        ours = []
        for g in grads:
            p.grad = np.array([g])
            opt.step(lr=0.01, wd=0.004)
            ours.append(float(p.data[0]))
        ref = adamw_reference(0.7, grads, lr=0.01, wd=0.004)
        np.testing.assert_allclose(ours, ref, atol=1e-10)

    def test_skips_frozen_parameters(self):
        frozen = Tensor(np.array([5.0]), requires_grad=False)
        live = Tensor(np.array([5.0]), requires_grad=True)
        opt = AdamW([frozen, live])
        live.grad = np.array([1.0])
        opt.step(lr=0.1, wd=0.1)
        np.testing.assert_array_equal(frozen.data, [5.0])
        assert live.data[0] != 5.0

    def test_gaussian_kernel_untouched_by_steps(self):
        net = CascadeNet(in_channels=2, base_width=4, downsampler="gconv",
                         seed=0)
        kernel_bytes = net.stages[0].gauss.weights.tobytes()
        opt = AdamW(net.parameters())
        rng = np.random.default_rng(0)
        for _ in range(100):
            for p in opt.params:
                p.grad = rng.normal(size=p.data.shape).astype(p.data.dtype)
            opt.step(lr=1e-3, wd=1e-3)
        assert net.stages[0].gauss.weights.tobytes() == kernel_bytes

    def test_negative_lr_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError):
            AdamW([p]).step(lr=-1.0, wd=0.0)


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_start=1e-5, lr_end=1e-4)
        with pytest.raises(ValueError):
            TrainConfig(warm_epochs=20, epochs=20)
        with pytest.raises(ValueError):
            TrainConfig(cutout_max_fraction=1.0)

    def test_paper_profile(self):
        cfg = TrainConfig.paper_profile()
        assert cfg.epochs == 170
        assert cfg.warm_epochs == 50
        assert cfg.patch_extent == 120
        assert cfg.lr_start == 1e-4
        assert cfg.wd_start == 1e-3

    def test_text_round_trip(self):
        cfg = TrainConfig(epochs=12, warm_epochs=3, seed=99,
                          loss_weights=(0.3, 0.4, 1.0))
        back = TrainConfig.from_text(cfg.to_text())
        assert back == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_text("bogus = 3\n")


def training_volume(seed=0):
    return generate_phantom(PhantomSpec(
        extents=(2, 16, 32, 32), edema_radius_range=(3.0, 5.0),
        brain_intensity=(1.0, 1.0), edema_intensity=(1.5, 2.0),
        core_intensity=(0.6, 1.6), enhancing_intensity=(2.2, 1.2),
        seed=seed))


class TestSamplePatch:
    def test_always_contains_tumor(self):
        vol = training_volume(1)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            sample = sample_patch(vol, 12, rng)
            assert sample.contains_tumor
            assert (sample.labels > 0).any()

    def test_exact_extent_with_boundary_clamping(self):
        vol = training_volume(2)
        rng = np.random.default_rng(1)
        for _ in range(100):
            sample = sample_patch(vol, 15, rng)
            assert sample.patch.shape == (2, 15, 15)
            assert sample.labels.shape == (15, 15)
            assert sample.mask.shape == (15, 15)

    def test_single_voxel_tumor_always_covered(self):
        channels = np.ones((1, 4, 20, 20), dtype=np.float32)
        labels = np.zeros((4, 20, 20), dtype=np.uint8)
        labels[2, 7, 13] = 3
        vol = __import__("dlaseg").data.Volume(channels, labels)
        rng = np.random.default_rng(2)
        for _ in range(50):
            sample = sample_patch(vol, 6, rng)
            assert (sample.labels == 3).sum() == 1

    def test_no_tumor_falls_back_with_flag(self, caplog):
        channels = np.ones((1, 4, 12, 12), dtype=np.float32)
        vol = __import__("dlaseg").data.Volume(
            channels, np.zeros((4, 12, 12), dtype=np.uint8))
        with caplog.at_level("WARNING"):
            sample = sample_patch(vol, 8, np.random.default_rng(3))
        assert not sample.contains_tumor
        assert "no tumor" in caplog.text

    def test_patch_larger_than_plane_rejected(self):
        vol = training_volume(3)
        with pytest.raises(ValueError, match="extent"):
            sample_patch(vol, 64, np.random.default_rng(0))


class TestAugment:
    def _cfg(self, **overrides):
        base = dict(epochs=2, warm_epochs=0, steps_per_epoch=1)
        base.update(overrides)
        return TrainConfig(**base)

    def test_identity_configuration(self):
        cfg = self._cfg(intensity_shift=0.0, intensity_scale=(1.0, 1.0),
                        rotations=(0,), cutout_max_fraction=0.0)
        rng = np.random.default_rng(0)
        patch = np.random.default_rng(1).normal(size=(2, 10, 10)).astype(
            np.float32)
        labels = np.random.default_rng(2).integers(
            0, 4, size=(10, 10)).astype(np.uint8)
        out_patch, out_labels = augment_patch(patch, labels, cfg, rng)
        np.testing.assert_allclose(out_patch, patch, atol=1e-6)
        np.testing.assert_array_equal(out_labels, labels)

    def test_180_rotation_twice_is_identity(self):
        cfg = self._cfg(intensity_shift=0.0, intensity_scale=(1.0, 1.0),
                        rotations=(180,), cutout_max_fraction=0.0)
        patch = np.arange(32, dtype=np.float32).reshape(2, 4, 4)
        labels = np.arange(16).reshape(4, 4).astype(np.uint8)
        rng = np.random.default_rng(0)
        p1, l1 = augment_patch(patch, labels, cfg, rng)
        p2, l2 = augment_patch(p1, l1, cfg, rng)
        np.testing.assert_array_equal(p2, patch)
        np.testing.assert_array_equal(l2, labels)

    def test_label_histogram_invariant(self):
        cfg = self._cfg(rotations=(0,))  # intensity + cutout only
        rng = np.random.default_rng(5)
        patch = np.random.default_rng(6).normal(size=(3, 16, 16)).astype(
            np.float32)
        labels = np.random.default_rng(7).integers(
            0, 4, size=(16, 16)).astype(np.uint8)
        before = np.bincount(labels.ravel(), minlength=4)
        for _ in range(100):
            _, out_labels = augment_patch(patch, labels, cfg, rng)
            np.testing.assert_array_equal(
                np.bincount(out_labels.ravel(), minlength=4), before)

    def test_rotation_moves_mask_with_labels(self):
        cfg = self._cfg(intensity_shift=0.0, intensity_scale=(1.0, 1.0),
                        rotations=(90,), cutout_max_fraction=0.0)
        patch = np.zeros((1, 4, 4), dtype=np.float32)
        labels = np.zeros((4, 4), dtype=np.uint8)
        labels[0, 3] = 2
        mask = labels > 0
        _, out_labels, out_mask = augment_patch(patch, labels, cfg,
                                                np.random.default_rng(0),
                                                mask)
        np.testing.assert_array_equal(out_mask, out_labels > 0)

    def test_cutout_zeroes_images_only(self):
        cfg = self._cfg(intensity_shift=0.0, intensity_scale=(1.0, 1.0),
                        rotations=(0,), cutout_max_fraction=0.5)
        patch = np.ones((2, 20, 20), dtype=np.float32)
        labels = np.ones((20, 20), dtype=np.uint8)
        zeroed = False
        rng = np.random.default_rng(1)
        for _ in range(20):
            out_patch, out_labels = augment_patch(patch, labels, cfg, rng)
            np.testing.assert_array_equal(out_labels, labels)
            if (out_patch == 0).any():
                zeroed = True
                holes = out_patch == 0
                np.testing.assert_array_equal(holes[0], holes[1])
        assert zeroed


class TestTrainLoop:
    def _desk_config(self, **overrides):
        base = dict(epochs=2, warm_epochs=0, steps_per_epoch=2, batch_size=2,
                    patch_extent=16, seed=3)
        base.update(overrides)
        return TrainConfig(**base)

    def _dataset(self):
        return [training_volume(s) for s in range(3)]

    def test_deterministic_runs_bit_identical(self):
        cfg = self._desk_config()
        dataset = self._dataset()
        nets = []
        for _ in range(2):
            net = CascadeNet(in_channels=2, base_width=4, seed=cfg.seed)
            net, _ = train(dataset, net, cfg)
            nets.append(net)
        for (na, pa), (nb, pb) in zip(nets[0].named_parameters(),
                                      nets[1].named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_history_length_and_schedule_columns(self, tmp_path):
        cfg = self._desk_config(epochs=3, warm_epochs=1)
        net = CascadeNet(in_channels=2, base_width=4, seed=0)
        _, history = train(self._dataset(), net, cfg)
        assert len(history) == 3
        assert history[0].lr == cfg.lr_start
        assert abs(history[-1].lr - cfg.lr_end) < 1e-15
        path = tmp_path / "history.csv"
        write_history_csv(history, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,L,L1,L2,L3,lr,wd"
        assert len(lines) == 4

    def test_empty_dataset_rejected(self):
        net = CascadeNet(in_channels=2, base_width=4, seed=0)
        with pytest.raises(ValueError, match="empty"):
            train([], net, self._desk_config())
