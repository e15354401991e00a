import numpy as np
import pytest

from noisyfl.datasets import make_synthetic_blobs
from noisyfl.localtrain import (
    TrainerConfig,
    coteaching_keep_fraction,
    small_loss_selection,
    train_local,
    train_local_coteaching,
)
from noisyfl.losses import backward
from noisyfl.models import LinearSoftmaxLayout, MLPLayout, ModelParams, init_params
from noisyfl.noise import apply_noise, symmetric_matrix


def blobs(num_classes=3, per_class=80, seed=0, separation=5.0):
    return make_synthetic_blobs(num_classes, per_class, 2, separation, seed=seed)


class TestTrainerConfig:
    def test_unknown_method(self):
        with pytest.raises(ValueError):
            TrainerConfig(method="divideup")

    def test_invalid_method_params(self):
        with pytest.raises(ValueError):
            TrainerConfig(method="gce", method_params={"alpha": 1.0})

    def test_valid_method_params(self):
        cfg = TrainerConfig(method="sce", method_params={"alpha": 0.2, "beta": 2.0})
        assert cfg.loss_kind == "sce"

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(lr=0.0),
            dict(momentum=1.0),
            dict(weight_decay=-0.1),
            dict(batch_size=0),
            dict(epochs=0),
        ],
    )
    def test_invalid_numerics(self, kwargs):
        with pytest.raises(ValueError):
            TrainerConfig(**kwargs)


class TestTrainLocal:
    def test_single_full_batch_step_matches_hand_computation(self):
        ds = blobs(per_class=20)
        layout = LinearSoftmaxLayout(dim=2, num_classes=3)
        params = init_params(layout, seed=1)
        cfg = TrainerConfig(method="ce", lr=0.1, momentum=0.0, weight_decay=0.01, batch_size=len(ds), epochs=1)
        trained, stats = train_local(ds, params, cfg, seed=3)

        from noisyfl.rng import stream

        order = stream(3, "shuffle", 0).permutation(len(ds))
        out = backward(params, ds.features[order], ds.labels[order], kind="ce", weight_decay=0.01)
        expected = params.values - 0.1 * out.grad
        assert np.array_equal(trained.values, expected)
        assert stats.epoch_losses == [out.value]

    def test_determinism(self):
        ds = blobs()
        layout = MLPLayout(dim=2, hidden=8, num_classes=3)
        params = init_params(layout, seed=2)
        cfg = TrainerConfig(method="gce", lr=0.05, epochs=2, batch_size=32)
        a, _ = train_local(ds, params, cfg, seed=9)
        b, _ = train_local(ds, params, cfg, seed=9)
        assert np.array_equal(a.values, b.values)

    def test_input_params_not_mutated(self):
        ds = blobs()
        layout = LinearSoftmaxLayout(dim=2, num_classes=3)
        params = init_params(layout, seed=2)
        snapshot = params.values.copy()
        train_local(ds, params, TrainerConfig(epochs=1), seed=0)
        assert np.array_equal(params.values, snapshot)

    @pytest.mark.parametrize("method", ["ce", "mixup", "sce", "gce", "mae"])
    def test_loss_decreases_on_separable_blobs(self, method):
        layout = MLPLayout(dim=2, hidden=16, num_classes=3)
        firsts, lasts = [], []
        for seed in range(5):
            ds = blobs(seed=seed)
            params = init_params(layout, seed=seed)
            cfg = TrainerConfig(method=method, lr=0.1, epochs=5, batch_size=64)
            _, stats = train_local(ds, params, cfg, seed=seed)
            firsts.append(stats.first_epoch_loss)
            lasts.append(stats.last_epoch_loss)
        assert np.mean(lasts) < np.mean(firsts)

    def test_mixup_with_stubbed_lambda_matches_ce(self):
        ds = blobs()
        layout = MLPLayout(dim=2, hidden=8, num_classes=3)
        params = init_params(layout, seed=4)
        ce_cfg = TrainerConfig(method="ce", lr=0.05, epochs=2, batch_size=32)
        mix_cfg = TrainerConfig(method="mixup", lr=0.05, epochs=2, batch_size=32)
        ce_params, _ = train_local(ds, params, ce_cfg, seed=7)
        mix_params, _ = train_local(ds, params, mix_cfg, seed=7, lam_sampler=lambda gen, alpha: 1.0)
        assert np.array_equal(ce_params.values, mix_params.values)

    def test_mixup_differs_from_ce_without_stub(self):
        ds = blobs()
        layout = LinearSoftmaxLayout(dim=2, num_classes=3)
        params = init_params(layout, seed=4)
        ce_params, _ = train_local(ds, params, TrainerConfig(method="ce", epochs=1), seed=7)
        mix_params, _ = train_local(ds, params, TrainerConfig(method="mixup", epochs=1), seed=7)
        assert not np.array_equal(ce_params.values, mix_params.values)

    def test_empty_dataset_rejected(self):
        from noisyfl.datasets import LabeledDataset

        empty = LabeledDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 3)
        params = init_params(LinearSoftmaxLayout(dim=2, num_classes=3), seed=0)
        with pytest.raises(ValueError):
            train_local(empty, params, TrainerConfig(), seed=0)

    def test_coteaching_rejected_here(self):
        ds = blobs()
        params = init_params(LinearSoftmaxLayout(dim=2, num_classes=3), seed=0)
        with pytest.raises(ValueError):
            train_local(ds, params, TrainerConfig(method="coteaching"), seed=0)


class TestCoteachingSchedule:
    def test_ramp(self):
        assert coteaching_keep_fraction(0, 0.4, 10) == 1.0
        assert coteaching_keep_fraction(5, 0.4, 10) == pytest.approx(0.8)
        assert coteaching_keep_fraction(10, 0.4, 10) == pytest.approx(0.6)

    def test_flat_after_ramp(self):
        for t in (10, 11, 50, 1000):
            assert coteaching_keep_fraction(t, 0.4, 10) == pytest.approx(0.6)

    def test_selection_example(self):
        losses = np.array([0.1, 9.0, 0.2, 8.0])
        selected = small_loss_selection(losses, 0.5)
        # brute-force oracle: sort (loss, index) pairs and take the smallest half
        oracle = sorted(range(4), key=lambda i: losses[i])[:2]
        assert set(selected.tolist()) == set(oracle) == {0, 2}

    def test_at_least_one_kept(self):
        assert small_loss_selection(np.array([3.0, 1.0]), 0.01).tolist() == [1]


class TestTrainCoteaching:
    def _noisy_blobs(self, seed=0):
        clean = blobs(per_class=60, seed=seed)
        noisy, _ = apply_noise(clean, symmetric_matrix(3, 0.3), seed=seed + 100)
        return noisy

    def test_zero_forget_rate_matches_independent_ce(self):
        ds = self._noisy_blobs()
        layout = MLPLayout(dim=2, hidden=8, num_classes=3)
        a0 = init_params(layout, seed=1)
        b0 = init_params(layout, seed=2)
        cfg = TrainerConfig(method="coteaching", lr=0.05, epochs=2, batch_size=32, method_params={"forget_rate": 0.0})
        a1, b1, _ = train_local_coteaching(ds, a0, b0, cfg, seed=5, round_t=3)
        ce_cfg = TrainerConfig(method="ce", lr=0.05, epochs=2, batch_size=32)
        a_ref, _ = train_local(ds, a0, ce_cfg, seed=5)
        b_ref, _ = train_local(ds, b0, ce_cfg, seed=5)
        assert np.array_equal(a1.values, a_ref.values)
        assert np.array_equal(b1.values, b_ref.values)

    def test_networks_diverge_and_update(self):
        ds = self._noisy_blobs()
        layout = LinearSoftmaxLayout(dim=2, num_classes=3)
        a0 = init_params(layout, seed=1)
        b0 = init_params(layout, seed=2)
        cfg = TrainerConfig(method="coteaching", lr=0.05, epochs=1, method_params={"forget_rate": 0.4})
        a1, b1, stats = train_local_coteaching(ds, a0, b0, cfg, seed=5, round_t=20)
        assert not np.array_equal(a1.values, a0.values)
        assert not np.array_equal(b1.values, b0.values)
        assert not np.array_equal(a1.values, b1.values)
        assert len(stats.epoch_losses) == 1

    def test_layout_mismatch(self):
        ds = self._noisy_blobs()
        a = init_params(LinearSoftmaxLayout(dim=2, num_classes=3), seed=0)
        b = init_params(MLPLayout(dim=2, hidden=4, num_classes=3), seed=0)
        with pytest.raises(ValueError):
            train_local_coteaching(ds, a, b, TrainerConfig(method="coteaching"), seed=0)

    def test_invalid_forget_rate(self):
        ds = self._noisy_blobs()
        a = init_params(LinearSoftmaxLayout(dim=2, num_classes=3), seed=0)
        b = init_params(LinearSoftmaxLayout(dim=2, num_classes=3), seed=1)
        cfg = TrainerConfig(method="coteaching", method_params={"forget_rate": 1.0})
        with pytest.raises(ValueError):
            train_local_coteaching(ds, a, b, cfg, seed=0)
