"""Training loop: steps, KDE refresh schedule, determinism, resume, target purity."""

import math

import numpy as np
import pytest

from engine import autograd as ag
from engine import trainer
from engine.config import DivergenceConfig, DivergenceKind
from engine.density import bandwidth_floor, build_kde, estimate_bandwidth
from engine.divergence import jsd, kde_to_discrete, shared_support
from engine.errors import EmptyDatasetError, UsageError
from engine.train_state import Optimizer
from engine.autograd import Tensor
from sources.dataset import Dataset, split
from warehouse.checkpoint import load_model, read_sidecar
from warehouse.loader import aggregates_consistent
from warehouse.schema import METRICS_COLUMNS, SIDECAR_STATE_KEYS, SUMMARY_COLUMNS


def _method(config, kind, weight=0.01):
    return config.with_changes(divergence=DivergenceConfig(kind=kind, weight=weight).model_dump())


def _state_bytes(path):
    state, _ = trainer.load_state(path)
    return state.model.parameter_bytes()


@pytest.fixture
def parts(tiny_config, source, target):
    return split(source, target, tiny_config.val_fraction, tiny_config.target_fraction, seed=0)


class TestOptimizer:
    def test_sgd_step(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.array([0.5, -1.0])
        Optimizer("sgd", lr=0.1, weight_decay=0.0).step({"p": p})
        assert np.allclose(p.data, [0.95, 2.1])

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([0.0])
        Optimizer("sgd", lr=0.1, weight_decay=0.5).step({"p": p})
        assert np.allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_adam_first_step_is_lr_sized(self):
        p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        p.grad = np.array([3.0, -0.01])
        Optimizer("adam", lr=0.01, weight_decay=0.0).step({"p": p})
        assert np.allclose(p.data, [0.99, 1.01], atol=1e-6)

    def test_unknown_kind(self):
        with pytest.raises(UsageError):
            Optimizer("lbfgs")


class TestStep:
    def test_step_moves_parameters(self, tiny_config, parts):
        train, _, pool = parts
        state = trainer.init_state(tiny_config, seed=0)
        trainer.refresh_kde(state, tiny_config, train, pool)
        before = state.model.parameter_bytes()
        idx = np.arange(4)
        metrics = trainer.train_step(state, tiny_config, train.image_batch(idx), train.mask_batch(idx),
                                     pool.image_batch(idx))
        assert state.model.parameter_bytes() != before
        assert math.isfinite(metrics["seg_loss"]) and metrics["grad_norm"] > 0
        assert 0.0 <= metrics["div_loss"] <= math.log(2) + 1e-12

    @pytest.mark.parametrize("kind", [DivergenceKind.KL, DivergenceKind.MMD_C, DivergenceKind.MMD_B])
    def test_other_divergences_step(self, tiny_config, parts, kind):
        config = _method(tiny_config, kind)
        train, _, pool = parts
        state = trainer.init_state(config, seed=0)
        if trainer.needs_banks(config):
            trainer.refresh_kde(state, config, train, pool)
        idx = np.arange(4)
        metrics = trainer.train_step(state, config, train.image_batch(idx), train.mask_batch(idx),
                                     pool.image_batch(idx))
        assert math.isfinite(metrics["div_loss"]) and metrics["div_loss"] >= -1e-12

    def test_none_has_no_divergence(self, tiny_config, parts):
        config = _method(tiny_config, DivergenceKind.NONE, 0.0)
        train, _, _ = parts
        state = trainer.init_state(config, seed=0)
        idx = np.arange(4)
        metrics = trainer.train_step(state, config, train.image_batch(idx), train.mask_batch(idx), None)
        assert math.isnan(metrics["div_loss"])
        assert not trainer.needs_banks(config)

    def test_jsd_needs_a_target_batch(self, tiny_config, parts):
        train, _, pool = parts
        state = trainer.init_state(tiny_config, seed=0)
        trainer.refresh_kde(state, tiny_config, train, pool)
        idx = np.arange(2)
        with pytest.raises(UsageError):
            trainer.train_step(state, tiny_config, train.image_batch(idx), train.mask_batch(idx), None)


class TestKdeRefresh:
    def test_banks_are_detached_and_sized(self, tiny_config, parts):
        train, _, pool = parts
        state = trainer.refresh_kde(trainer.init_state(tiny_config, seed=0), tiny_config, train, pool)
        dim = int(np.prod(tiny_config.unet.tap_shape("DEEPEST")))
        assert state.kde_source.samples.shape == (tiny_config.kde_samples, dim)
        assert not state.kde_source.samples.requires_grad
        assert state.sigma_src > 0 and state.sigma_tgt > 0 and state.mmd_sigma > 0

    def test_empty_pool(self, tiny_config, parts):
        train, _, pool = parts
        with pytest.raises(EmptyDatasetError):
            trainer.refresh_kde(trainer.init_state(tiny_config), tiny_config, train, pool.subset([]))

    def test_small_pool_is_drawn_with_replacement(self, tiny_config, parts):
        config = tiny_config.with_changes(kde_samples=20)
        train, _, pool = parts
        state = trainer.refresh_kde(trainer.init_state(config, seed=0), config, train, pool.subset([0, 1, 2]))
        assert state.kde_target.samples.shape[0] == 20
        assert state.kde_source.samples.shape[0] == 20
        dim = int(np.prod(config.unet.tap_shape("DEEPEST")))
        assert math.isfinite(state.sigma_tgt) and state.sigma_tgt > bandwidth_floor(dim)

    def test_repeated_rows_do_not_shrink_the_bandwidth(self, tiny_config, parts):
        config = tiny_config.with_changes(kde_samples=30)
        train, _, pool = parts
        three = pool.subset([0, 1, 2])
        state = trainer.refresh_kde(trainer.init_state(config, seed=0), config, train, three)
        features = trainer.features_at(trainer.frozen(state.model), three.image_batch(np.arange(3)), config.tap_name)
        assert state.sigma_tgt == pytest.approx(estimate_bandwidth(features.data), rel=1e-12)

    def test_single_image_pool_falls_back_to_the_floor(self, tiny_config, parts):
        train, _, pool = parts
        state = trainer.refresh_kde(trainer.init_state(tiny_config, seed=0), tiny_config, train, pool.subset([0]))
        dim = int(np.prod(tiny_config.unet.tap_shape("DEEPEST")))
        assert state.sigma_tgt == bandwidth_floor(dim)

    def test_same_seed_same_banks(self, tiny_config, parts):
        train, _, pool = parts
        a = trainer.refresh_kde(trainer.init_state(tiny_config, seed=0), tiny_config, train, pool)
        b = trainer.refresh_kde(trainer.init_state(tiny_config, seed=0), tiny_config, train, pool)
        assert a.kde_source.samples.data.tobytes() == b.kde_source.samples.data.tobytes()
        assert a.kde_target.samples.data.tobytes() == b.kde_target.samples.data.tobytes()
        assert (a.sigma_src, a.sigma_tgt, a.mmd_sigma) == (b.sigma_src, b.sigma_tgt, b.mmd_sigma)

    def test_target_pool_only_moves_the_target_bank(self, tiny_config, parts):
        train, _, pool = parts
        dimmed = Dataset([0.4 * image + 0.3 for image in pool.images], None, "target",
                         pool.manifest, pool.num_classes)
        a = trainer.refresh_kde(trainer.init_state(tiny_config, seed=0), tiny_config, train, pool)
        b = trainer.refresh_kde(trainer.init_state(tiny_config, seed=0), tiny_config, train, dimmed)
        assert a.sigma_src == b.sigma_src
        assert a.kde_source.samples.data.tobytes() == b.kde_source.samples.data.tobytes()
        assert a.sigma_tgt != b.sigma_tgt

    def test_refresh_schedule(self, tiny_config, parts, monkeypatch):
        config = tiny_config.with_changes(bw_refresh_epochs=2)
        train, _, pool = parts
        state = trainer.init_state(config, seed=0)
        refreshed = []
        original = trainer.refresh_kde
        monkeypatch.setattr(trainer, "refresh_kde",
                            lambda s, *a: refreshed.append(s.epoch) or original(s, *a))
        for epoch in range(5):
            trainer.run_epoch(state, config, train, pool)
            state.epoch = epoch + 1
        assert refreshed == [0, 2, 4]


class TestAdaptation:
    def test_jsd_pulls_shifted_features_onto_the_source(self):
        # 1-d features: the source bank stays put, a learned offset moves the target batch
        rng = np.random.default_rng(4)
        source = rng.normal(0.0, 0.5, size=(20, 1))
        raw_target = rng.normal(2.0, 0.5, size=(20, 1))
        source_kde = build_kde(source, 1.0)
        offset = Tensor(0.0, requires_grad=True)
        optimizer = Optimizer("sgd", lr=1.0, weight_decay=0.0)

        history = []
        for _ in range(50):
            offset.zero_grad()
            target = ag.add(Tensor(raw_target), offset)
            support = shared_support(Tensor(source), target)
            loss = jsd(kde_to_discrete(source_kde, support),
                       kde_to_discrete(build_kde(target.data, 1.0), support))
            history.append(loss.item())
            ag.backward(loss)
            optimizer.step({"offset": offset})

        slope = np.polyfit(np.arange(len(history)), history, 1)[0]
        assert slope < 0
        assert history[-1] < 0.5 * history[0]
        assert offset.item() < -1.0


class TestFit:
    def test_artifacts(self, tiny_config, source, target, tmp_path):
        config = tiny_config.with_changes(num_splits=2, epochs=2)
        artifacts = trainer.fit(config, source, target, run_dir=tmp_path / "run", progress=False)
        assert all(path.exists() for path in artifacts.checkpoints)
        assert list(artifacts.metrics.columns) == METRICS_COLUMNS
        assert len(artifacts.metrics) == 4
        assert list(artifacts.summary.columns) == SUMMARY_COLUMNS
        assert artifacts.summary["split"].tolist() == ["0", "1", "mean", "std"]
        assert aggregates_consistent(artifacts.summary, "split", ["best_val_loss", "final_seg_loss"])
        assert set(read_sidecar(artifacts.checkpoints[0])["state"]) == set(SIDECAR_STATE_KEYS)
        assert (tmp_path / "run" / "config.txt").read_text().startswith("#")

    def test_best_checkpoint_has_lowest_val_loss(self, tiny_config, source, target, tmp_path):
        config = tiny_config.with_changes(epochs=3)
        artifacts = trainer.fit(config, source, target, run_dir=tmp_path / "run", progress=False)
        metrics = artifacts.metrics
        best = int(metrics["val_loss"].idxmin())
        side = read_sidecar(artifacts.checkpoints[0])["state"]
        assert side["best_epoch"] == int(metrics.loc[best, "epoch"])
        assert side["best_val_loss"] == pytest.approx(metrics.loc[best, "val_loss"], rel=0, abs=0)

    def test_same_seed_same_bytes(self, tiny_config, source, target, tmp_path):
        a = trainer.fit(tiny_config, source, target, run_dir=tmp_path / "a", progress=False)
        b = trainer.fit(tiny_config, source, target, run_dir=tmp_path / "b", progress=False)
        assert load_model(a.checkpoints[0]).parameter_bytes() == load_model(b.checkpoints[0]).parameter_bytes()

    def test_zero_weight_jsd_equals_no_adapt(self, tiny_config, source, target, tmp_path):
        config = tiny_config.with_changes(epochs=2)
        zero = trainer.fit(_method(config, DivergenceKind.JSD, 0.0), source, target, tmp_path / "z", progress=False)
        none = trainer.fit(_method(config, DivergenceKind.NONE, 0.0), source, target, tmp_path / "n", progress=False)
        assert _state_bytes(zero.run_dir / "checkpoints" / "split0.state.dmck") == \
            _state_bytes(none.run_dir / "checkpoints" / "split0.state.dmck")

    def test_no_adapt_ignores_target_fraction(self, tiny_config, source, target, tmp_path):
        config = _method(tiny_config, DivergenceKind.NONE, 0.0)
        low = trainer.fit(config.with_changes(target_fraction=0.5), source, target, tmp_path / "lo", progress=False)
        full = trainer.fit(config, source, target, tmp_path / "hi", progress=False)
        assert load_model(low.checkpoints[0]).parameter_bytes() == load_model(full.checkpoints[0]).parameter_bytes()

    def test_target_masks_never_matter(self, tiny_config, source, target, tmp_path):
        with_masks = trainer.fit(tiny_config, source, target, tmp_path / "m", progress=False)
        without = trainer.fit(tiny_config, source, target.unlabeled(), tmp_path / "u", progress=False)
        assert load_model(with_masks.checkpoints[0]).parameter_bytes() == \
            load_model(without.checkpoints[0]).parameter_bytes()

    def test_resuming_a_finished_run_keeps_final_losses(self, tiny_config, source, target, tmp_path):
        config = tiny_config.with_changes(epochs=2)
        done = trainer.fit(config, source, target, tmp_path / "run", progress=False)
        again = trainer.fit(config, source, target, tmp_path / "run", progress=False, resume=True)
        last = done.metrics.iloc[-1]
        assert again.summary.loc[0, "final_seg_loss"] == last["seg_loss"]
        assert again.summary.loc[0, "final_div_loss"] == last["div_loss"]
        assert again.summary.loc[0, "final_seg_loss"] == done.summary.loc[0, "final_seg_loss"]
        assert len(again.metrics) == 2

    def test_resume_is_bit_exact(self, tiny_config, source, target, tmp_path):
        config = tiny_config.with_changes(epochs=3, bw_refresh_epochs=2)
        straight = trainer.fit(config, source, target, tmp_path / "straight", progress=False)
        trainer.fit(config.with_changes(epochs=1), source, target, tmp_path / "resumed", progress=False)
        resumed = trainer.fit(config, source, target, tmp_path / "resumed", progress=False, resume=True)
        state = "checkpoints/split0.state.dmck"
        assert _state_bytes(straight.run_dir / state) == _state_bytes(resumed.run_dir / state)
        assert resumed.metrics["epoch"].tolist() == [0, 1, 2]
        assert np.array_equal(resumed.metrics["val_loss"].to_numpy(), straight.metrics["val_loss"].to_numpy())

    def test_unlabeled_source_rejected(self, tiny_config, source, target, tmp_path):
        with pytest.raises(UsageError):
            trainer.fit(tiny_config, source.unlabeled(), target, tmp_path / "x", progress=False)

    def test_image_size_must_match(self, tiny_config, source, target, tmp_path):
        config = tiny_config.with_changes(unet={**tiny_config.unet.model_dump(), "input_size": 32})
        with pytest.raises(UsageError):
            trainer.fit(config, source, target, tmp_path / "x", progress=False)

    def test_run_name_is_stable(self, tiny_config):
        assert trainer.run_name(tiny_config) == trainer.run_name(tiny_config.with_changes())
        assert trainer.run_name(tiny_config).startswith("jsd_")
