import math

import numpy as np
import pytest

from threatfuse import numerics as nx
from threatfuse.fusion import init_params
from threatfuse.training import (
    SAMPLER_CONFIDENCE,
    SAMPLER_UNIFORM,
    Adam,
    EarlyStopping,
    LossWeights,
    SampleSet,
    TrainConfig,
    TrainingDiverged,
    batch_loss,
    composite_loss,
    degrade,
    evaluate_loss,
    sample_batch,
    sampling_probabilities,
    train,
)

from conftest import MAIL, NET, sample_set, tiny_config


def logit(p):
    return math.log(p / (1 - p))


def toy(cfg, n=120, seed=0, signal=2.0, w=None):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    blocks = [rng.normal(size=(n, cfg.encoder(m).input_dim)) + signal * (2 * y[:, None] - 1) for m in cfg.modalities]
    w = rng.uniform(0, 1, n) if w is None else np.full(n, w)
    return sample_set(cfg, blocks, y, w)


class TestCompositeLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.z = rng.normal(size=5)
        self.ml = rng.normal(size=(5, 2))
        self.y = np.array([1, 0, 1, 1, 0])
        self.weights = LossWeights(0.3, 0.7)

    def test_w_one_drops_independence(self):
        p = composite_loss(self.z, self.y, np.ones(5), self.ml, self.weights, parts=True)
        assert float(p.total.value) == pytest.approx(np.mean(p.task + 0.3 * p.consistency), abs=1e-15)

    def test_w_zero_drops_consistency(self):
        p = composite_loss(self.z, self.y, np.zeros(5), self.ml, self.weights, parts=True)
        assert float(p.total.value) == pytest.approx(np.mean(p.task + 0.7 * p.independence), abs=1e-15)

    def test_scalar_hand_arithmetic(self):
        loss = composite_loss([logit(0.7)], [1], [0.5], [[logit(0.8), logit(0.6)]], LossWeights(0.1, 0.1))
        task = -math.log(0.7)
        cons = (0.8 - 0.6) ** 2
        ind = (-math.log(0.8) - math.log(0.6)) / 2
        assert float(loss.value) == pytest.approx(task + 0.1 * 0.5 * cons + 0.1 * 0.5 * ind, abs=1e-14)

    def test_single_modal_samples_skip_consistency(self):
        mask = np.array([[True, False]] * 5)
        p = composite_loss(self.z, self.y, np.ones(5), self.ml, self.weights, modality_mask=mask, parts=True)
        assert (p.consistency == 0).all()

    def test_rejects_bad_inputs(self):
        with pytest.raises(nx.NumericError):
            composite_loss([np.nan], [1], [0.5], [[0.0, 0.0]])
        with pytest.raises(ValueError):
            composite_loss([0.0], [2], [0.5], [[0.0, 0.0]])
        with pytest.raises(ValueError):
            composite_loss([0.0], [1], [1.5], [[0.0, 0.0]])

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-0.1, 0.1)


class TestSampler:
    def test_all_zero_is_uniform(self):
        assert np.allclose(sampling_probabilities(np.zeros(7), SAMPLER_CONFIDENCE), 1 / 7)

    def test_uniform_mode(self):
        assert np.allclose(sampling_probabilities(np.array([1.0, 0.0, 0.5]), SAMPLER_UNIFORM), 1 / 3)

    def test_single_heavy_pair_frequency(self):
        n, eps, draws = 10, 0.05, 100_000
        w = np.zeros(n)
        w[3] = 1.0
        p = sampling_probabilities(w, SAMPLER_CONFIDENCE)
        expected = (1 + eps) / (1 + eps + (n - 1) * eps)
        assert p[3] == pytest.approx(expected, abs=1e-15)
        rng = np.random.default_rng(0)
        hits = (rng.choice(n, size=draws, p=p) == 3).sum()
        sigma = math.sqrt(draws * expected * (1 - expected))
        assert abs(hits - draws * expected) < 3 * sigma

    def test_no_degrade_keeps_pairs(self):
        cfg = tiny_config()
        data = toy(cfg)
        batch = sample_batch(data, TrainConfig(batch_size=64, degrade_prob=0.0), np.random.default_rng(1))
        assert batch.mask.all()

    def test_degrade_keeps_one_modality_and_its_label(self):
        cfg = tiny_config()
        data = toy(cfg, n=200)
        data.ym = np.column_stack([data.y, 1 - data.y])
        out = degrade(data, 1.0, np.random.default_rng(2))
        assert (out.mask.sum(axis=1) == 1).all()
        assert (out.w == 0).all()
        kept = out.mask.argmax(axis=1)
        assert (out.y == data.ym[np.arange(200), kept]).all()
        for i, m in enumerate(cfg.modalities):
            assert (out.x[m][~out.mask[:, i]] == 0).all()

    def test_degrade_rate(self):
        cfg = tiny_config()
        out = degrade(toy(cfg, n=4000), 0.25, np.random.default_rng(3))
        assert (out.mask.sum(axis=1) == 1).mean() == pytest.approx(0.25, abs=0.03)

    def test_empty_set(self):
        cfg = tiny_config()
        with pytest.raises(ValueError):
            sample_batch(toy(cfg).take([]), TrainConfig(), np.random.default_rng(0))

    def test_concat(self):
        cfg = tiny_config()
        a, b = toy(cfg, 5, 1), toy(cfg, 3, 2)
        c = SampleSet.concat([a, a.take([]), b])
        assert len(c) == 8
        assert c.ids == a.ids + b.ids
        with pytest.raises(ValueError):
            SampleSet.concat([])


class TestEarlyStopping:
    def test_patience_one_worsening_from_epoch_two(self):
        stop = EarlyStopping(1)
        assert stop.update(1, 0.5) == (True, False)
        assert stop.update(2, 0.6) == (False, True)
        assert stop.best_epoch == 1

    def test_recovers_within_patience(self):
        stop = EarlyStopping(2)
        for epoch, loss in enumerate([1.0, 1.1, 0.9, 1.0, 1.0], start=1):
            improved, halt = stop.update(epoch, loss)
        assert stop.best_epoch == 3
        assert halt

    def test_bad_patience(self):
        with pytest.raises(ValueError):
            EarlyStopping(0)


class TestTrain:
    def test_config_validation(self):
        for kw in (dict(epochs=0), dict(learning_rate=-1), dict(early_stop_patience=0), dict(sampler="x"), dict(degrade_prob=2)):
            with pytest.raises(ValueError):
                TrainConfig(**kw)

    def test_zero_learning_rate(self):
        cfg = tiny_config()
        data = toy(cfg)
        store0 = init_params(cfg, 0)
        store, log = train(data, data, cfg, TrainConfig(epochs=3, learning_rate=0.0, early_stop_patience=5))
        for k in store0.names():
            assert np.array_equal(store[k], store0[k])
        assert len({e["val_loss"] for e in log}) == 1

    def test_separable_toy(self):
        cfg = tiny_config(dims={NET: 3, MAIL: 2}, embed_dim=4, hidden=4)
        data = toy(cfg, n=200, signal=1.5, seed=4)
        tcfg = TrainConfig(epochs=200, batch_size=32, learning_rate=0.02, early_stop_patience=200, degrade_prob=0.0)
        store, log = train(data, data, cfg, tcfg)
        _, acc, _ = evaluate_loss(cfg, store, data, tcfg.loss_weights)
        assert acc >= 0.99
        assert len(log) <= 200

    def test_early_stop_returns_best(self):
        cfg = tiny_config()
        tr, va = toy(cfg, 60, 1, signal=0.0), toy(cfg, 60, 2, signal=0.0)
        store, log = train(tr, va, cfg, TrainConfig(epochs=50, learning_rate=0.05, early_stop_patience=2))
        best = log[-1]["best_epoch"]
        assert len(log) <= 50
        loss, _, _ = evaluate_loss(cfg, store, va, LossWeights())
        if best:
            assert loss == pytest.approx(log[best - 1]["val_loss"], abs=1e-12)

    def test_log_fields_and_determinism(self):
        cfg = tiny_config()
        data = toy(cfg, 80)
        tcfg = TrainConfig(epochs=4, early_stop_patience=10, rng_seed=3)
        s1, l1 = train(data, data, cfg, tcfg)
        s2, l2 = train(data, data, cfg, tcfg)
        assert l1 == l2
        assert set(l1[0]) >= {"epoch", "train_loss", "val_loss", "val_accuracy", "lr"}
        assert l1[0]["optimizer"] == "adam"
        assert all(np.array_equal(s1[k], s2[k]) for k in s1.names())

    def test_divergence_reports_batch(self):
        cfg = tiny_config()
        data = toy(cfg, 40)
        with pytest.raises(TrainingDiverged) as info:
            train(data, data, cfg, TrainConfig(epochs=2, learning_rate=1e300))
        assert info.value.epoch >= 1

    def test_empty_sets_rejected(self):
        cfg = tiny_config()
        data = toy(cfg, 10)
        with pytest.raises(ValueError):
            train(data, data.take([]), cfg, TrainConfig())

    @pytest.mark.parametrize("seed", range(10))
    def test_small_step_decreases_batch_loss(self, seed):
        cfg = tiny_config(init_scale=0.5)
        store = init_params(cfg, seed)
        batch = toy(cfg, 32, seed)
        weights = LossWeights()
        leaves = store.bind()
        loss, _ = batch_loss(cfg, leaves, batch, weights)
        loss.backward()
        before = float(loss.value)
        for k in store.names():
            if leaves[k].grad is not None:
                store.values[k] -= 1e-3 * leaves[k].grad
        after = float(batch_loss(cfg, store.bind(), batch, weights)[0].value)
        assert after < before


def test_no_confidence_flag_forces_uniform_sampler():
    from threatfuse.fusion import Ablation

    tcfg = TrainConfig(ablation=Ablation.single("no_confidence_weighting")).effective()
    assert tcfg.sampler == SAMPLER_UNIFORM
    assert TrainConfig(ablation=Ablation.single("no_missing_modality_paths")).effective().degrade_prob == 0.0


def test_adam_first_step_size():
    from threatfuse.numerics import ParamStore

    store = ParamStore()
    store.add("p", [1.0, -2.0])
    store.grads["p"][...] = [0.5, -3.0]
    Adam(store, 0.1).step()
    assert store["p"].tolist() == pytest.approx([0.9, -1.9], abs=1e-8)
