import datetime as dt

import numpy as np
import pytest

from msdann import data as dm
from msdann import nn
from msdann.data import Dataset, EncounterRecord
from msdann.errors import ConfigurationError, ShapeError, TrainingDivergedError, UnsupportedOperationError
from msdann.evaluation import auroc
from msdann.strategies import (
    StrategyKind,
    TrainConfig,
    assemble,
    domain_predict,
    joint_gradients,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    train,
    train_strategy,
)
from msdann.synth import SyntheticConfig, generate

SMALL = dict(hidden_width=16, epochs=3, batch_size=16)


@pytest.fixture(scope="module")
def thirteen():
    ds, _ = generate(SyntheticConfig(vocab_size=6, seed=5, nuisance_strength=0.3, signal_strength=0.5))
    return dm.temporal_split(ds)[0]


@pytest.fixture(scope="module")
def two_sites():
    ds, _ = generate(SyntheticConfig(n_sites=2, counts=(60, 40), prevalence=(0.3, 0.4), vocab_size=5, seed=2))
    return dm.temporal_split(ds)[0]


class TestAssemble:
    def test_source_excludes_target(self, thirteen):
        batch = assemble(thirteen, "ER4", StrategyKind.SOURCE_BASELINE)
        assert set(batch.sites) == set(thirteen.site_registry) - {"ER4"}
        assert len(set(batch.sites)) == 12
        assert batch.d is None

    def test_target_only(self, thirteen):
        batch = assemble(thirteen, "ER4", "target-baseline")
        assert set(batch.sites) == {"ER4"} and batch.d is None

    def test_combined(self, thirteen):
        batch = assemble(thirteen, "ER4", "combined")
        assert batch.row_meta == thirteen.encounter_ids() and batch.d is None

    def test_multi_dann_has_13_domains(self, thirteen):
        batch = assemble(thirteen, "ER4", StrategyKind.MULTI_DANN)
        assert batch.d.shape == (len(thirteen), 13)
        assert np.all(batch.d[batch.sites == "ER4", 12] == 1)

    def test_single_dann_has_2_domains(self, thirteen):
        batch = assemble(thirteen, "ER4", StrategyKind.SINGLE_DANN)
        assert batch.d.shape == (len(thirteen), 2)

    def test_manifests_match_strategy_rows(self, thirteen):
        target = "ER7"
        ids = {r.encounter_id: r.er_id for r in thirteen.records}
        expected = {
            StrategyKind.MULTI_DANN: set(ids),
            StrategyKind.SINGLE_DANN: set(ids),
            StrategyKind.COMBINED_BASELINE: set(ids),
            StrategyKind.SOURCE_BASELINE: {e for e, s in ids.items() if s != target},
            StrategyKind.TARGET_BASELINE: {e for e, s in ids.items() if s == target},
        }
        cfg = TrainConfig(**{**SMALL, "epochs": 1})
        for kind, want in expected.items():
            model, _ = train_strategy(thirteen, target, kind, cfg)
            assert set(model.train_manifest) == want, kind

    def test_two_site_reduction(self, two_sites):
        multi = assemble(two_sites, "ER2", StrategyKind.MULTI_DANN)
        single = assemble(two_sites, "ER2", StrategyKind.SINGLE_DANN)
        assert np.array_equal(multi.x, single.x)
        assert np.array_equal(multi.d, single.d)

    def test_unknown(self, thirteen):
        with pytest.raises(ConfigurationError):
            assemble(thirteen, "ER99", "multi-dann")
        with pytest.raises(ConfigurationError):
            assemble(thirteen, "ER1", "triple-dann")


def _nets(rng, d_in=6, width=5, n_dom=3):
    g_f = nn.init_mlp(d_in, [width], width, int(rng.integers(1 << 30)), output_activation="relu")
    g_y = nn.init_mlp(width, [4], 2, int(rng.integers(1 << 30)))
    g_d = nn.init_mlp(width, [4], n_dom, int(rng.integers(1 << 30)))
    for m in (g_f, g_y, g_d):
        for layer in m.layers:
            layer.bias[:] = rng.normal(scale=0.2, size=layer.bias.shape)
    return g_f, g_y, g_d


class TestJointGradient:
    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
    def test_objective_decomposition(self, lam):
        rng = np.random.default_rng(int(lam * 10))
        g_f, g_y, g_d = _nets(rng)
        x = rng.normal(size=(9, 6))
        y = rng.integers(0, 2, 9).astype(float)
        d = np.eye(3)[rng.integers(0, 3, 9)]
        joint = joint_gradients(g_f, g_y, g_d, x, y, d, lam).grad_f
        only_y = joint_gradients(g_f, g_y, None, x, y, None, lam).grad_f
        only_d = joint_gradients(g_f, g_y, g_d, x, y, d, 1.0, label_mask=np.zeros(9, bool),
                                 reverse=False).grad_f
        for a, b, c in zip(joint.parameters(), only_y.parameters(), only_d.parameters()):
            np.testing.assert_allclose(a, b - lam * c, rtol=0, atol=1e-12)

    def test_reversal_is_exact_sign_flip(self):
        rng = np.random.default_rng(4)
        g_f, g_y, g_d = _nets(rng)
        x = rng.normal(size=(8, 6))
        y = rng.integers(0, 2, 8).astype(float)
        d = np.eye(3)[rng.integers(0, 3, 8)]
        none = np.zeros(8, bool)
        for lam in (0.5, 1.0, 2.0):
            rev = joint_gradients(g_f, g_y, g_d, x, y, d, lam, label_mask=none).grad_f
            helper = joint_gradients(g_f, g_y, g_d, x, y, d, lam, label_mask=none, reverse=False).grad_f
            for a, b in zip(rev.parameters(), helper.parameters()):
                assert np.array_equal(a, -b)

    def test_domain_head_gradient_is_not_reversed(self):
        rng = np.random.default_rng(5)
        g_f, g_y, g_d = _nets(rng)
        x = rng.normal(size=(8, 6))
        d = np.eye(3)[rng.integers(0, 3, 8)]
        res = joint_gradients(g_f, g_y, g_d, x, np.zeros(8), d, 1.0)

        def loss():
            return nn.domain_ce_loss(nn.predict(g_d, nn.predict(g_f, x)), d, "mean")

        from helpers import central_difference, max_relative_error

        numeric = central_difference(loss, g_d.parameters())
        assert max_relative_error(res.grad_d.parameters(), numeric) < 1e-4

    def test_domain_head_descends_with_frozen_extractor(self):
        rng = np.random.default_rng(6)
        g_f, g_y, g_d = _nets(rng, n_dom=4)
        x = rng.normal(size=(40, 6))
        d = np.eye(4)[rng.integers(0, 4, 40)]
        cfg = nn.OptimConfig(method="sgd", learning_rate=0.05)
        losses = []
        for _ in range(100):
            res = joint_gradients(g_f, g_y, g_d, x, np.zeros(40), d, 1.0)
            losses.append(res.l_d)
            nn.optim_step(g_d, res.grad_d, cfg)
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]


class TestTrain:
    def test_lambda_zero_matches_combined(self, thirteen):
        cfg = TrainConfig(**SMALL, lam=0.0, seed=3)
        dann, _ = train_strategy(thirteen, "ER2", StrategyKind.MULTI_DANN, cfg)
        base, _ = train_strategy(thirteen, "ER2", StrategyKind.COMBINED_BASELINE, cfg)
        for a, b in zip(dann.g_f.parameters() + dann.g_y.parameters(), base.g_f.parameters() + base.g_y.parameters()):
            assert a.tobytes() == b.tobytes()

    def test_m1_reduction(self, two_sites):
        cfg = TrainConfig(**SMALL, seed=1)
        _, log_m = train_strategy(two_sites, "ER2", StrategyKind.MULTI_DANN, cfg)
        _, log_s = train_strategy(two_sites, "ER2", StrategyKind.SINGLE_DANN, cfg)
        assert log_m.l_y == log_s.l_y and log_m.l_d == log_s.l_d

    def test_one_epoch_log(self, thirteen):
        _, log = train_strategy(thirteen, "ER1", "multi-dann", TrainConfig(**{**SMALL, "epochs": 1}))
        assert len(log) == 1 and len(log.l_d) == len(log.total) == len(log.domain_acc) == 1
        assert np.isfinite(log.l_y[0]) and np.isfinite(log.l_d[0])
        assert log.total[0] == pytest.approx(log.l_y[0] - log.l_d[0])

    def test_deterministic(self, thirteen):
        cfg = TrainConfig(**SMALL, seed=9)
        a, la = train_strategy(thirteen, "ER3", "single-dann", cfg)
        b, lb = train_strategy(thirteen, "ER3", "single-dann", cfg)
        assert la.l_y == lb.l_y
        for p, q in zip(a.g_d.parameters(), b.g_d.parameters()):
            assert p.tobytes() == q.tobytes()

    def test_separable_toy(self):
        """20 rows, concept 1 Present iff revisit: a logistic model separates them."""
        records = []
        for i in range(20):
            label = i % 2
            statuses = [0 if label else 2, i % 3, (i // 3) % 3]
            site = "A" if i < 12 else "B"
            records.append(EncounterRecord(f"e{i}", site, dt.date(2020, 5, 1), np.array(statuses), label))
        ds = Dataset(("C1", "C2", "C3"), records)
        batch = assemble(ds, "A", StrategyKind.TARGET_BASELINE)
        # oracle: a linear score on the C1 "Present" column already separates the classes
        assert auroc(batch.x[:, 0], batch.y) == 1.0
        cfg = TrainConfig(hidden_width=16, epochs=500, batch_size=12,
                          optim=nn.OptimConfig(method="sgd", learning_rate=0.05))
        model, log = train(batch, StrategyKind.TARGET_BASELINE, cfg, target_er="A")
        assert log.l_y[-1] < 0.1

    def test_source_labels_only(self, thirteen):
        cfg = TrainConfig(**SMALL, use_target_labels=False)
        model, log = train_strategy(thirteen, "ER1", "multi-dann", cfg)
        assert np.isfinite(log.l_y).all()

    def test_warmup_and_stratified_options(self, thirteen):
        cfg = TrainConfig(**SMALL, lambda_schedule="warmup", stratify_domains=True)
        assert cfg.lambda_at(0.0) == 0.0 and cfg.lambda_at(1.0) == pytest.approx(1.0, abs=1e-4)
        _, log = train_strategy(thirteen, "ER1", "multi-dann", cfg)
        assert len(log) == SMALL["epochs"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    @pytest.mark.parametrize("lr", [1e100, 1e300])
    def test_divergence_error(self, thirteen, lr):
        cfg = TrainConfig(hidden_width=16, epochs=3, batch_size=16,
                          optim=nn.OptimConfig(method="sgd", learning_rate=lr))
        with pytest.raises(TrainingDivergedError) as err:
            train_strategy(thirteen, "ER1", "multi-dann", cfg)
        assert err.value.epoch == 1

    def test_batch_larger_than_data(self, two_sites):
        with pytest.raises(ConfigurationError):
            train_strategy(two_sites, "ER2", "target-baseline", TrainConfig(batch_size=10_000))

    def test_dann_needs_domain_labels(self, thirteen):
        batch = assemble(thirteen, "ER1", "combined")
        with pytest.raises(ConfigurationError):
            train(batch, "multi-dann", TrainConfig(**SMALL), target_er="ER1")


class TestPredict:
    def test_probabilities(self, thirteen):
        model, _ = train_strategy(thirteen, "ER1", "multi-dann", TrainConfig(**{**SMALL, "epochs": 1}))
        x = assemble(thirteen, "ER1", "combined").x[:50]
        p = predict_proba(model, x)
        assert np.all((p >= 0) & (p <= 1))
        full = nn.predict(model.g_y, nn.predict(model.g_f, x))
        np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-12)
        dup = predict_proba(model, np.vstack([x[:1], x[:1]]))
        assert dup[0] == dup[1]
        np.testing.assert_allclose(domain_predict(model, x).sum(axis=1), 1.0, atol=1e-9)

    def test_untrained_domain_head_near_uniform(self, thirteen):
        batch = assemble(thirteen, "ER1", "multi-dann")
        model, _ = train(batch, "multi-dann", TrainConfig(**{**SMALL, "epochs": 1},
                                                          optim=nn.OptimConfig(learning_rate=1e-12)),
                         target_er="ER1")
        probs = domain_predict(model, batch.x)
        assert np.all(np.abs(probs.mean(axis=0) - 1 / 13) < 0.2)

    def test_shape_error(self, thirteen):
        model, _ = train_strategy(thirteen, "ER1", "target", TrainConfig(**{**SMALL, "epochs": 1}))
        with pytest.raises(ShapeError):
            predict_proba(model, np.zeros((2, 5)))

    def test_baseline_has_no_domain_head(self, thirteen):
        model, _ = train_strategy(thirteen, "ER1", "combined", TrainConfig(**{**SMALL, "epochs": 1}))
        assert model.g_d is None
        with pytest.raises(UnsupportedOperationError):
            domain_predict(model, np.zeros((1, model.input_dim)))


def test_checkpoint_round_trip(tmp_path, thirteen):
    model, _ = train_strategy(thirteen, "ER1", "multi-dann", TrainConfig(**{**SMALL, "epochs": 1}))
    back = load_checkpoint(save_checkpoint(model, tmp_path / "ckpt.json"))
    assert back.strategy is StrategyKind.MULTI_DANN and back.target_er == "ER1"
    assert back.train_manifest == model.train_manifest
    assert back.g_d.output_dim == 13
    for a, b in zip(model.g_f.parameters() + model.g_d.parameters(), back.g_f.parameters() + back.g_d.parameters()):
        assert a.tobytes() == b.tobytes()
    assert back.config == model.config


def test_train_log_csv(tmp_path, thirteen):
    _, log = train_strategy(thirteen, "ER1", "multi-dann", TrainConfig(**SMALL))
    lines = log.write_csv(tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_y,l_d,total,domain_acc"
    assert len(lines) == 1 + SMALL["epochs"]
