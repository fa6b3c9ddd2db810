import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from fairsound.core import InstanceKind, Label
from fairsound.encoders import EncoderConfig
from fairsound.metrics import compute_auc
from fairsound.training import (
    BASELINE_GRID,
    BENCHMARK_GRID,
    ConfigError,
    ExperimentConfig,
    FeatureStore,
    FoldSplit,
    SplitError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    bce_loss,
    experiment_grid,
    load_config,
    load_trained,
    lr_at,
    resolve_combination,
    run_experiment,
    split_folds,
    train_model,
)

DESK = EncoderConfig(spec_embed_dim=32, spec_layers=1, spec_heads=2)


def labels(n, n_pos):
    return {f"s{i:05d}": Label.POSITIVE if i < n_pos else Label.NEGATIVE for i in range(n)}


class TestSplit:
    def test_reference_sizes(self):
        sp = split_folds(labels(1359, 340), test_size=226, n_folds=5, seed=0)
        assert len(sp.test) == 226
        sizes = sorted(len(f) for f in sp.folds)
        assert sum(sizes) == 1133
        assert set(sizes) == {226, 227}

    def test_disjoint_and_each_validated_once(self):
        lab = labels(12, 6)
        sp = split_folds(lab, test_size=0, n_folds=5, seed=3)
        seen = []
        for k in range(1, 6):
            train, val = sp.trial(k)
            assert not set(train) & set(val)
            assert set(train) | set(val) == set(lab)
            seen.extend(val)
        assert sorted(seen) == sorted(lab)

    def test_stratified_test(self):
        lab = labels(600, 150)
        sp = split_folds(lab, test_size=1 / 6, seed=1)
        assert len(sp.test) == 100
        assert sum(lab[s] is Label.POSITIVE for s in sp.test) == 25
        for f in sp.folds:
            pos = sum(lab[s] is Label.POSITIVE for s in f)
            assert abs(pos / len(f) - 0.25) < 0.02

    def test_deterministic(self, tmp_path):
        lab = labels(100, 30)
        a, b = split_folds(lab, seed=5), split_folds(lab, seed=5)
        assert a == b
        assert split_folds(lab, seed=6) != a
        a.save(tmp_path / "s.json")
        assert FoldSplit.load(tmp_path / "s.json") == a

    def test_too_few(self):
        with pytest.raises(SplitError):
            split_folds(labels(8, 3), n_folds=5)
        with pytest.raises(SplitError):
            split_folds(labels(10, 0), n_folds=2)
        with pytest.raises(SplitError):
            split_folds(labels(20, 10), test_size=18, n_folds=5)

    def test_bad_trial(self):
        sp = split_folds(labels(30, 15), seed=0)
        with pytest.raises(ValueError):
            sp.trial(0)
        with pytest.raises(ValueError):
            sp.trial(6)


class TestSchedule:
    cfg = TrainConfig(base_lr=1e-4, epochs=30, warmup_epochs=10)

    def test_warmup_midpoint(self):
        assert lr_at(5 * 36, 36, self.cfg) == pytest.approx(0.5e-4)
        assert lr_at(0, 36, self.cfg) == 0.0

    def test_peak_and_end(self):
        assert lr_at(10 * 36, 36, self.cfg) == pytest.approx(1e-4)
        assert lr_at(30 * 36, 36, self.cfg) == pytest.approx(0.0, abs=1e-18)
        assert lr_at(20 * 36, 36, self.cfg) == pytest.approx(0.5e-4)

    def test_monotone_decay(self):
        vals = [lr_at(s, 10, self.cfg) for s in range(100, 300)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestLoss:
    def test_perfect(self):
        y = np.array([1, 0, 1, 0])
        assert bce_loss(y.astype(float), y) < 1e-6

    def test_constant_half(self):
        y = np.array([1, 0, 0, 1, 1])
        assert abs(bce_loss(np.full(5, 0.5), y) - math.log(2)) < 1e-9


class TestConfig:
    def test_unknown_combination(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(combination="cough+sneeze")
        with pytest.raises(ConfigError):
            resolve_combination("nope")

    def test_baseline_needs_single_instance(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(row="BA2", combination="cough+breath")
        with pytest.raises(ConfigError):
            ExperimentConfig(row="XX", combination="heavy_cough")

    def test_grids(self):
        assert len(experiment_grid("BA1")) == 7 == len(BASELINE_GRID)
        assert len(experiment_grid("BE3")) == 5 == len(BENCHMARK_GRID)
        assert len(resolve_combination("speech")) == 5
        assert len(resolve_combination("cough+breath+speech")) == 7

    def test_row_properties(self):
        c = ExperimentConfig(row="BA2", combination="vowel_a")
        assert c.representation == "spectrogram" and not c.use_attention
        assert c.weight_decay == 1e-1
        assert c.experiment_id == "BA2-vowel_a"
        assert ExperimentConfig(row="BE3").weight_decay == 1e-3
        c2 = replace(c, train=TrainConfig(weight_decay=0.5))
        assert c2.weight_decay == 0.5

    def test_roundtrip(self, tmp_path):
        c = ExperimentConfig(row="BE2", combination="cough+speech", encoder=DESK,
                             train=TrainConfig(epochs=3, warmup_epochs=1), seed=9)
        d = json.loads(json.dumps(c.to_dict()))
        assert ExperimentConfig.from_dict(d) == c
        (tmp_path / "c.json").write_text(json.dumps(d))
        assert load_config(tmp_path / "c.json") == c
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**d, "bogus": 1})

    def test_train_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(base_lr=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=3, warmup_epochs=4)


@pytest.fixture(scope="module")
def tiny(tiny_dataset):
    _, manifest, _ = tiny_dataset
    store = FeatureStore(manifest)
    split = split_folds(manifest, test_size=4, n_folds=4, seed=0)
    return store, split


def quick(row="BA2", combination="heavy_cough", seed=0, epochs=3):
    return ExperimentConfig(row=row, combination=combination, encoder=DESK, seed=seed,
                            train=TrainConfig(epochs=epochs, warmup_epochs=1, batch_size=8))


class TestTraining:
    def test_artifacts_and_best_checkpoint(self, tiny, tmp_path):
        store, split = tiny
        cfg = quick("BA2")
        result, report, trainer = train_model(cfg, store, split, 1, tmp_path)
        recs = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert len(recs) == 3
        assert all({"epoch", "train_loss", "val_auc", "lr"} <= set(r) for r in recs)
        best = max(r["val_auc"] for r in recs)
        assert result.best_val_auc == best
        assert recs[result.best_epoch]["val_auc"] == best
        # restored weights reproduce the best validation AUC
        _, val = split.trial(1)
        assert compute_auc(trainer.predict(val), trainer.labels(val)) == pytest.approx(best)

        cfg2, model, meta = load_trained(tmp_path / "checkpoint.fsck")
        assert cfg2 == cfg and meta["best_val_auc"] == best
        m = json.loads((tmp_path / "metrics.json").read_text())
        assert m["auc"] == pytest.approx(report.auc)
        assert m["n_instances"] == 1 and m["seed"] == 0
        rows = (tmp_path / "test_scores.csv").read_text().splitlines()
        assert rows[0] == "subject_id,score,label" and len(rows) == 1 + len(split.test)
        assert (tmp_path / "roc.csv").exists()

    @pytest.mark.parametrize("row,combo", [("BA1", "vowel_e"), ("BE1", "cough+breath"),
                                            ("BE2", "cough+breath"), ("BE3", "cough+breath")])
    def test_rows_train(self, tiny, row, combo):
        store, split = tiny
        result, report, _ = train_model(quick(row, combo, epochs=1), store, split, 2)
        assert np.isfinite(result.log[0]["train_loss"])
        assert 0.0 <= report.auc <= 1.0

    def test_deterministic(self, tiny):
        store, split = tiny
        a, ra, _ = train_model(quick(seed=4, epochs=2), store, split, 1)
        b, rb, _ = train_model(quick(seed=4, epochs=2), store, split, 1)
        assert a.log[0]["train_loss"] == b.log[0]["train_loss"]
        assert ra.to_dict() == rb.to_dict()

    def test_divergence_aborts(self, tiny, tmp_path, monkeypatch):
        store, split = tiny
        trainer = Trainer(quick(), store, 1)
        fwd = trainer.model.forward
        monkeypatch.setattr(trainer.model, "forward", lambda **kw: fwd(**kw) * float("nan"))
        train, val = split.trial(1)
        with pytest.raises(TrainingDiverged):
            trainer.fit(train, val, tmp_path / "log.jsonl")
        last = json.loads((tmp_path / "log.jsonl").read_text().splitlines()[-1])
        assert last["diverged"] is True and last["epoch"] == 0

    def test_run_experiment_summary(self, tiny, tmp_path):
        store, split = tiny
        res = run_experiment(quick(epochs=1), store, split, [1, 2], tmp_path)
        s = json.loads((tmp_path / "BA2-heavy_cough" / "summary.json").read_text())
        assert s["n_trials"] == 2 and s == json.loads(json.dumps(res.summary()))
        assert (tmp_path / "BA2-heavy_cough" / "trial_2" / "checkpoint.fsck").exists()


class TestFeatureStore:
    def test_sample_shapes_and_gain_invariance(self, tiny):
        store, _ = tiny
        sid = store.manifest.subject_ids[0]
        kinds = (InstanceKind.HEAVY_COUGH, InstanceKind.VOWEL_A)
        w, s, offs = store.sample(sid, kinds, "eval", want_wave=True, want_spec=True)
        assert w.shape[0] == 2 and s.shape[:2] == (2, 128)
        assert offs == [0, 0]
        w2, s2, _ = store.sample(sid, kinds, "eval", want_wave=True, want_spec=True)
        np.testing.assert_array_equal(s, s2)

    def test_train_sampling_seeded(self, tiny):
        store, _ = tiny
        sid = store.manifest.subject_ids[1]
        kinds = (InstanceKind.DEEP_BREATH,)
        a = store.sample(sid, kinds, "train", seed=1, epoch=0, want_spec=True)[1]
        b = store.sample(sid, kinds, "train", seed=1, epoch=0, want_spec=True)[1]
        c = store.sample(sid, kinds, "train", seed=1, epoch=1, want_spec=True)[1]
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
