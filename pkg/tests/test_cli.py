import json
import shutil

import pytest

from fairsound import cli
from fairsound.core import InstanceKind, read_manifest
from fairsound.encoders import EncoderConfig
from fairsound.training import ExperimentConfig, TrainConfig


@pytest.fixture
def tree(tiny_dataset, tmp_path):
    root, _, _ = tiny_dataset
    dst = tmp_path / "tree"
    shutil.copytree(root, dst, ignore=shutil.ignore_patterns("*.json*"))
    for meta in root.glob("*/metadata.json"):
        shutil.copy(meta, dst / meta.parent.name / "metadata.json")
    return dst


def quick_config(path, row="BA2", combination="heavy_cough"):
    cfg = ExperimentConfig(row=row, combination=combination,
                           encoder=EncoderConfig(spec_embed_dim=32, spec_layers=1, spec_heads=2),
                           train=TrainConfig(epochs=2, warmup_epochs=1, batch_size=8))
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_pipeline(tree, tmp_path, capsys):
    man = tmp_path / "m.jsonl"
    assert cli.main(["prepare", "--root", str(tree), "--out-manifest", str(man)]) == 0
    assert len(read_manifest(man)) == 24
    summary = json.loads(capsys.readouterr().out)
    assert summary["kept"] == 24 and summary["scanned"] == 24
    assert (tmp_path / "m.screening.json").exists()

    split = tmp_path / "split.json"
    assert cli.main(["split", "--manifest", str(man), "--out", str(split), "--test-size", "4",
                     "--folds", "4", "--seed", "1"]) == 0
    assert len(json.loads(split.read_text())["test"]) == 4

    cfg = quick_config(tmp_path / "cfg.json")
    runs = tmp_path / "runs"
    rc = cli.main(["train", "--config", str(cfg), "--manifest", str(man), "--split", str(split),
                   "--trial", "1", "--out", str(runs)])
    assert rc == 0
    trial = runs / "BA2-heavy_cough" / "trial_1"
    for name in ("checkpoint.fsck", "metrics.json", "roc.csv", "train_log.jsonl", "test_scores.csv"):
        assert (trial / name).exists()
    before = json.loads((trial / "metrics.json").read_text())

    assert cli.main(["evaluate", "--checkpoint", str(trial / "checkpoint.fsck"), "--manifest", str(man),
                     "--split", str(split), "--out", str(tmp_path / "ev")]) == 0
    after = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert after["auc"] == before["auc"] and after["threshold"] == before["threshold"]

    assert cli.main(["report", "--runs-dir", str(runs)]) == 0
    rep = runs / "report"
    assert (rep / "roc_BA2-heavy_cough.png").stat().st_size > 0
    assert "BA2-heavy_cough" in (rep / "summary.txt").read_text()
    assert "*" in (rep / "summary.txt").read_text()  # single-trial flag


def test_short_clip_subject_dropped(tree, tmp_path):
    from fairsound.core import load_clip, write_wav

    victim = sorted(p for p in tree.iterdir() if p.is_dir())[0]
    wav = victim / f"{InstanceKind.VOWEL_E.file_stem}.wav"
    clip = load_clip(wav)
    write_wav(wav, clip.samples[: clip.sample_rate // 2], clip.sample_rate)
    man = tmp_path / "m.jsonl"
    assert cli.main(["prepare", "--root", str(tree), "--out-manifest", str(man),
                     "--report", str(tmp_path / "r.json")]) == 0
    assert victim.name not in read_manifest(man).subject_ids
    subj = {r["subject_id"]: r for r in json.loads((tmp_path / "r.json").read_text())["subjects"]}
    assert "too_short" in subj[victim.name]["reason"]


def test_empty_tree(tmp_path, caplog):
    (tmp_path / "empty").mkdir()
    man = tmp_path / "m.jsonl"
    assert cli.main(["prepare", "--root", str(tmp_path / "empty"), "--out-manifest", str(man)]) == 0
    assert len(read_manifest(man)) == 0
    assert any("no subjects" in r.message for r in caplog.records)


def test_invalid_combination_writes_nothing(tmp_path, tiny_dataset):
    root, manifest, _ = tiny_dataset
    out = tmp_path / "runs"
    rc = cli.main(["train", "--row", "BE3", "--combination", "cough+sneeze", "--manifest",
                   str(root / "manifest.jsonl"), "--split", str(tmp_path / "nope.json"), "--out", str(out)])
    assert rc == 2
    assert not out.exists()


def test_usage_errors(tmp_path):
    assert cli.main(["bogus"]) == 2
    assert cli.main(["prepare", "--root", str(tmp_path / "missing"), "--out-manifest", str(tmp_path / "m")]) == 2
    assert cli.main(["split", "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "s")]) == 2
    assert cli.main(["report", "--runs-dir", str(tmp_path / "nowhere")]) == 2


def fake_runs(root, exp_id, aucs, n_instances=1, row="BA2"):
    for k, auc in enumerate(aucs, 1):
        d = root / exp_id / f"trial_{k}"
        d.mkdir(parents=True)
        doc = {"experiment_id": exp_id, "trial_id": k, "auc": auc, "sensitivity": 0.5,
               "specificity": 0.5, "threshold": 0.5, "n_instances": n_instances, "config": {"row": row}}
        (d / "metrics.json").write_text(json.dumps(doc))
        (d / "roc.csv").write_text("threshold,fpr,tpr\ninf,0,0\n0.5,0.5,0.5\n0,1,1\n")


def test_report_mean_sd(tmp_path):
    fake_runs(tmp_path, "BE3-speech", [0.80, 0.81, 0.82, 0.83, 0.84], n_instances=5, row="BE3")
    fake_runs(tmp_path, "BE3-cough+breath", [0.7], n_instances=2, row="BE3")
    assert cli.main(["report", "--runs-dir", str(tmp_path), "--out", str(tmp_path / "rep")]) == 0
    doc = json.loads((tmp_path / "rep" / "summary.json").read_text())
    rows = {r["experiment_id"]: r for r in doc["experiments"]}
    assert rows["BE3-speech"]["auc"]["mean"] == pytest.approx(0.82)
    assert rows["BE3-speech"]["auc"]["sd"] == pytest.approx(0.0158, abs=5e-5)
    single = rows["BE3-cough+breath"]
    assert single["auc"]["sd"] == 0.0 and single["single_trial"]
    assert doc["instance_sweep"]["BE3"] == [[2, 0.7, 0.0], [5, pytest.approx(0.82), pytest.approx(0.0158, abs=5e-5)]]
    text = (tmp_path / "rep" / "summary.txt").read_text()
    assert "0.8200 ± 0.0158" in text
    assert (tmp_path / "rep" / "roc_BE3-speech.csv").read_text().count("\n") == 1 + 5 * 3


def test_env_seed(monkeypatch):
    monkeypatch.setenv("FAIRSOUND_SEED", "17")
    assert cli._seed(None, 0) == 17
    assert cli._seed(3, 0) == 3
