"""``fairsound`` command line: synth, prepare, split, train, evaluate, report.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
The ``FAIRSOUND_SEED`` environment variable overrides the seed of
``split`` and ``train`` when ``--seed`` is not given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import core, ingest, synth, training
from .metrics import mean_sd

log = logging.getLogger("fairsound")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Configuration problem detected before any side effect."""


def _seed(arg: int | None, default: int) -> int:
    if arg is not None:
        return arg
    return core.env_seed(default)


def _read_manifest(path) -> core.Manifest:
    try:
        return core.read_manifest(path)
    except FileNotFoundError as exc:
        raise UsageError(f"manifest not found: {path}") from exc


def _read_split(path) -> training.FoldSplit:
    try:
        return training.FoldSplit.load(path)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read split {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.spec:
        try:
            spec = synth.SynthSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"bad synth spec: {exc}") from exc
    else:
        spec = synth.SynthSpec()
    overrides = {k: v for k, v in (("n_subjects", args.n_subjects), ("seed", args.seed),
                                   ("positive_fraction", args.positive_fraction)) if v is not None}
    try:
        spec = replace(spec, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest, reports = synth.generate_dataset(spec, args.out)
    out = Path(args.out)
    core.write_manifest(out / "manifest.jsonl", manifest)
    ingest.write_report(out / "screening.json", reports)
    print(f"wrote {spec.n_subjects} subjects to {out}; {len(manifest)} kept")
    return EXIT_OK


def cmd_prepare(args) -> int:
    if args.screener != "heuristic":
        raise UsageError(f"unknown screener {args.screener!r}")
    root = Path(args.root)
    if not root.is_dir():
        raise UsageError(f"not a directory: {root}")
    manifest, reports = ingest.build_manifest(root, ingest.HeuristicScreener(), args.trim_db)
    core.write_manifest(args.out_manifest, manifest)
    report_path = args.report or str(Path(args.out_manifest).with_suffix(".screening.json"))
    ingest.write_report(report_path, reports)
    summary = ingest.summarize_reports(reports)
    if len(manifest) == 0:
        log.warning("no subjects kept under %s", root)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = _read_manifest(args.manifest)
    test_size = float(args.test_size) if "." in args.test_size else int(args.test_size)
    try:
        split = training.split_folds(manifest, test_size, args.folds, _seed(args.seed, 0))
    except training.SplitError as exc:
        raise UsageError(str(exc)) from exc
    split.save(args.out)
    sizes = [len(f) for f in split.folds]
    print(f"test {len(split.test)}; folds {sizes}")
    return EXIT_OK


def _load_experiment(args) -> training.ExperimentConfig:
    cfg = training.load_config(args.config) if args.config else training.ExperimentConfig()
    overrides = {}
    if args.row:
        overrides["row"] = args.row
    if args.combination:
        overrides["combination"] = args.combination
    seed = _seed(args.seed, cfg.seed)
    if seed != cfg.seed:
        overrides["seed"] = seed
    return replace(cfg, **overrides) if overrides else cfg


def _train_one(cfg_dict: dict, manifest_path: str, split_dict: dict, trial: int, out: str) -> dict:
    cfg = training.ExperimentConfig.from_dict(cfg_dict)
    manifest = core.read_manifest(manifest_path)
    split = training.FoldSplit.from_dict(split_dict)
    store = training.FeatureStore(manifest, cfg.dsp, cfg.encoder)
    sub = Path(out) / cfg.experiment_id / f"trial_{trial}"
    _, report, _ = training.train_model(cfg, store, split, trial, sub)
    return report.to_dict()


def cmd_train(args) -> int:
    try:
        cfg = _load_experiment(args)
    except ValueError as exc:  # ConfigError included
        raise UsageError(str(exc)) from exc
    manifest = _read_manifest(args.manifest)
    split = _read_split(args.split)
    missing = set(split.test).union(*split.folds) - set(manifest.subject_ids)
    if missing:
        raise UsageError(f"split names {len(missing)} subjects absent from the manifest")
    trials = [args.trial] if args.trial else list(range(1, split.n_trials + 1))
    if any(not 1 <= k <= split.n_trials for k in trials):
        raise UsageError(f"trial must be in 1..{split.n_trials}")
    out = Path(args.out)
    jobs = (cfg.to_dict(), str(args.manifest), split.to_dict())
    if args.parallel_trials > 1 and len(trials) > 1:
        with ProcessPoolExecutor(args.parallel_trials) as pool:
            futures = [pool.submit(_train_one, *jobs, k, str(out)) for k in trials]
            reports = [f.result() for f in futures]
    else:
        store = training.FeatureStore(manifest, cfg.dsp, cfg.encoder)
        reports = []
        for k in trials:
            sub = out / cfg.experiment_id / f"trial_{k}"
            _, rep, _ = training.train_model(cfg, store, split, k, sub)
            reports.append(rep.to_dict())
    for r in reports:
        print(f"{r['experiment_id']} trial {r['trial_id']}: auc {r['auc']:.4f} "
              f"sens {r['sensitivity']:.4f} spec {r['specificity']:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        cfg, model, meta = training.load_trained(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    manifest = _read_manifest(args.manifest)
    split = _read_split(args.split)
    trial = args.trial or int(meta.get("trial", 1))
    store = training.FeatureStore(manifest, cfg.dsp, cfg.encoder)
    trainer = training.Trainer(cfg, store, trial, model=model)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    report = training.evaluate_trial(trainer, split, trial, out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def collect_runs(runs_dir) -> dict[str, list[dict]]:
    """``experiment_id -> [metrics.json docs]`` for every completed trial under ``runs_dir``."""
    runs: dict[str, list[dict]] = {}
    for path in sorted(Path(runs_dir).glob("*/trial_*/metrics.json")):
        doc = json.loads(path.read_text())
        doc["_dir"] = str(path.parent)
        runs.setdefault(doc["experiment_id"], []).append(doc)
    return runs


def summarize_runs(runs: dict[str, list[dict]]) -> list[dict]:
    rows = []
    for exp_id, docs in sorted(runs.items()):
        row = {"experiment_id": exp_id, "n_trials": len(docs),
               "trials": sorted(d["trial_id"] for d in docs),
               "n_instances": docs[0].get("n_instances"),
               "row": docs[0].get("config", {}).get("row")}
        for name in ("auc", "sensitivity", "specificity"):
            m, sd, single = mean_sd([d[name] for d in docs])
            row[name] = {"mean": m, "sd": sd}
            row["single_trial"] = single
        rows.append(row)
    return rows


def instance_sweep(rows: list[dict]) -> dict[str, list[tuple[int, float, float]]]:
    """Per matrix row with at least two distinct instance counts: ``(count, mean auc, sd)``
    using the best experiment at each count."""
    by_row: dict[str, dict[int, tuple[float, float]]] = {}
    for r in rows:
        if r["row"] is None or r["n_instances"] is None:
            continue
        best = by_row.setdefault(r["row"], {})
        cur = best.get(r["n_instances"])
        if cur is None or r["auc"]["mean"] > cur[0]:
            best[r["n_instances"]] = (r["auc"]["mean"], r["auc"]["sd"])
    return {
        row: [(n, m, sd) for n, (m, sd) in sorted(counts.items())]
        for row, counts in sorted(by_row.items()) if len(counts) > 1
    }


def _plot_roc(exp_id: str, docs: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    for d in sorted(docs, key=lambda d: d["trial_id"]):
        roc = np.genfromtxt(Path(d["_dir"]) / "roc.csv", delimiter=",", names=True)
        ax.plot(roc["fpr"], roc["tpr"], lw=1, label=f"trial {d['trial_id']} ({d['auc']:.3f})")
    ax.plot([0, 1], [0, 1], ls=":", c="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(exp_id, fontsize=9)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_report(args) -> int:
    runs_dir = Path(args.runs_dir)
    if not runs_dir.is_dir():
        raise UsageError(f"not a directory: {runs_dir}")
    runs = collect_runs(runs_dir)
    if not runs:
        log.warning("no completed trials under %s", runs_dir)
    out = Path(args.out) if args.out else runs_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = summarize_runs(runs)
    lines = [f"{'experiment':<34} {'n':>2}  {'AUC':>15}  {'sensitivity':>15}  {'specificity':>15}"]
    for r in rows:
        cells = "  ".join(f"{r[k]['mean']:.4f} ± {r[k]['sd']:.4f}" for k in ("auc", "sensitivity", "specificity"))
        flag = " *" if r["single_trial"] else ""
        lines.append(f"{r['experiment_id']:<34} {r['n_trials']:>2}  {cells}{flag}")
        expected = set(range(1, 6))
        if r["n_trials"] < 5:
            log.warning("%s: missing trials %s", r["experiment_id"], sorted(expected - set(r["trials"])))
    if any(r["single_trial"] for r in rows):
        lines.append("* single trial: sd reported as 0")
    sweep = instance_sweep(rows)
    for row, pts in sweep.items():
        lines.append("")
        lines.append(f"{row}: AUC vs number of instances")
        for n, m, sd in pts:
            lines.append(f"  {n:>2}  {m:.4f} ± {sd:.4f}")
    table = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(table)
    (out / "summary.json").write_text(json.dumps(
        {"experiments": rows, "instance_sweep": {k: [list(p) for p in v] for k, v in sweep.items()}},
        indent=1, sort_keys=True))
    for exp_id, docs in runs.items():
        _plot_roc(exp_id, docs, out / f"roc_{exp_id}.png")
        with open(out / f"roc_{exp_id}.csv", "w") as fh:
            fh.write("trial,threshold,fpr,tpr\n")
            for d in sorted(docs, key=lambda d: d["trial_id"]):
                for line in (Path(d["_dir"]) / "roc.csv").read_text().splitlines()[1:]:
                    fh.write(f"{d['trial_id']},{line}\n")
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairsound", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset in the ingest layout")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="SynthSpec JSON file")
    s.add_argument("--n-subjects", type=int)
    s.add_argument("--positive-fraction", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="screen a recording tree and write a manifest")
    s.add_argument("--root", required=True)
    s.add_argument("--out-manifest", required=True)
    s.add_argument("--report", help="screening report path (default: next to the manifest)")
    s.add_argument("--screener", default="heuristic")
    s.add_argument("--trim-db", type=float, default=60.0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("split", help="fixed test fold plus cross-validation folds")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--test-size", default=str(1 / 6), help="fraction (with a dot) or subject count")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train one or all trials of an experiment")
    s.add_argument("--config", help="experiment config JSON")
    s.add_argument("--row", choices=sorted(training.ROWS))
    s.add_argument("--combination")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--trial", type=int, help="1-based trial; default all")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="runs")
    s.add_argument("--parallel-trials", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="re-evaluate a checkpoint on its split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--trial", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="aggregate completed runs")
    s.add_argument("--runs-dir", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, training.ConfigError, core.ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (training.TrainingDiverged, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
