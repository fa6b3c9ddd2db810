"""Curate a subject-per-folder recording tree into a manifest.

Layout::

    <root>/<subject_id>/metadata.json        {"covid_status": "..."}
    <root>/<subject_id>/cough-heavy.wav
    <root>/<subject_id>/breath-deep.wav
    ...                                      (one file per instance stem)

Shallow cough/breath recordings and any other files are ignored.
"""

from __future__ import annotations

import enum
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import (
    ALL_INSTANCES,
    AudioClip,
    EmptyAudioError,
    InstanceEntry,
    InstanceKind,
    Label,
    Manifest,
    SubjectEntry,
    load_clip,
)
from .dsp import EmptyAfterTrimError, trim_silence

log = logging.getLogger(__name__)

TARGET_EVENTS = frozenset({"cough", "breath", "speech"})
MIN_DURATION_SEC = 1.0


class Verdict(str, enum.Enum):
    KEPT = "kept"
    TOO_SHORT = "too_short"
    SILENT = "silent"
    WRONG_EVENT = "wrong_event"
    MISSING = "missing"


@dataclass
class ScreeningReport:
    subject_id: str
    verdicts: dict[InstanceKind, Verdict] = field(default_factory=dict)
    subject_verdict: str = "kept"
    reason: str = ""

    @property
    def kept(self) -> bool:
        return self.subject_verdict == "kept"

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "verdicts": {k.value: v.value for k, v in self.verdicts.items()},
            "subject_verdict": self.subject_verdict,
            "reason": self.reason,
        }


class EventScreener(Protocol):
    def classify(self, clip: AudioClip) -> list[tuple[str, float]]:
        """Event labels ranked by descending score."""
        ...


def _db(x: float) -> float:
    return 20.0 * np.log10(max(x, 1e-12))


class HeuristicScreener:
    """Signal-statistics stand-in for a pretrained audio-event classifier.

    A window is labelled ``silence`` below ``min_rms_dbfs``, ``tone`` when
    most frames are dominated by one narrow spectral peak, ``steady_noise``
    when the spectrum is flat and the loudness barely moves, and otherwise
    as a body sound (cough, breath and speech all ranked in the top three).
    """

    def __init__(self, min_rms_dbfs: float = -45.0, tone_concentration: float = 0.7,
                 noise_flatness: float = 0.3, steady_cv: float = 0.15, n_fft: int = 1024):
        self.min_rms_dbfs = min_rms_dbfs
        self.tone_concentration = tone_concentration
        self.noise_flatness = noise_flatness
        self.steady_cv = steady_cv
        self.n_fft = n_fft

    def features(self, x: np.ndarray) -> dict:
        n_fft = min(self.n_fft, 1 << int(np.floor(np.log2(max(x.shape[0], 2)))))
        hop = n_fft // 2
        frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
        power = np.abs(np.fft.rfft(frames * np.hanning(n_fft), axis=1)) ** 2 + 1e-20
        total = power.sum(axis=1)
        # power within +-2 bins of each frame's strongest bin
        peak = np.argmax(power, axis=1)
        csum = np.concatenate([np.zeros((power.shape[0], 1)), np.cumsum(power, axis=1)], axis=1)
        lo = np.clip(peak - 2, 0, power.shape[1])
        hi = np.clip(peak + 3, 0, power.shape[1])
        rows = np.arange(power.shape[0])
        concentration = (csum[rows, hi] - csum[rows, lo]) / total
        flatness = np.exp(np.mean(np.log(power), axis=1)) / np.mean(power, axis=1)
        frame_rms = np.sqrt(np.mean(frames**2, axis=1))
        cv = float(np.std(frame_rms) / max(np.mean(frame_rms), 1e-12))
        return {
            "rms_dbfs": _db(float(np.sqrt(np.mean(x**2)))),
            "concentration": float(np.median(concentration)),
            "flatness": float(np.median(flatness)),
            "envelope_cv": cv,
        }

    def classify(self, clip: AudioClip) -> list[tuple[str, float]]:
        f = self.features(clip.samples)
        if f["rms_dbfs"] < self.min_rms_dbfs:
            return [("silence", 1.0), ("steady_noise", 0.5), ("tone", 0.1), ("speech", 0.0)]
        if f["concentration"] > self.tone_concentration:
            return [("tone", f["concentration"]), ("music", 0.5), ("steady_noise", 0.1), ("speech", 0.0)]
        if f["flatness"] > self.noise_flatness and f["envelope_cv"] < self.steady_cv:
            return [("steady_noise", f["flatness"]), ("tone", 0.1), ("silence", 0.1), ("breath", 0.0)]
        breathiness = min(1.0, f["flatness"] / self.noise_flatness)
        ranked = [("speech", 1.0 - 0.5 * breathiness), ("breath", 0.5 * breathiness + 0.25), ("cough", 0.3)]
        ranked.sort(key=lambda kv: -kv[1])
        return ranked + [("tone", 0.0)]


def accepts_event(screener: EventScreener, clip: AudioClip, window_sec: float = 1.0,
                  top_k: int = 3, majority: float = 0.5) -> bool:
    """True when at least ``majority`` of ``window_sec`` windows rank a target event in the top ``top_k``."""
    win = max(1, int(round(window_sec * clip.sample_rate)))
    n = len(clip)
    starts = range(0, max(n - win, 0) + 1, win)
    hits = 0
    total = 0
    for s in starts:
        ranked = screener.classify(clip.with_samples(clip.samples[s : s + win]))
        top = {label for label, _ in ranked[:top_k]}
        hits += bool(top & TARGET_EVENTS)
        total += 1
    return hits >= majority * total


def screen_subject(subject_id: str, clips: Mapping[InstanceKind, AudioClip | None],
                   screener: EventScreener | None = None,
                   required: Sequence[InstanceKind] = ALL_INSTANCES,
                   min_duration: float = MIN_DURATION_SEC) -> ScreeningReport:
    """Judge each (already trimmed) clip; ``None`` marks a clip that was silent or unreadable."""
    screener = screener or HeuristicScreener()
    report = ScreeningReport(subject_id)
    for kind in required:
        if kind not in clips:
            report.verdicts[kind] = Verdict.MISSING
            continue
        clip = clips[kind]
        if clip is None:
            verdict = Verdict.SILENT
        elif clip.duration < min_duration:
            verdict = Verdict.TOO_SHORT
        elif not accepts_event(screener, clip):
            verdict = Verdict.WRONG_EVENT
        else:
            verdict = Verdict.KEPT
        report.verdicts[kind] = verdict
    bad = [k.value + ":" + v.value for k, v in report.verdicts.items() if v is not Verdict.KEPT]
    if bad:
        report.subject_verdict = "discarded"
        report.reason = ",".join(bad)
    return report


def parse_status(status: str) -> Label | None:
    """Binary label from a covid_status string; other categories return None."""
    s = str(status).strip().lower()
    if s in ("negative", "healthy"):
        return Label.NEGATIVE
    if s.startswith("positive"):
        return Label.POSITIVE
    return None


def _load_trimmed(path: Path, subject_id: str, kind: InstanceKind, label: Label,
                  trim_db: float) -> tuple[AudioClip | None, AudioClip | None]:
    try:
        clip = load_clip(path, subject_id, kind, label)
    except (OSError, EmptyAudioError) as exc:
        log.warning("%s/%s unreadable, counted as silent: %s", subject_id, kind.value, exc)
        return None, None
    try:
        return clip, trim_silence(clip, trim_db)
    except EmptyAfterTrimError:
        return clip, None


def build_manifest(root: str | os.PathLike, screener: EventScreener | None = None,
                   trim_db: float = 60.0, required: Sequence[InstanceKind] = ALL_INSTANCES):
    """Scan ``root`` and return ``(manifest, reports)`` with one report per subject folder."""
    screener = screener or HeuristicScreener()
    root = Path(root)
    records = []
    reports = []
    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []
    for sdir in subject_dirs:
        sid = sdir.name
        meta_path = sdir / "metadata.json"
        if not meta_path.exists():
            reports.append(ScreeningReport(sid, subject_verdict="discarded", reason="missing_metadata"))
            continue
        try:
            meta = json.loads(meta_path.read_text())
            label = parse_status(meta["covid_status"])
        except (json.JSONDecodeError, KeyError, TypeError):
            reports.append(ScreeningReport(sid, subject_verdict="discarded", reason="bad_metadata"))
            continue
        if label is None:
            reports.append(ScreeningReport(sid, subject_verdict="discarded", reason="label_excluded"))
            continue
        trimmed: dict[InstanceKind, AudioClip | None] = {}
        originals = {}
        for kind in required:
            path = sdir / f"{kind.file_stem}.wav"
            if not path.exists():
                continue
            orig, trimmed[kind] = _load_trimmed(path, sid, kind, label, trim_db)
            originals[kind] = (path, orig)
        report = screen_subject(sid, trimmed, screener, required)
        reports.append(report)
        if report.kept:
            instances = {
                kind: InstanceEntry(str(originals[kind][0].resolve()), trimmed[kind].duration,
                                    trimmed[kind].sample_rate)
                for kind in required
            }
            records.append(SubjectEntry(sid, label, instances))
    return Manifest(tuple(records)), reports


def summarize_reports(reports: Iterable[ScreeningReport]) -> dict:
    reports = list(reports)
    reasons: Counter = Counter()
    for r in reports:
        if not r.kept:
            if r.verdicts:
                for v in r.verdicts.values():
                    if v is not Verdict.KEPT:
                        reasons[v.value] += 1
            else:
                reasons[r.reason] += 1
    kept = sum(r.kept for r in reports)
    return {
        "scanned": len(reports),
        "kept": kept,
        "discarded": len(reports) - kept,
        "discard_reasons": dict(sorted(reasons.items())),
    }


def write_report(path: str | os.PathLike, reports: Iterable[ScreeningReport]) -> None:
    reports = list(reports)
    doc = {"summary": summarize_reports(reports), "subjects": [r.to_dict() for r in reports]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def duration_stats(manifest: Manifest) -> dict[InstanceKind, dict[str, float]]:
    """Min/max/median/mean post-trim duration per instance kind."""
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    by_kind: dict[InstanceKind, list[float]] = {}
    for rec in manifest:
        for kind, inst in rec.instances.items():
            by_kind.setdefault(kind, []).append(inst.duration_sec)
    return {
        kind: {
            "min": float(np.min(v)),
            "max": float(np.max(v)),
            "median": float(np.median(v)),
            "mean": float(np.mean(v)),
        }
        for kind, v in sorted(by_kind.items(), key=lambda kv: ALL_INSTANCES.index(kv[0]))
    }
