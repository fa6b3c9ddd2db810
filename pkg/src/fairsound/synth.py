"""Synthetic multi-instance dataset with planted, partially informative cues.

Every subject gets seven clips built from a harmonic "voice" source, an
instance-specific loudness envelope and a noise floor. Positive subjects
carry each configured cue on each instance independently with
probability ``p``, so no single clip decides the label.

Cue types:

``tone``
    steady sinusoid above the harmonic band; visible as a line in the
    mel spectrogram.
``pulse``
    the harmonic source switches from random to aligned phases. The
    magnitude spectrum is unchanged, so a mel spectrogram barely sees it,
    while the waveform becomes a peaky pulse train.
``am``
    fast amplitude modulation of the source.
``noise_burst``
    rhythmic band-limited noise bursts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .core import ALL_INSTANCES, InstanceKind, Label, derive_rng, write_wav

CUE_TYPES = ("tone", "pulse", "am", "noise_burst")
HARMONIC_CUTOFF_HZ = 3000.0
TARGET_RMS = 0.05


@dataclass(frozen=True)
class CueSpec:
    type: str
    p: float
    strength: float = 1.0

    def __post_init__(self):
        if self.type not in CUE_TYPES:
            raise ValueError(f"unknown cue type {self.type!r}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("cue probability must be in (0, 1]")


def default_cues() -> dict[InstanceKind, tuple[CueSpec, ...]]:
    return {k: (CueSpec("tone", 0.2, 0.35), CueSpec("pulse", 0.3, 1.0)) for k in ALL_INSTANCES}


# tone frequencies sit between the harmonic cutoff and the 4 kHz Nyquist of the 8 kHz path
TONE_HZ = {k: 3250.0 + 80.0 * i for i, k in enumerate(ALL_INSTANCES)}


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 300
    positive_fraction: float = 0.25
    duration_sec: float = 4.0
    sample_rate: int = 16000
    noise_db: float = -30.0
    seed: int = 0
    cues: dict = field(default_factory=default_cues)

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must lie in [0, 1]")
        cues = {InstanceKind(k): tuple(v) for k, v in self.cues.items()}
        for kind, specs in cues.items():
            for c in specs:
                if c.type == "tone" and TONE_HZ[kind] >= 4000.0:
                    raise ValueError("tone cues must stay below 4 kHz")
        object.__setattr__(self, "cues", cues)

    @property
    def n_positive(self) -> int:
        return int(round(self.n_subjects * self.positive_fraction))

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "positive_fraction": self.positive_fraction,
            "duration_sec": self.duration_sec,
            "sample_rate": self.sample_rate,
            "noise_db": self.noise_db,
            "seed": self.seed,
            "cues": {
                k.value: [{"type": c.type, "p": c.p, "strength": c.strength} for c in v]
                for k, v in self.cues.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "cues" in d:
            d["cues"] = {InstanceKind(k): tuple(CueSpec(**c) for c in v) for k, v in d["cues"].items()}
        return cls(**d)


def subject_ids(spec: SynthSpec) -> list[str]:
    width = max(4, len(str(spec.n_subjects)))
    return [f"synth-{i:0{width}d}" for i in range(spec.n_subjects)]


def assign_labels(spec: SynthSpec) -> np.ndarray:
    """Boolean positive flags; exactly ``spec.n_positive`` are set."""
    flags = np.zeros(spec.n_subjects, dtype=bool)
    flags[: spec.n_positive] = True
    return derive_rng(spec.seed, "labels").permutation(flags)


def assign_cues(spec: SynthSpec, index: int, positive: bool) -> dict[InstanceKind, tuple[str, ...]]:
    """Cue types present on each instance of subject ``index``."""
    rng = derive_rng(spec.seed, "cues", index)
    out = {}
    for kind in ALL_INSTANCES:
        present = []
        for c in spec.cues.get(kind, ()):
            draw = rng.random()
            if positive and draw < c.p:
                present.append(c.type)
        out[kind] = tuple(present)
    return out


def _envelope(kind: InstanceKind, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    env = np.zeros(n)
    if kind is InstanceKind.HEAVY_COUGH:
        onsets, width = np.arange(0.1, 3.5, 0.8) + rng.uniform(0.0, 0.4, size=5), 0.18
    elif kind is InstanceKind.DEEP_BREATH:
        onsets, width = np.array([rng.uniform(0.2, 0.6), rng.uniform(2.1, 2.5)]), 0.7
    elif kind is InstanceKind.COUNTING_NORMAL:
        onsets, width = np.arange(0.2, 3.8, 0.45) + rng.uniform(-0.05, 0.05), 0.15
    elif kind is InstanceKind.COUNTING_FAST:
        onsets, width = np.arange(0.15, 3.8, 0.28) + rng.uniform(-0.03, 0.03), 0.09
    else:
        onsets, width = np.array([rng.uniform(0.2, 0.5)]), None
    if width is None:
        end = rng.uniform(3.2, 3.7)
        env = np.clip((t - onsets[0]) / 0.15, 0, 1) * np.clip((end - t) / 0.2, 0, 1)
    else:
        for o in onsets:
            env += np.exp(-0.5 * ((t - o - width) / (width / 2.0)) ** 2)
    env = env / max(env.max(), 1e-12)
    return 0.15 + 0.85 * np.clip(env, 0.0, 1.0)


def _harmonic_source(n: int, sr: int, f0: float, rng: np.random.Generator, aligned: bool) -> np.ndarray:
    t = np.arange(n) / sr
    k = np.arange(1, int(HARMONIC_CUTOFF_HZ // f0) + 1)
    amps = 1.0 / np.sqrt(k)
    phases = rng.uniform(0.0, 2 * np.pi, size=k.shape[0])
    if aligned:
        phases[:] = 0.0
    x = np.zeros(n)
    for a, h, ph in zip(amps, k, phases):
        x += a * np.cos(2 * np.pi * f0 * h * t + ph)
    return x / np.sqrt(np.mean(x**2))


def synthesize_clip(spec: SynthSpec, kind: InstanceKind, cues: tuple[str, ...],
                    rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(spec.duration_sec * sr))
    strength = {c.type: c.strength for c in spec.cues.get(kind, ())}
    f0 = rng.uniform(100.0, 200.0)
    source = _harmonic_source(n, sr, f0, rng, aligned="pulse" in cues)
    if kind is InstanceKind.DEEP_BREATH:
        sos = butter(4, [300.0, 2500.0], btype="band", fs=sr, output="sos")
        breath = sosfilt(sos, rng.standard_normal(n))
        source = 0.6 * source + 0.8 * breath / np.sqrt(np.mean(breath**2))
    t = np.arange(n) / sr
    if "am" in cues:
        source = source * (1.0 + strength.get("am", 1.0) * 0.8 * np.sin(2 * np.pi * 12.0 * t))
    x = source * _envelope(kind, n, sr, rng)
    rms = np.sqrt(np.mean(x**2))
    if "tone" in cues:
        x = x + strength.get("tone", 1.0) * rms * np.sqrt(2) * np.sin(
            2 * np.pi * TONE_HZ[kind] * t + rng.uniform(0, 2 * np.pi)
        )
    if "noise_burst" in cues:
        sos = butter(4, [1000.0, 3500.0], btype="band", fs=sr, output="sos")
        burst = sosfilt(sos, rng.standard_normal(n))
        gate = (np.sin(2 * np.pi * 3.0 * t) > 0.7).astype(float)
        x = x + strength.get("noise_burst", 1.0) * rms * gate * burst / np.sqrt(np.mean(burst**2))
    x = x + rms * 10.0 ** (spec.noise_db / 20.0) * rng.standard_normal(n)
    # fixed RMS rather than fixed peak: peak normalisation would leak the pulse cue into loudness
    x = TARGET_RMS * x / np.sqrt(np.mean(x**2))
    return np.clip(x, -0.99, 0.99)


def generate_subject(spec: SynthSpec, index: int, positive: bool) -> dict[InstanceKind, np.ndarray]:
    cues = assign_cues(spec, index, positive)
    return {
        kind: synthesize_clip(spec, kind, cues[kind], derive_rng(spec.seed, "audio", index, kind))
        for kind in ALL_INSTANCES
    }


def generate_dataset(spec: SynthSpec, out_dir: str | os.PathLike):
    """Write the ingest directory layout under ``out_dir`` and build its manifest.

    Returns ``(manifest, screening_reports)`` from :func:`ingest.build_manifest`.
    """
    from .ingest import build_manifest

    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {root}: {exc}") from exc
    labels = assign_labels(spec)
    for i, sid in enumerate(subject_ids(spec)):
        positive = bool(labels[i])
        subject_dir = root / sid
        subject_dir.mkdir(exist_ok=True)
        for kind, x in generate_subject(spec, i, positive).items():
            write_wav(subject_dir / f"{kind.file_stem}.wav", x, spec.sample_rate)
        cues = assign_cues(spec, i, positive)
        meta = {
            "covid_status": "positive" if positive else "negative",
            "synthetic_cues": {k.value: list(v) for k, v in cues.items()},
        }
        (subject_dir / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    (root / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    return build_manifest(root)


def label_of(positive: bool) -> Label:
    return Label.POSITIVE if positive else Label.NEGATIVE
