"""Domain types, WAV I/O, manifest file format and seeded randomness."""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.io import wavfile

SCHEMA_VERSION = 1


class FairSoundError(Exception):
    """Base class for package errors."""


class EmptyAudioError(FairSoundError):
    pass


class ManifestError(FairSoundError, ValueError):
    pass


class InstanceKind(str, enum.Enum):
    HEAVY_COUGH = "heavy_cough"
    DEEP_BREATH = "deep_breath"
    COUNTING_NORMAL = "counting_normal"
    COUNTING_FAST = "counting_fast"
    VOWEL_A = "vowel_a"
    VOWEL_E = "vowel_e"
    VOWEL_O = "vowel_o"

    @property
    def file_stem(self) -> str:
        return _FILE_STEMS[self]

    @classmethod
    def from_stem(cls, stem: str) -> "InstanceKind":
        for kind, s in _FILE_STEMS.items():
            if s == stem:
                return kind
        raise ValueError(f"unknown recording stem {stem!r}")


_FILE_STEMS = {
    InstanceKind.HEAVY_COUGH: "cough-heavy",
    InstanceKind.DEEP_BREATH: "breath-deep",
    InstanceKind.COUNTING_NORMAL: "counting-normal",
    InstanceKind.COUNTING_FAST: "counting-fast",
    InstanceKind.VOWEL_A: "vowel-a",
    InstanceKind.VOWEL_E: "vowel-e",
    InstanceKind.VOWEL_O: "vowel-o",
}

ALL_INSTANCES: tuple[InstanceKind, ...] = tuple(InstanceKind)


class Label(str, enum.Enum):
    NEGATIVE = "negative"
    POSITIVE = "positive"

    @property
    def value_int(self) -> int:
        return int(self is Label.POSITIVE)


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono audio buffer with identity metadata.

    ``samples`` is stored as a read-only float64 array. Range normalisation
    happens in :func:`load_clip`; augmented clips may exceed [-1, 1].
    """

    samples: np.ndarray
    sample_rate: int
    subject_id: str = ""
    instance_kind: InstanceKind | None = None
    label: Label | None = None

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if x.shape[0] < 1:
            raise EmptyAudioError("audio clip has no samples")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate

    def __len__(self) -> int:
        return self.samples.shape[0]

    def with_samples(self, samples, sample_rate: int | None = None) -> "AudioClip":
        return AudioClip(
            samples,
            self.sample_rate if sample_rate is None else sample_rate,
            self.subject_id,
            self.instance_kind,
            self.label,
        )


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: Label
    clips: Mapping[InstanceKind, AudioClip]

    def __post_init__(self):
        for kind, clip in self.clips.items():
            if clip.subject_id and clip.subject_id != self.subject_id:
                raise ValueError(f"clip {kind.value} belongs to {clip.subject_id!r}")
            if clip.label is not None and clip.label != self.label:
                raise ValueError(f"clip {kind.value} has label {clip.label.value}")

    def require(self, kinds: Iterable[InstanceKind]) -> list[AudioClip]:
        kinds = list(kinds)
        if len(set(kinds)) != len(kinds):
            raise ValueError("duplicate instance kinds requested")
        missing = [k.value for k in kinds if k not in self.clips]
        if missing:
            raise KeyError(f"subject {self.subject_id} lacks {missing}")
        return [self.clips[k] for k in kinds]


# ---------------------------------------------------------------------------
# audio I/O
# ---------------------------------------------------------------------------


def normalize_samples(data: np.ndarray) -> np.ndarray:
    """Map integer PCM to [-1, 1) and clip float data into [-1, 1].

    Idempotent on float input. 24-bit WAV data is read by scipy as
    left-justified int32, so it shares the int32 scale.
    """
    data = np.asarray(data)
    if data.dtype == np.uint8:
        out = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        out = data.astype(np.float64) / float(2 ** (8 * data.dtype.itemsize - 1))
    else:
        out = np.clip(data.astype(np.float64), -1.0, 1.0)
    return out


def load_clip(
    path: str | os.PathLike,
    subject_id: str = "",
    instance_kind: InstanceKind | None = None,
    label: Label | None = None,
) -> AudioClip:
    try:
        rate, data = wavfile.read(os.fspath(path))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read WAV file {path}: {exc}") from exc
    x = normalize_samples(data)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise EmptyAudioError(f"{path} contains no samples")
    return AudioClip(x, int(rate), subject_id, instance_kind, label)


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int, pcm16: bool = True) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    if pcm16:
        # same 2**15 scale as normalize_samples, so a round trip is exact to half a step
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(os.fspath(path), int(sample_rate), data)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceEntry:
    path: str
    duration_sec: float
    sample_rate: int


@dataclass(frozen=True)
class SubjectEntry:
    subject_id: str
    label: Label
    instances: Mapping[InstanceKind, InstanceEntry]


@dataclass(frozen=True)
class Manifest:
    records: tuple[SubjectEntry, ...] = ()
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.subject_id in seen:
                raise ManifestError(f"duplicate subject_id {rec.subject_id!r}")
            seen.add(rec.subject_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    def subject(self, subject_id: str) -> SubjectEntry:
        for r in self.records:
            if r.subject_id == subject_id:
                return r
        raise KeyError(subject_id)

    def labels(self) -> dict[str, Label]:
        return {r.subject_id: r.label for r in self.records}

    def check_paths(self, base: str | os.PathLike | None = None) -> None:
        for rec in self.records:
            for kind, inst in rec.instances.items():
                p = resolve_path(inst.path, base)
                if not p.exists():
                    raise ManifestError(f"{rec.subject_id}/{kind.value}: missing file {p}")


def resolve_path(path: str, base: str | os.PathLike | None = None) -> Path:
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = Path(base) / p
    return p


_ROW_FIELDS = ("subject_id", "label", "instance", "path", "duration_sec", "sample_rate")


def manifest_rows(manifest: Manifest) -> list[dict]:
    rows = []
    for rec in manifest.records:
        for kind, inst in rec.instances.items():
            rows.append(
                {
                    "subject_id": rec.subject_id,
                    "label": rec.label.value,
                    "instance": kind.value,
                    "path": inst.path,
                    "duration_sec": float(inst.duration_sec),
                    "sample_rate": int(inst.sample_rate),
                    "schema_version": manifest.schema_version,
                }
            )
    return rows


def manifest_from_rows(rows: Iterable[Mapping]) -> Manifest:
    grouped: dict[str, dict] = {}
    version = SCHEMA_VERSION
    for i, row in enumerate(rows):
        missing = [f for f in _ROW_FIELDS if f not in row]
        if missing:
            raise ManifestError(f"row {i}: missing field(s) {missing}")
        try:
            label = Label(row["label"])
            kind = InstanceKind(row["instance"])
        except ValueError as exc:
            raise ManifestError(f"row {i}: {exc}") from exc
        version = int(row.get("schema_version", version))
        sid = str(row["subject_id"])
        group = grouped.setdefault(sid, {"label": label, "instances": {}})
        if group["label"] != label:
            raise ManifestError(f"subject {sid!r} has conflicting labels")
        if kind in group["instances"]:
            raise ManifestError(f"duplicate subject_id/instance pair {sid!r}/{kind.value}")
        group["instances"][kind] = InstanceEntry(
            str(row["path"]), float(row["duration_sec"]), int(row["sample_rate"])
        )
    records = tuple(
        SubjectEntry(sid, g["label"], dict(g["instances"])) for sid, g in grouped.items()
    )
    return Manifest(records, version)


def write_manifest(path: str | os.PathLike, manifest: Manifest) -> None:
    """Write one JSON object per (subject, instance) pair.

    An empty manifest produces an empty file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in manifest_rows(manifest):
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> Manifest:
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc
    return manifest_from_rows(rows)


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngSeed:
    seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def rng(self, *keys) -> np.random.Generator:
        return derive_rng(self.seed, *keys)


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, enum.Enum):
        key = key.value
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Keys may be ints, strings or enums; the stream depends only on their
    values, never on call order, so parallel workers agree.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys) -> int:
    return int(derive_rng(seed, *keys).integers(0, 2**63 - 1))


def env_seed(default: int) -> int:
    """Global seed, overridable through ``FAIRSOUND_SEED``."""
    value = os.environ.get("FAIRSOUND_SEED")
    return int(value) if value not in (None, "") else int(default)
