"""Experiment matrix, subject-level cross-validation and the training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import (
    ALL_INSTANCES,
    InstanceKind,
    Label,
    Manifest,
    derive_rng,
    derive_seed,
    load_clip,
    resolve_path,
)
from .dsp import (
    DspParams,
    EmptyAfterTrimError,
    apply_masks,
    crop_array,
    crop_offset,
    draw_gain,
    draw_masks,
    mel_power,
    power_to_db,
    resample_array,
    trim_bounds,
)
from .encoders import EncoderConfig, normalize_db
from .fusion import bce_from_logits
from .metrics import MetricsReport, compute_auc, evaluate_scores, mean_sd, write_roc_csv
from .model import FairModel, ModelSpec, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# experiment matrix
# ---------------------------------------------------------------------------

K = InstanceKind
SPEECH = (K.COUNTING_NORMAL, K.COUNTING_FAST, K.VOWEL_A, K.VOWEL_E, K.VOWEL_O)

COMBINATIONS: dict[str, tuple[InstanceKind, ...]] = {
    **{k.value: (k,) for k in ALL_INSTANCES},
    "speech": SPEECH,
    "cough+breath": (K.HEAVY_COUGH, K.DEEP_BREATH),
    "cough+speech": (K.HEAVY_COUGH, *SPEECH),
    "breath+speech": (K.DEEP_BREATH, *SPEECH),
    "cough+breath+speech": (K.HEAVY_COUGH, K.DEEP_BREATH, *SPEECH),
    "counting": (K.COUNTING_NORMAL, K.COUNTING_FAST),
    "phoneme": (K.VOWEL_A, K.VOWEL_E, K.VOWEL_O),
}

# row -> (representation, attention fusion, weight decay)
ROWS = {
    "BA1": ("waveform", False, 1e-3),
    "BA2": ("spectrogram", False, 1e-1),
    "BE1": ("waveform", True, 1e-3),
    "BE2": ("spectrogram", True, 1e-1),
    "BE3": ("dual", True, 1e-3),
}

BASELINE_GRID = tuple(k.value for k in ALL_INSTANCES)
BENCHMARK_GRID = ("speech", "cough+breath", "cough+speech", "breath+speech", "cough+breath+speech")


def experiment_grid(row: str) -> tuple[str, ...]:
    if row not in ROWS:
        raise ConfigError(f"unknown experiment row {row!r}")
    return BASELINE_GRID if row.startswith("BA") else BENCHMARK_GRID


def resolve_combination(name: str) -> tuple[InstanceKind, ...]:
    try:
        return COMBINATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown body-sound combination {name!r}") from None


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float | None = None  # None: take the row default
    betas: tuple[float, float] = (0.9, 0.99)
    batch_size: int = 32
    epochs: int = 30
    warmup_epochs: int = 10
    class_weighting: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.base_lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("learning rate, batch size and epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.weight_decay is not None and self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    row: str = "BE3"
    combination: str = "cough+breath+speech"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dsp: DspParams = field(default_factory=DspParams)
    fusion_heads: int = 4
    fusion_hidden: int = 256
    instance_embedding: bool = False
    seed: int = 0
    test_size: float = 1 / 6
    n_folds: int = 5

    def __post_init__(self):
        if self.row not in ROWS:
            raise ConfigError(f"unknown experiment row {self.row!r}")
        kinds = resolve_combination(self.combination)
        if self.row.startswith("BA") and len(kinds) != 1:
            raise ConfigError(f"baseline row {self.row} takes a single instance, got {self.combination!r}")
        token_dim = self.encoder.feature_dim * (2 if self.representation == "dual" else 1)
        if self.use_attention and token_dim % self.fusion_heads:
            raise ConfigError(f"token dim {token_dim} not divisible by {self.fusion_heads} heads")

    @property
    def experiment_id(self) -> str:
        return f"{self.row}-{self.combination}"

    @property
    def instances(self) -> tuple[InstanceKind, ...]:
        return COMBINATIONS[self.combination]

    @property
    def representation(self) -> str:
        return ROWS[self.row][0]

    @property
    def use_attention(self) -> bool:
        return ROWS[self.row][1]

    @property
    def weight_decay(self) -> float:
        wd = self.train.weight_decay
        return ROWS[self.row][2] if wd is None else wd

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            n_instances=len(self.instances),
            representation=self.representation,
            use_attention=self.use_attention,
            fusion_heads=self.fusion_heads,
            fusion_hidden=self.fusion_hidden,
            instance_embedding=self.instance_embedding,
        )

    def to_dict(self) -> dict:
        return {
            "row": self.row,
            "combination": self.combination,
            "encoder": self.encoder.to_dict(),
            "train": {**asdict(self.train), "betas": list(self.train.betas)},
            "dsp": self.dsp.to_dict(),
            "fusion_heads": self.fusion_heads,
            "fusion_hidden": self.fusion_hidden,
            "instance_embedding": self.instance_embedding,
            "seed": self.seed,
            "test_size": self.test_size,
            "n_folds": self.n_folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "encoder" in d:
                d["encoder"] = EncoderConfig.from_dict(d["encoder"])
            if "train" in d:
                tk = {f.name for f in fields(TrainConfig)}
                bad = set(d["train"]) - tk
                if bad:
                    raise ConfigError(f"unknown train keys: {sorted(bad)}")
                d["train"] = TrainConfig(**d["train"])
            if "dsp" in d:
                d["dsp"] = DspParams.from_dict(d["dsp"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**d)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# cross-validation split
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    test: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    seed: int = 0

    @property
    def n_trials(self) -> int:
        return len(self.folds)

    def trial(self, k: int) -> tuple[list[str], list[str]]:
        """``(train, validation)`` subject lists for trial ``k`` (1-based)."""
        if not 1 <= k <= len(self.folds):
            raise ValueError(f"trial must be in 1..{len(self.folds)}")
        val = list(self.folds[k - 1])
        train = [s for i, f in enumerate(self.folds) if i != k - 1 for s in f]
        return train, val

    def to_dict(self) -> dict:
        return {"seed": self.seed, "test": list(self.test), "folds": [list(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSplit":
        return cls(tuple(d["test"]), tuple(tuple(f) for f in d["folds"]), int(d.get("seed", 0)))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FoldSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _allocate(counts: Sequence[int], total: int) -> list[int]:
    """Largest-remainder split of ``total`` proportional to ``counts``."""
    n = sum(counts)
    exact = [c * total / n for c in counts]
    alloc = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def split_folds(labels: dict[str, Label] | Manifest, test_size: float | int = 1 / 6,
                n_folds: int = 5, seed: int = 0) -> FoldSplit:
    """Stratified fixed test set plus ``n_folds`` near-equal validation folds.

    ``test_size`` is a fraction in (0, 1) or an absolute subject count.
    Folds are dealt round-robin over the class-sorted shuffled remainder, so
    sizes differ by at most one and class ratios stay close.
    """
    if isinstance(labels, Manifest):
        labels = labels.labels()
    ids = sorted(labels)
    by_class = {lab: [s for s in ids if labels[s] == lab] for lab in Label}
    for lab, members in by_class.items():
        if members and len(members) < n_folds + 1:
            raise SplitError(f"class {lab.value} has {len(members)} subjects; need >= {n_folds + 1}")
    if any(not m for m in by_class.values()):
        raise SplitError("both classes are required")
    n_test = int(round(test_size * len(ids))) if isinstance(test_size, float) else int(test_size)
    if not 0 <= n_test <= len(ids) - n_folds:
        raise SplitError(f"test size {n_test} leaves too few subjects for {n_folds} folds")
    rng = derive_rng(seed, "split")
    classes = list(Label)
    shuffled = {lab: list(rng.permutation(by_class[lab])) for lab in classes}
    alloc = _allocate([len(shuffled[lab]) for lab in classes], n_test)
    test, rest = [], []
    for lab, a in zip(classes, alloc):
        test.extend(shuffled[lab][:a])
        rest.extend(shuffled[lab][a:])
    folds = [rest[i::n_folds] for i in range(n_folds)]
    return FoldSplit(
        tuple(sorted(test)), tuple(tuple(sorted(f)) for f in folds), seed
    )


# ---------------------------------------------------------------------------
# learning-rate schedule and loss
# ---------------------------------------------------------------------------


def lr_at(step: float, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_epochs``, then cosine decay to 0 at the last step."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * step / warm
    if total == warm:
        return cfg.base_lr
    progress = min(1.0, (step - warm) / (total - warm))
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def bce_loss(probs, labels) -> float:
    """Binary cross-entropy of probabilities (reference form, float64)."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-15, 1 - 1e-15)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class _ClipAudio:
    wave_rate: np.ndarray  # trimmed clip at the waveform rate
    spec_len: int  # trimmed length at the spectrogram rate
    spec_rate: np.ndarray | None  # kept only when longer than the crop
    power0: np.ndarray  # mel power of the offset-0 crop


class FeatureStore:
    """Loads, trims and resamples clips once, then serves model inputs.

    Training inputs follow the augmentation order crop -> gain -> mel ->
    dB -> mask. Because the power spectrogram of ``g * x`` is
    ``g**2`` times that of ``x``, the mel power of the offset-0 crop is
    cached and rescaled instead of recomputed. Clips no longer than the
    crop always use offset 0, so their full-rate audio is dropped.
    """

    def __init__(self, manifest: Manifest, dsp: DspParams = DspParams(),
                 enc: EncoderConfig = EncoderConfig(), base_dir: str | os.PathLike | None = None):
        self.manifest = manifest
        self.dsp = dsp
        self.enc = enc
        self.base_dir = base_dir
        self.labels = {r.subject_id: r.label for r in manifest}
        self._paths = {(r.subject_id, k): inst.path for r in manifest for k, inst in r.instances.items()}
        self._audio: dict = {}
        self.frame_caches: dict = {}
        self.crop_spec = int(round(dsp.crop_sec * dsp.spec_rate))
        self.crop_wave = int(round(dsp.crop_sec * dsp.wave_rate))

    def audio(self, sid: str, kind: InstanceKind) -> _ClipAudio:
        key = (sid, kind)
        if key not in self._audio:
            clip = load_clip(resolve_path(self._paths[key], self.base_dir))
            x = clip.samples
            try:
                s, e = trim_bounds(x, self.dsp.trim_db, self.dsp.trim_win, self.dsp.trim_hop)
                x = x[s:e]
            except EmptyAfterTrimError:
                pass
            spec = resample_array(x, clip.sample_rate, self.dsp.spec_rate)
            power0 = mel_power(crop_array(spec, 0, self.crop_spec), self.dsp.spec_rate, self.dsp)
            self._audio[key] = _ClipAudio(
                resample_array(x, clip.sample_rate, self.dsp.wave_rate).astype(np.float32),
                spec.shape[0],
                spec.astype(np.float32) if spec.shape[0] > self.crop_spec else None,
                power0.astype(np.float32),
            )
        return self._audio[key]

    def preload(self, sids: Sequence[str], kinds: Sequence[InstanceKind]) -> None:
        for sid in sids:
            for kind in kinds:
                self.audio(sid, kind)

    def offsets(self, sid: str, kind: InstanceKind, rng: np.random.Generator | None, mode: str) -> tuple[int, int]:
        a = self.audio(sid, kind)
        off_spec = crop_offset(a.spec_len, self.dsp.spec_rate, mode, rng,
                               self.dsp.crop_sec, self.dsp.max_offset_sec)
        off_wave = int(round(off_spec * self.dsp.wave_rate / self.dsp.spec_rate))
        return off_spec, off_wave

    def power(self, sid: str, kind: InstanceKind, offset: int) -> np.ndarray:
        a = self.audio(sid, kind)
        if offset == 0:
            return a.power0
        x = crop_array(a.spec_rate, offset, self.crop_spec)
        return mel_power(x, self.dsp.spec_rate, self.dsp).astype(np.float32)

    def spec_input(self, power: np.ndarray, gain: float = 1.0) -> tuple[np.ndarray, float]:
        """Normalised log-mel input and the normalised floor value used to fill masks."""
        db = power_to_db(power * (gain * gain), self.dsp.log_floor, self.dsp.top_db)
        floor = db.max() - self.dsp.top_db if self.dsp.top_db is not None else 10 * np.log10(self.dsp.log_floor)
        return normalize_db(db, self.enc).astype(np.float32), float(normalize_db(floor, self.enc))

    def wave(self, sid: str, kind: InstanceKind, offset: int) -> np.ndarray:
        return crop_array(self.audio(sid, kind).wave_rate, offset, self.crop_wave).astype(np.float32)

    def sample(self, sid: str, kinds: Sequence[InstanceKind], mode: str, seed: int = 0, epoch: int = 0,
               want_wave: bool = True, want_spec: bool = True):
        """Inputs for one subject: ``(wave (c, L) | None, spec (c, M, T) | None, wave offsets)``.

        The augmentation stream depends only on (seed, subject, instance,
        epoch), so every model trained with one seed sees the same crops.
        """
        waves, specs, wave_offsets = [], [], []
        for kind in kinds:
            if mode == "train":
                rng = derive_rng(seed, "augment", sid, kind, epoch)
                off_s, off_w = self.offsets(sid, kind, rng, "train")
                gain = draw_gain(rng, self.dsp.gain_min, self.dsp.gain_max)
            else:
                rng = None
                off_s, off_w, gain = 0, 0, 1.0
            wave_offsets.append(off_w)
            if want_wave:
                waves.append(self.wave(sid, kind, off_w) * np.float32(gain))
            if want_spec:
                s, fill = self.spec_input(self.power(sid, kind, off_s), gain)
                if mode == "train":
                    t_st, f_st = draw_masks(rng, s.shape[0], s.shape[1], self.dsp.mask_len,
                                            self.dsp.time_masks, self.dsp.freq_masks)
                    s = apply_masks(s, t_st, f_st, self.dsp.mask_len, fill)
                specs.append(s)
        wave = np.stack(waves) if want_wave else None
        spec = np.stack(specs) if want_spec else None
        return wave, spec, wave_offsets


class _FrameCache:
    """Frozen waveform-backbone output per (subject, instance, offset).

    Entries live on the feature store, keyed by the backbone configuration,
    so every model sharing that frozen backbone reuses them.
    """

    def __init__(self, model: FairModel, store: FeatureStore):
        self.model = model
        self.store = store
        c = model.enc_cfg
        key = (c.wave_channels, c.wave_kernels, c.wave_strides, c.wave_backbone_seed)
        self._cache = store.frame_caches.setdefault(key, {})

    def frames(self, requests: list[tuple[str, InstanceKind, int]]) -> torch.Tensor:
        missing = [r for r in dict.fromkeys(requests) if r not in self._cache]
        backbone = self.model.wave_encoder.backbone
        for i in range(0, len(missing), 64):
            chunk = missing[i : i + 64]
            x = torch.from_numpy(np.stack([self.store.wave(s, k, o) for s, k, o in chunk]))
            with torch.no_grad():
                out = backbone.eval()(x)
            for r, f in zip(chunk, out):
                self._cache[r] = f
        return torch.stack([self._cache[r] for r in requests])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: FairModel
    log: list[dict]
    best_epoch: int
    best_val_auc: float
    seconds: float = 0.0


class Trainer:
    def __init__(self, cfg: ExperimentConfig, store: FeatureStore, trial: int = 1,
                 model: FairModel | None = None):
        self.cfg = cfg
        self.store = store
        self.trial = trial
        self.kinds = cfg.instances
        if model is None:
            torch.manual_seed(derive_seed(cfg.seed, "init", cfg.experiment_id, trial))
            model = FairModel(cfg.model_spec(), cfg.encoder)
        self.model = model
        self.frame_cache = _FrameCache(self.model, store) if self.model.caches_wave_frames else None

    def _batch(self, sids: Sequence[str], mode: str, epoch: int = 0):
        spec_m = self.model.spec_encoder is not None
        wave_m = self.model.wave_encoder is not None
        cached = self.frame_cache is not None
        waves, specs, reqs = [], [], []
        for sid in sids:
            w, s, offs = self.store.sample(sid, self.kinds, mode, self.cfg.seed, epoch,
                                           want_wave=wave_m and not cached, want_spec=spec_m)
            if w is not None:
                waves.append(w)
            if s is not None:
                specs.append(s)
            if cached:
                reqs.extend((sid, k, o) for k, o in zip(self.kinds, offs))
        kwargs = {}
        if spec_m:
            kwargs["spec"] = torch.from_numpy(np.stack(specs))
        if wave_m:
            if cached:
                f = self.frame_cache.frames(reqs)
                kwargs["frames"] = f.reshape(len(sids), len(self.kinds), *f.shape[1:])
            else:
                kwargs["wave"] = torch.from_numpy(np.stack(waves))
        return kwargs

    def predict(self, sids: Sequence[str], batch_size: int = 64) -> np.ndarray:
        self.model.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(sids), batch_size):
                chunk = list(sids[i : i + batch_size])
                out.append(self.model.predict_proba(**self._batch(chunk, "eval")).double().numpy())
        return np.concatenate(out) if out else np.zeros(0)

    def labels(self, sids: Sequence[str]) -> np.ndarray:
        return np.array([self.store.labels[s].value_int for s in sids], dtype=np.float64)

    def fit(self, train: Sequence[str], val: Sequence[str], log_path: str | os.PathLike | None = None) -> TrainResult:
        cfg = self.cfg.train
        params = [p for p in self.model.parameters() if p.requires_grad]
        opt = torch.optim.AdamW(params, lr=cfg.base_lr, betas=cfg.betas, weight_decay=self.cfg.weight_decay)
        steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
        y_val = self.labels(val)
        pos_weight = None
        if cfg.class_weighting:
            y_tr = self.labels(train)
            pos_weight = torch.tensor((len(y_tr) - y_tr.sum()) / max(y_tr.sum(), 1.0))
        records: list[dict] = []
        best_auc, best_epoch, best_state = -1.0, -1, None
        step = 0
        t0 = time.perf_counter()
        logf = open(log_path, "w") if log_path else None
        try:
            for epoch in range(cfg.epochs):
                self.model.train()
                order = derive_rng(self.cfg.seed, "shuffle", self.cfg.experiment_id, self.trial, epoch).permutation(len(train))
                losses = []
                lr = 0.0
                for b in range(steps_per_epoch):
                    idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                    sids = [train[i] for i in idx]
                    lr = lr_at(step, steps_per_epoch, cfg)
                    for g in opt.param_groups:
                        g["lr"] = lr
                    logits = self.model(**self._batch(sids, "train", epoch))
                    y = torch.from_numpy(self.labels(sids)).to(logits.dtype)
                    if pos_weight is None:
                        loss = bce_from_logits(logits, y)
                    else:
                        loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, y, pos_weight=pos_weight)
                    if not torch.isfinite(loss):
                        rec = {"epoch": epoch, "step": step, "train_loss": loss.item(), "lr": lr, "diverged": True}
                        if logf:
                            logf.write(json.dumps(rec) + "\n")
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                    opt.zero_grad()
                    loss.backward()
                    if cfg.grad_clip:
                        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                    opt.step()
                    losses.append(loss.item())
                    step += 1
                val_auc = compute_auc(self.predict(val), y_val)
                rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auc": val_auc, "lr": lr}
                records.append(rec)
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                    logf.flush()
                log.info("%s trial %d epoch %d loss %.4f val_auc %.4f", self.cfg.experiment_id,
                         self.trial, epoch, rec["train_loss"], val_auc)
                if val_auc > best_auc:
                    best_auc, best_epoch = val_auc, epoch
                    best_state = copy.deepcopy(self.model.state_dict())
        finally:
            if logf:
                logf.close()
        self.model.load_state_dict(best_state)
        self.model.eval()
        return TrainResult(self.model, records, best_epoch, best_auc, time.perf_counter() - t0)


def train_model(cfg: ExperimentConfig, store: FeatureStore, split: FoldSplit, trial: int,
                out_dir: str | os.PathLike | None = None) -> tuple[TrainResult, MetricsReport, Trainer]:
    """Train one trial, keep the best-validation-AUC weights and evaluate on the test fold."""
    train, val = split.trial(trial)
    trainer = Trainer(cfg, store, trial)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
    result = trainer.fit(train, val, log_path)
    if out_dir is not None:
        meta = {"experiment": cfg.to_dict(), "trial": trial, "best_epoch": result.best_epoch,
                "best_val_auc": result.best_val_auc}
        save_checkpoint(out_dir / "checkpoint.fsck", result.model.state_dict(), meta)
    report = evaluate_trial(trainer, split, trial, out_dir)
    return result, report, trainer


def evaluate_trial(trainer: Trainer, split: FoldSplit, trial: int,
                   out_dir: str | os.PathLike | None = None) -> MetricsReport:
    """Threshold on the trial's validation fold, metrics on the fixed test fold."""
    cfg = trainer.cfg
    _, val = split.trial(trial)
    test = list(split.test)
    val_scores = trainer.predict(val)
    test_scores = trainer.predict(test)
    y_test = trainer.labels(test)
    report = evaluate_scores(val_scores, trainer.labels(val), test_scores, y_test, trial, cfg.experiment_id)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = {**report.to_dict(), "seed": cfg.seed, "split_seed": split.seed,
               "n_instances": len(cfg.instances), "config": cfg.to_dict()}
        (out_dir / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        write_roc_csv(out_dir / "roc.csv", test_scores, y_test)
        with open(out_dir / "test_scores.csv", "w") as fh:
            fh.write("subject_id,score,label\n")
            for sid, sc, y in zip(test, test_scores, y_test):
                fh.write(f"{sid},{sc!r},{int(y)}\n")
    return report


def load_trained(path: str | os.PathLike) -> tuple[ExperimentConfig, FairModel, dict]:
    meta, state = load_checkpoint(path)
    cfg = ExperimentConfig.from_dict(meta["experiment"])
    model = FairModel(cfg.model_spec(), cfg.encoder)
    model.load_state_dict(state)
    model.eval()
    return cfg, model, meta


@dataclass
class ExperimentResult:
    experiment_id: str
    reports: list[MetricsReport]

    def summary(self) -> dict:
        out = {"experiment_id": self.experiment_id, "n_trials": len(self.reports)}
        for name in ("auc", "sensitivity", "specificity"):
            m, sd, single = mean_sd([getattr(r, name) for r in self.reports])
            out[name] = {"mean": m, "sd": sd, "single_trial": single}
        return out


def run_experiment(cfg: ExperimentConfig, store: FeatureStore, split: FoldSplit,
                   trials: Sequence[int] | None = None, out_dir: str | os.PathLike | None = None) -> ExperimentResult:
    """Train one model per trial and test each on the fixed test fold."""
    trials = list(trials) if trials is not None else list(range(1, split.n_trials + 1))
    reports = []
    for k in trials:
        sub = Path(out_dir) / cfg.experiment_id / f"trial_{k}" if out_dir is not None else None
        _, report, _ = train_model(cfg, store, split, k, sub)
        reports.append(report)
    result = ExperimentResult(cfg.experiment_id, reports)
    if out_dir is not None:
        path = Path(out_dir) / cfg.experiment_id / "summary.json"
        path.write_text(json.dumps(result.summary(), indent=1, sort_keys=True))
    return result


def run_grid(row: str, base: ExperimentConfig, store: FeatureStore, split: FoldSplit,
             trials: Sequence[int] | None = None, out_dir=None,
             combinations: Sequence[str] | None = None) -> dict[str, ExperimentResult]:
    combos = experiment_grid(row) if combinations is None else combinations
    return {
        c: run_experiment(replace(base, row=row, combination=c), store, split, trials, out_dir)
        for c in combos
    }
