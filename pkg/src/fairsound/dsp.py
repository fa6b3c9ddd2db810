"""Signal transforms: mel scale, resampling, trimming, cropping, augmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from math import gcd

import numpy as np
from scipy.signal import resample_poly

from . import _kernels
from .core import AudioClip, FairSoundError


class DomainError(ValueError):
    pass


class EmptyAfterTrimError(FairSoundError):
    pass


class SampleRateError(FairSoundError, ValueError):
    pass


@dataclass(frozen=True)
class DspParams:
    fft_size: int = 2048
    win_size: int = 2048
    hop: int = 1024
    n_mels: int = 128
    crop_sec: float = 4.0
    max_offset_sec: float = 1.0
    gain_min: float = 0.9
    gain_max: float = 1.3
    mask_len: int = 10
    time_masks: int = 1
    freq_masks: int = 1
    trim_db: float = 60.0
    trim_win: int = 2048
    trim_hop: int = 512
    spec_rate: int = 44100
    wave_rate: int = 8000
    log_floor: float = 1e-10
    top_db: float | None = 80.0

    def __post_init__(self):
        if self.gain_min > self.gain_max:
            raise ValueError("gain_min must not exceed gain_max")
        if self.mask_len < 0:
            raise ValueError("mask_len must be non-negative")
        if self.win_size > self.fft_size:
            raise ValueError("win_size must not exceed fft_size")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DspParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dsp keys: {sorted(unknown)}")
        return cls(**d)


DEFAULT_PARAMS = DspParams()


@dataclass(frozen=True)
class AugmentationPolicy:
    gain_min: float = 0.9
    gain_max: float = 1.3
    mask_length: int = 10
    time_masks: int = 1
    freq_masks: int = 1
    enabled: bool = True

    def __post_init__(self):
        if self.gain_min > self.gain_max:
            raise ValueError("gain range must satisfy low <= high")
        if self.mask_length < 0:
            raise ValueError("mask_length must be non-negative")

    @classmethod
    def from_params(cls, p: DspParams, enabled: bool = True) -> "AugmentationPolicy":
        return cls(p.gain_min, p.gain_max, p.mask_len, p.time_masks, p.freq_masks, enabled)


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames)
    sample_rate: int
    params: DspParams = DEFAULT_PARAMS
    is_log: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def floor(self) -> float:
        """Value that represents silence: 0 for power, the clamp floor for dB."""
        if not self.is_log:
            return 0.0
        if self.params.top_db is None:
            return 10.0 * np.log10(self.params.log_floor)
        return float(self.values.max()) - self.params.top_db


# ---------------------------------------------------------------------------
# mel scale
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0) or np.any(np.isnan(f)):
        raise DomainError("frequency must be non-negative")
    m = 1127.0 * np.log1p(f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise DomainError("mel value must be non-negative")
    f = 700.0 * np.expm1(m / 1127.0)
    return float(f) if f.ndim == 0 else f


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None):
    """Triangular filters with peak 1, edges evenly spaced on the mel scale.

    Returns ``(weights, centers_hz)`` with weights of shape
    ``(n_mels, n_fft // 2 + 1)``.
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower = edges_hz[:-2, None]
    center = edges_hz[1:-1, None]
    upper = edges_hz[2:, None]
    rising = (bins_hz[None, :] - lower) / (center - lower)
    falling = (upper - bins_hz[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights, edges_hz[1:-1]


_FILTERBANK_CACHE: dict = {}


def _filterbank(p: DspParams, sample_rate: int) -> np.ndarray:
    key = (sample_rate, p.fft_size, p.n_mels)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = mel_filterbank(sample_rate, p.fft_size, p.n_mels)[0]
    return _FILTERBANK_CACHE[key]


# ---------------------------------------------------------------------------
# spectrograms
# ---------------------------------------------------------------------------


def n_frames(n_samples: int, hop: int = 1024) -> int:
    return n_samples // hop + 1


def stft_power(x: np.ndarray, p: DspParams = DEFAULT_PARAMS) -> np.ndarray:
    """Centered power STFT with a periodic Hann window; shape ``(n_fft//2+1, frames)``."""
    x = np.asarray(x, dtype=np.float64)
    pad = p.fft_size // 2
    if x.shape[0] > 1:
        xp = np.pad(x, pad, mode="reflect")
    else:
        xp = np.pad(x, pad, mode="constant")
    window = np.zeros(p.fft_size)
    offset = (p.fft_size - p.win_size) // 2
    window[offset : offset + p.win_size] = np.hanning(p.win_size + 1)[:-1]
    frames = np.lib.stride_tricks.sliding_window_view(xp, p.fft_size)[:: p.hop]
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T


def mel_power(x: np.ndarray, sample_rate: int, p: DspParams = DEFAULT_PARAMS) -> np.ndarray:
    return _filterbank(p, sample_rate) @ stft_power(x, p)


def power_to_db(power: np.ndarray, floor: float = 1e-10, top_db: float | None = 80.0) -> np.ndarray:
    db = 10.0 * np.log10(np.maximum(power, floor))
    if top_db is not None:
        db = np.maximum(db, db.max() - top_db)
    return db


def mel_spectrogram(clip: AudioClip, p: DspParams = DEFAULT_PARAMS, log: bool = True) -> MelSpectrogram:
    if clip.sample_rate != p.spec_rate:
        raise SampleRateError(f"mel_spectrogram expects {p.spec_rate} Hz input, got {clip.sample_rate}")
    power = mel_power(clip.samples, clip.sample_rate, p)
    values = power_to_db(power, p.log_floor, p.top_db) if log else power
    return MelSpectrogram(values, clip.sample_rate, p, is_log=log)


# ---------------------------------------------------------------------------
# waveform transforms
# ---------------------------------------------------------------------------


def resample_array(x: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    if target_rate <= 0 or orig_rate <= 0:
        raise DomainError("sample rates must be positive")
    if orig_rate == target_rate:
        return np.array(x, dtype=np.float64)
    g = gcd(int(orig_rate), int(target_rate))
    return resample_poly(np.asarray(x, dtype=np.float64), target_rate // g, orig_rate // g)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling; output length ``ceil(n * target / orig)``."""
    if target_rate <= 0:
        raise DomainError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    return clip.with_samples(resample_array(clip.samples, clip.sample_rate, target_rate), target_rate)


def trim_bounds(x: np.ndarray, threshold_db: float = 60.0, win: int = 2048, hop: int = 512) -> tuple[int, int]:
    """Sample range ``[start, end)`` kept by :func:`trim_silence`.

    Windows are centred on multiples of ``hop`` (the signal is zero-padded by
    ``win // 2``), so each boundary is accurate to about half a window.
    """
    if threshold_db <= 0:
        raise DomainError("threshold_db must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    half = win // 2
    rms = _kernels.frame_rms(np.pad(x, (half, half)), win, hop)[: n // hop + 1]
    peak = rms.max()
    if peak <= 0.0:
        raise EmptyAfterTrimError("clip is silent")
    loud = np.flatnonzero(rms >= peak * 10.0 ** (-threshold_db / 20.0))
    start = int(loud[0]) * hop
    end = min((int(loud[-1]) + 1) * hop, n)
    return start, end


def trim_silence(clip: AudioClip, threshold_db: float = 60.0, win: int = 2048, hop: int = 512) -> AudioClip:
    """Drop leading/trailing windows whose RMS lies ``threshold_db`` below the loudest one."""
    start, end = trim_bounds(clip.samples, threshold_db, win, hop)
    if start == 0 and end == len(clip):
        return clip
    return clip.with_samples(clip.samples[start:end])


def crop_offset(n_samples: int, rate: int, mode: str, rng: np.random.Generator | None,
                crop_sec: float = 4.0, max_offset_sec: float = 1.0) -> int:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        return 0
    crop = int(round(crop_sec * rate))
    max_off = min(int(round(max_offset_sec * rate)), max(n_samples - crop, 0))
    if max_off == 0:
        return 0
    return int(rng.integers(0, max_off + 1))


def crop_array(x: np.ndarray, offset: int, length: int) -> np.ndarray:
    out = np.zeros(length, dtype=np.float64)
    seg = x[offset : offset + length]
    out[: seg.shape[0]] = seg
    return out


def crop_window(clip: AudioClip, mode: str = "eval", rng: np.random.Generator | None = None,
                crop_sec: float = 4.0, max_offset_sec: float = 1.0) -> AudioClip:
    """Fixed-length window: first ``crop_sec`` in eval mode, a random start within the
    first ``max_offset_sec`` in train mode. Short clips are zero-padded at the tail."""
    offset = crop_offset(len(clip), clip.sample_rate, mode, rng, crop_sec, max_offset_sec)
    length = int(round(crop_sec * clip.sample_rate))
    return clip.with_samples(crop_array(clip.samples, offset, length))


def draw_gain(rng: np.random.Generator, gain_min: float = 0.9, gain_max: float = 1.3) -> float:
    return float(rng.uniform(gain_min, gain_max))


def amplitude_scale(clip: AudioClip, rng: np.random.Generator, gain_min: float = 0.9,
                    gain_max: float = 1.3) -> AudioClip:
    g = draw_gain(rng, gain_min, gain_max)
    return clip.with_samples(clip.samples * g)


def draw_masks(rng: np.random.Generator, n_mels: int, n_frames_: int, mask_len: int = 10,
               time_masks: int = 1, freq_masks: int = 1) -> tuple[list[int], list[int]]:
    """Start positions for time and frequency masks (uniform over valid starts)."""
    if mask_len == 0:
        return [], []
    if mask_len > n_frames_ or mask_len > n_mels:
        raise ValueError("mask_len exceeds spectrogram size")
    t_starts = [int(rng.integers(0, n_frames_ - mask_len + 1)) for _ in range(time_masks)]
    f_starts = [int(rng.integers(0, n_mels - mask_len + 1)) for _ in range(freq_masks)]
    return t_starts, f_starts


def apply_masks(values: np.ndarray, t_starts, f_starts, mask_len: int, fill: float) -> np.ndarray:
    out = np.array(values, copy=True)
    for t in t_starts:
        out[:, t : t + mask_len] = fill
    for f in f_starts:
        out[f : f + mask_len, :] = fill
    return out


def mask_time_freq(spec: MelSpectrogram, rng: np.random.Generator, mask_len: int = 10,
                   time_masks: int = 1, freq_masks: int = 1) -> MelSpectrogram:
    """Blank contiguous frame and mel-bin blocks with the spectrogram's silence value."""
    n_mels, n_fr = spec.values.shape
    t_starts, f_starts = draw_masks(rng, n_mels, n_fr, mask_len, time_masks, freq_masks)
    values = apply_masks(spec.values, t_starts, f_starts, mask_len, spec.floor)
    return replace(spec, values=values)
