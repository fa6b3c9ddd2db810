"""Full classifier assembly and the checkpoint file format."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoders import EncoderConfig, SpectrogramEncoder, WaveformEncoder
from .fusion import Classifier, FusionUnit, concat_instance_features

REPRESENTATIONS = ("waveform", "spectrogram", "dual")

CHECKPOINT_MAGIC = b"FSCKPT01"


@dataclass(frozen=True)
class ModelSpec:
    n_instances: int
    representation: str = "dual"
    use_attention: bool = True
    fusion_heads: int = 4
    fusion_hidden: int = 256
    instance_embedding: bool = False

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")

    @property
    def uses_wave(self) -> bool:
        return self.representation in ("waveform", "dual")

    @property
    def uses_spec(self) -> bool:
        return self.representation in ("spectrogram", "dual")


class FairModel(nn.Module):
    """Shared per-representation encoders -> instance tokens -> fusion -> logit.

    The same encoder module processes every instance of its
    representation; instances are folded into the batch axis.
    """

    def __init__(self, spec: ModelSpec, enc_cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.spec = spec
        self.enc_cfg = enc_cfg
        self.wave_encoder = WaveformEncoder(enc_cfg) if spec.uses_wave else None
        self.spec_encoder = SpectrogramEncoder(enc_cfg) if spec.uses_spec else None
        token_dim = enc_cfg.feature_dim * (2 if spec.representation == "dual" else 1)
        self.fusion = FusionUnit(
            spec.n_instances, token_dim, spec.fusion_heads, spec.fusion_hidden,
            enc_cfg.feature_dim, spec.use_attention, spec.instance_embedding,
        )
        self.classifier = Classifier(enc_cfg.feature_dim)

    @staticmethod
    def _encode(encoder, x: torch.Tensor) -> torch.Tensor:
        b, c = x.shape[:2]
        return encoder(x.reshape(b * c, *x.shape[2:])).reshape(b, c, -1)

    def tokens(self, wave=None, spec=None, frames=None) -> torch.Tensor:
        """``frames`` replaces ``wave`` with precomputed ``(B, c, t, d)`` backbone output."""
        wf = sf = None
        if self.wave_encoder is not None:
            if frames is not None:
                b, c = frames.shape[:2]
                wf = self.wave_encoder.head(frames.reshape(b * c, *frames.shape[2:])).reshape(b, c, -1)
            else:
                wf = self._encode(self.wave_encoder, wave)
        if self.spec_encoder is not None:
            sf = self._encode(self.spec_encoder, spec)
        return concat_instance_features(wf, sf)

    def joint_feature(self, wave=None, spec=None, frames=None) -> torch.Tensor:
        return self.fusion(self.tokens(wave, spec, frames))

    def forward(self, wave=None, spec=None, frames=None) -> torch.Tensor:
        return self.classifier(self.joint_feature(wave, spec, frames))

    def predict_proba(self, wave=None, spec=None, frames=None) -> torch.Tensor:
        return torch.sigmoid(self.forward(wave, spec, frames))

    @property
    def caches_wave_frames(self) -> bool:
        """True when waveform backbone output is fixed and may be precomputed."""
        enc = self.wave_encoder
        return enc is not None and enc.backbone is not None and self.enc_cfg.frozen_backbone


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, state: dict[str, torch.Tensor], config: dict) -> None:
    """Write ``FSCKPT01`` + uint32 header length + JSON header + float32 payloads.

    The header holds ``{"config": ..., "tensors": [{"name", "shape"}, ...]}``;
    payloads follow in header order, little-endian row-major.
    """
    names = list(state)
    arrays = [np.ascontiguousarray(state[n].detach().cpu().numpy(), dtype="<f4") for n in names]
    header = {
        "config": config,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        state = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"{path}: truncated tensor {t['name']}")
            state[t["name"]] = torch.from_numpy(
                np.frombuffer(buf, dtype="<f4").reshape(t["shape"]).copy()
            )
    return header["config"], state
