"""Instance-token fusion: multi-head self-attention, MLP projection, classifier."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


def concat_instance_features(wave_feats: torch.Tensor | None, spec_feats: torch.Tensor | None) -> torch.Tensor:
    """Build fusion tokens from per-instance features of shape ``(..., c, 128)``.

    Token ``k`` is the waveform feature of instance ``k`` followed by the
    spectrogram feature of the same instance. With only one representation
    the features pass through unchanged.
    """
    if wave_feats is None and spec_feats is None:
        raise ValueError("at least one representation is required")
    if wave_feats is None:
        return spec_feats
    if spec_feats is None:
        return wave_feats
    if wave_feats.shape[:-1] != spec_feats.shape[:-1]:
        raise ValueError(
            f"instance count mismatch: {tuple(wave_feats.shape)} vs {tuple(spec_feats.shape)}"
        )
    return torch.cat([wave_feats, spec_feats], dim=-1)


def scaled_dot_product(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
    """softmax(q kᵀ / sqrt(d_head)) v over the last two axes; returns (out, weights)."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class MultiHeadSelfAttention(nn.Module):
    """Self-attention over instance tokens.

    Each head projects tokens to query/key/value vectors of width
    ``dim // heads``; head outputs are concatenated back to ``dim``. There is
    no output projection, so the result is a per-head convex combination of
    projected values.
    """

    def __init__(self, dim: int, heads: int = 4, bias: bool = True):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"token dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, bias=bias)
        self.k_proj = nn.Linear(dim, dim, bias=bias)
        self.v_proj = nn.Linear(dim, dim, bias=bias)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.head_dim).transpose(-3, -2)

    def forward(self, tokens: torch.Tensor, return_weights: bool = False):
        if tokens.shape[-1] != self.dim:
            raise ValueError(f"expected token dim {self.dim}, got {tokens.shape[-1]}")
        q = self._split(self.q_proj(tokens))
        k = self._split(self.k_proj(tokens))
        v = self._split(self.v_proj(tokens))
        out, weights = scaled_dot_product(q, k, v)  # (..., h, n, head_dim), (..., h, n, n)
        out = out.transpose(-3, -2).reshape(tokens.shape)
        if return_weights:
            return out, weights
        return out


def msa_forward(tokens: torch.Tensor, msa: MultiHeadSelfAttention):
    """Apply ``msa`` and return ``(output_tokens, attention_weights)``."""
    return msa(tokens, return_weights=True)


class FusionUnit(nn.Module):
    """Map ``c`` instance tokens to one 128-d joint feature.

    With ``use_attention=False`` the tokens skip self-attention and go
    straight to the MLP; single-instance baselines use that path.
    """

    def __init__(self, n_instances: int, token_dim: int, heads: int = 4, hidden: int = 256,
                 out_dim: int = 128, use_attention: bool = True, instance_embedding: bool = False):
        super().__init__()
        if n_instances < 1:
            raise ConfigError("need at least one instance")
        self.n_instances = n_instances
        self.token_dim = token_dim
        self.msa = MultiHeadSelfAttention(token_dim, heads) if use_attention else None
        self.instance_embedding = (
            nn.Parameter(torch.zeros(n_instances, token_dim)) if instance_embedding else None
        )
        self.mlp = nn.Sequential(
            nn.Linear(n_instances * token_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, tokens: torch.Tensor, return_weights: bool = False):
        if tokens.shape[-2:] != (self.n_instances, self.token_dim):
            raise ValueError(
                f"expected tokens (..., {self.n_instances}, {self.token_dim}), got {tuple(tokens.shape)}"
            )
        if self.instance_embedding is not None:
            tokens = tokens + self.instance_embedding
        weights = None
        if self.msa is not None:
            tokens, weights = self.msa(tokens, return_weights=True)
        z = self.mlp(tokens.flatten(-2))
        if return_weights:
            return z, weights
        return z


class Classifier(nn.Module):
    """Affine map to one logit."""

    def __init__(self, in_dim: int = 128):
        super().__init__()
        self.linear = nn.Linear(in_dim, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z).squeeze(-1)

    def probability(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward(z))


def classify(z: torch.Tensor, classifier: Classifier) -> torch.Tensor:
    return classifier.probability(z)


def bce_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))
