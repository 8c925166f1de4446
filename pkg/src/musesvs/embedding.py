"""Unified embedding space.

A phoneme's joint embedding starts as the encoder output and moves through the
space by adding one residual per style attribute, in the fixed order singer,
emotion, pitch, energy::

    E(y, z_1..z_k) = E(y, z_<k) + R(z_k | y, z_<k) = E(y) + sum_j R(z_j | y, z_<j)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .config import INTENSITY_LEVELS
from .score_io import AttributeContext, EmbeddingMode, Emotion

MAX_STAGE = 4
STAGE_NAMES = ("phoneme", "singer", "emotion", "pitch", "energy")

INTERPOLATED_LABELS = ("neutral", "happy_1.0", "sad_1.0")
LEVEL_WISE_LABELS = (
    "neutral",
    "happy_0.3", "happy_0.7", "happy_1.0",
    "sad_0.3", "sad_0.7", "sad_1.0",
)


def positional_encoding(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Sinusoidal position table of shape (length, dim)."""
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    if length < 1:
        raise ValueError("length must be positive")
    pos = torch.arange(length, dtype=torch.float64, device=device).unsqueeze(1)
    rate = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64, device=device) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(pos * rate)
    pe[:, 1::2] = torch.cos(pos * rate)
    return pe.to(dtype)


@dataclass
class JointEmbeddingSeq:
    """Joint embeddings (..., L, d) and the number of attributes accumulated so far."""

    values: torch.Tensor
    stage: int = 0

    def __post_init__(self):
        if not 0 <= self.stage <= MAX_STAGE:
            raise ValueError(f"stage must lie in 0..{MAX_STAGE}")


def accumulate_residual(E: JointEmbeddingSeq, R: torch.Tensor) -> JointEmbeddingSeq:
    if E.stage >= MAX_STAGE:
        raise ValueError("all four attributes have already been accumulated")
    if R.shape != E.values.shape:
        raise ValueError(f"residual shape {tuple(R.shape)} != embedding shape {tuple(E.values.shape)}")
    return JointEmbeddingSeq(E.values + R, E.stage + 1)


class InputEmbedding(nn.Module):
    """Phoneme, note-pitch and note-duration tables combined by one affine map."""

    def __init__(self, n_phonemes: int, dim: int, max_duration: int = 256, n_pitches: int = 128):
        super().__init__()
        self.max_duration = max_duration
        self.phoneme = nn.Embedding(n_phonemes, dim)
        self.pitch = nn.Embedding(n_pitches, dim)
        self.duration = nn.Embedding(max_duration, dim)
        self.proj = nn.Linear(3 * dim, dim)
        nn.init.normal_(self.phoneme.weight, std=dim ** -0.5)
        nn.init.normal_(self.pitch.weight, std=dim ** -0.5)
        nn.init.normal_(self.duration.weight, std=dim ** -0.5)

    def combine_inputs(self, phoneme_emb, pitch_emb, duration_emb):
        if not phoneme_emb.shape[:-1] == pitch_emb.shape[:-1] == duration_emb.shape[:-1]:
            raise ValueError("phoneme, pitch and duration embeddings must have equal row counts")
        x = self.proj(torch.cat([phoneme_emb, pitch_emb, duration_emb], dim=-1))
        pe = positional_encoding(x.shape[-2], x.shape[-1], dtype=x.dtype, device=x.device)
        return x + pe

    def forward(self, phonemes, pitches, durations):
        durations = durations.clamp(max=self.max_duration - 1)
        return self.combine_inputs(self.phoneme(phonemes), self.pitch(pitches), self.duration(durations))


class AttributeTable(nn.Module):
    """Learned embedding per attribute value (singer id or emotion label)."""

    def __init__(self, labels: Sequence[str], dim: int, kind: str):
        super().__init__()
        if kind not in ("singer", "emotion"):
            raise ValueError(f"unknown table kind {kind!r}")
        self.kind = kind
        self.labels = tuple(labels)
        self.weight = nn.Parameter(torch.randn(len(self.labels), dim) * 0.1)

    @classmethod
    def singers(cls, n: int, dim: int) -> "AttributeTable":
        return cls([f"singer_{i}" for i in range(n)], dim, "singer")

    @classmethod
    def emotions(cls, mode: EmbeddingMode | str, dim: int) -> "AttributeTable":
        labels = INTERPOLATED_LABELS if EmbeddingMode(mode) is EmbeddingMode.INTERPOLATED else LEVEL_WISE_LABELS
        return cls(labels, dim, "emotion")

    @property
    def mode(self) -> EmbeddingMode:
        if self.kind != "emotion":
            raise AttributeError("only emotion tables have an embedding mode")
        return EmbeddingMode.INTERPOLATED if len(self.labels) == 3 else EmbeddingMode.LEVEL_WISE

    def entry(self, label: str) -> torch.Tensor:
        return self.weight[self.labels.index(label)]

    def forward(self, index: torch.Tensor) -> torch.Tensor:
        return self.weight[index]


def level_label(emotion: Emotion | str, intensity: float) -> str:
    emotion = Emotion(emotion)
    if emotion is Emotion.NEUTRAL or intensity == 0:
        return "neutral"
    if intensity not in INTENSITY_LEVELS:
        raise ValueError(f"no level-wise embedding for intensity {intensity}")
    return f"{emotion.value}_{intensity:.1f}"


def emotion_interpolation(ctx: AttributeContext | Sequence[AttributeContext], table: AttributeTable):
    """Per-sample (endpoint index, weight t) so that emb = t*entry[endpoint] + (1-t)*entry[neutral].

    In level-wise mode the endpoint is the exact level entry and t is 1.
    """
    ctxs = [ctx] if isinstance(ctx, AttributeContext) else list(ctx)
    idx, ts = [], []
    for c in ctxs:
        if c.mode is not table.mode:
            raise ValueError(f"context mode {c.mode.value} does not match table mode {table.mode.value}")
        if table.mode is EmbeddingMode.INTERPOLATED:
            emo = Emotion.HAPPY if c.emotion is Emotion.NEUTRAL else c.emotion
            idx.append(table.labels.index(f"{emo.value}_1.0"))
            ts.append(float(c.intensity))
        else:
            idx.append(table.labels.index(level_label(c.emotion, c.intensity)))
            ts.append(1.0)
    return torch.tensor(idx, dtype=torch.long), torch.tensor(ts, dtype=torch.float64)


def mix(endpoint: torch.Tensor, neutral: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """t * endpoint + (1 - t) * neutral, broadcasting t over trailing dims."""
    t = t.to(endpoint.dtype).reshape(t.shape + (1,) * (endpoint.dim() - t.dim()))
    return t * endpoint + (1 - t) * neutral


def emotion_base_embedding(ctx: AttributeContext, table: AttributeTable) -> torch.Tensor:
    """Emotion embedding for one context, interpolated (or extrapolated for t > 1) between table entries."""
    if table.kind != "emotion":
        raise ValueError("emotion_base_embedding needs an emotion table")
    idx, t = emotion_interpolation(ctx, table)
    if table.mode is EmbeddingMode.LEVEL_WISE:
        return table.weight[idx[0]]
    return mix(table.weight[idx[0]], table.entry("neutral"), t[0])


class ResidualAttributeEncoder(nn.Module):
    """Estimates the residual of one attribute from the previous joint embedding and a conditioning input.

    The conditioning input is either a table embedding (a d-vector, broadcast
    over phonemes) or a per-phoneme predictor output. The output layer starts
    at zero so an untrained encoder adds nothing.
    """

    def __init__(self, dim: int, cond_dim: Optional[int] = None, filters: int = 384, kernel: int = 3,
                 dropout: float = 0.5):
        super().__init__()
        cond_dim = dim if cond_dim is None else cond_dim
        self.cond_proj = None if cond_dim == dim else nn.Linear(cond_dim, dim)
        self.conv = nn.Conv1d(2 * dim, filters, kernel, padding=kernel // 2)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(filters, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, E_prev: torch.Tensor, cond: torch.Tensor, mask: Optional[torch.Tensor] = None):
        """Compute the residual.

        Args:
            E_prev: Previous joint embeddings (B, L, d).
            cond: Conditioning input, (B, c) or (B, L, c).
            mask: Optional validity mask (B, L).

        Returns:
            Tensor: Residual (B, L, d).

        """
        if self.cond_proj is not None:
            cond = self.cond_proj(cond)
        if cond.dim() == E_prev.dim() - 1:
            cond = cond.unsqueeze(-2).expand_as(E_prev)
        if cond.shape != E_prev.shape:
            raise ValueError(f"conditioning shape {tuple(cond.shape)} incompatible with {tuple(E_prev.shape)}")
        x = torch.cat([E_prev, cond], dim=-1)
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        h = torch.relu(self.conv(x.transpose(-1, -2))).transpose(-1, -2)
        r = self.out(self.dropout(h))
        if mask is not None:
            r = r * mask.unsqueeze(-1)
        return r


def telescoped(E0: torch.Tensor, residuals: Sequence[torch.Tensor]) -> torch.Tensor:
    """E(y) + sum of residuals, accumulated left to right."""
    out = E0
    for r in residuals:
        out = out + r
    return out

