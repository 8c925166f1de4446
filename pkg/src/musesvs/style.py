"""Reference encoder with a global-style-token layer, and distillation of the attribute tables.

The reference encoder only runs during training. Its style vector is the
teacher for the singer and emotion tables, which are what synthesis uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F


@dataclass
class StyleVector:
    values: torch.Tensor
    source: str = "reference"


class ReferenceEncoder(nn.Module):
    """Strided 2-D conv stack over a mel-spectrogram, summarised by a GRU.

    Inputs are zero-padded on the time axis to a multiple of the total stride,
    so trailing zero padding up to that multiple does not change the output.
    """

    def __init__(self, n_mels: int = 80, filters: Sequence[int] = (32, 32, 64, 64, 128, 128), kernel: int = 3,
                 stride: int = 2, gru_units: int = 192):
        super().__init__()
        chans = [1, *filters]
        self.stride = stride
        self.total_stride = stride ** len(filters)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], kernel, stride=stride, padding=kernel // 2)
            for i in range(len(filters))
        )
        freq = n_mels
        for _ in filters:
            freq = (freq + 2 * (kernel // 2) - kernel) // stride + 1
        self.gru = nn.GRU(filters[-1] * freq, gru_units, batch_first=True)

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Summary vector (B, gru_units) for mels (B, T, n_mels) zero beyond ``lengths``."""
        B, T, _ = mel.shape
        if T == 0:
            raise ValueError("empty mel-spectrogram")
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        padded = -(-T // self.total_stride) * self.total_stride
        x = F.pad(mel, (0, 0, 0, padded - T)).unsqueeze(1)
        for conv in self.convs:
            x = torch.relu(conv(x))
        x = x.permute(0, 2, 1, 3).flatten(2)  # (B, T', C * F')
        out, _ = self.gru(x)
        last = (-(-lengths.to(torch.long) // self.total_stride)).clamp(min=1) - 1
        return out[torch.arange(B), last.to(out.device)]


class StyleTokenLayer(nn.Module):
    """Multi-head attention from the reference summary onto a bank of learned style tokens."""

    def __init__(self, query_dim: int = 192, n_tokens: int = 10, token_dim: int = 48, hidden: int = 384,
                 heads: int = 8, out_dim: int = 384):
        super().__init__()
        if hidden % heads:
            raise ValueError("hidden must be divisible by heads")
        self.heads = heads
        self.tokens = nn.Parameter(torch.randn(n_tokens, token_dim) * 0.5)
        self.q = nn.Linear(query_dim, hidden, bias=False)
        self.k = nn.Linear(token_dim, hidden, bias=False)
        self.v = nn.Linear(token_dim, hidden, bias=False)
        self.out = nn.Linear(hidden, out_dim)

    def forward(self, query: torch.Tensor):
        """Return the style vector (B, out_dim) and attention weights (B, heads, n_tokens)."""
        B = query.shape[0]
        keys = torch.tanh(self.tokens)
        h = self.heads
        q = self.q(query).view(B, h, -1)
        k = self.k(keys).view(-1, h, q.shape[-1]).transpose(0, 1)  # (h, N, dh)
        v = self.v(keys).view(-1, h, q.shape[-1]).transpose(0, 1)
        scores = torch.einsum("bhd,hnd->bhn", q, k) / q.shape[-1] ** 0.5
        weights = scores.softmax(-1)
        mixed = torch.einsum("bhn,hnd->bhd", weights, v).reshape(B, -1)
        return self.out(mixed), weights


class StyleReference(nn.Module):
    """Reference encoder + token layer, with a running mean of style vectors for normalisation."""

    def __init__(self, n_mels, filters, kernel, stride, gru_units, n_tokens, token_dim, hidden, heads, out_dim,
                 momentum: float = 0.01, freeze: bool = False):
        super().__init__()
        self.encoder = ReferenceEncoder(n_mels, filters, kernel, stride, gru_units)
        self.tokens = StyleTokenLayer(gru_units, n_tokens, token_dim, hidden, heads, out_dim)
        self.momentum = momentum
        self.freeze = freeze
        self.register_buffer("style_mean", torch.zeros(out_dim))

    def forward(self, mel, lengths=None) -> tuple[StyleVector, torch.Tensor]:
        style, weights = self.tokens(self.encoder(mel, lengths))
        if self.freeze:
            style = style.detach()
        return StyleVector(style), weights

    @torch.no_grad()
    def update_mean(self, style: torch.Tensor) -> None:
        """Move the running mean toward the batch mean of ``style`` (called after a successful step)."""
        self.style_mean.lerp_(style.detach().mean(0).to(self.style_mean.dtype), self.momentum)


def distill_loss(style: torch.Tensor, singer_entry: torch.Tensor, singer_mean: torch.Tensor,
                 emotion_emb: torch.Tensor, style_mean: torch.Tensor | None = None) -> torch.Tensor:
    """Squared error between the table decomposition and the reference style vector.

    The singer entry is centred on the mean singer entry and the style vector
    on its running mean, so the singer table carries singer identity only
    relative to the other singers and the emotion entry carries the remainder.

    Args:
        style: Reference style vectors (B, d).
        singer_entry: Singer table rows for each sample (B, d).
        singer_mean: Mean over all singer rows (d,).
        emotion_emb: Emotion base embeddings for each sample (B, d).
        style_mean: Running mean of style vectors (d,); zero when omitted.

    Returns:
        Tensor: Scalar loss.

    """
    target = style if style_mean is None else style - style_mean
    pred = singer_entry - singer_mean + emotion_emb
    return ((pred - target) ** 2).mean()
