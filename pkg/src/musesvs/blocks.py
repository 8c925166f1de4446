"""Transformer building blocks, length regulator, discriminator and receptive-field probe."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn


def _masked(x: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    return x if mask is None else x * mask.unsqueeze(-1).to(x.dtype)


class SelfAttention(nn.Module):
    """Multi-head self-attention sublayer with residual connection and post layer norm."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, mask=None):
        pad = None if mask is None else ~mask
        h, _ = self.attn(x, x, x, key_padding_mask=pad, need_weights=False)
        return _masked(self.norm(x + self.dropout(h)), mask)


class ConvFeedForward(nn.Module):
    """Two 1-D convolutions (kernel k then 1) with ReLU in between."""

    def __init__(self, dim: int, filters: int, kernel: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv1d(dim, filters, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(filters, dim, 1)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, mask=None):
        h = _masked(x, mask).transpose(1, 2)
        h = self.conv2(torch.relu(self.conv1(h))).transpose(1, 2)
        return _masked(self.norm(x + self.dropout(h)), mask)


class ASPPFeedForward(nn.Module):
    """Parallel dilated convolutions, concatenated and projected back by a kernel-1 convolution.

    Low dilation rates get the wide branches so local detail keeps most of the
    capacity while the sparse branches widen the context.
    """

    def __init__(self, dim: int, filters: Sequence[int], dilations: Sequence[int], kernel: int,
                 dropout: float):
        super().__init__()
        if len(filters) != len(dilations):
            raise ValueError("one filter count per dilation rate is required")
        self.branches = nn.ModuleList(
            nn.Conv1d(dim, f, kernel, dilation=r, padding=(kernel // 2) * r)
            for f, r in zip(filters, dilations)
        )
        self.concat_width = int(sum(filters))
        self.proj = nn.Conv1d(self.concat_width, dim, 1)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(dim)

    def pyramid(self, x, mask=None):
        """Concatenated branch activations (B, sum(filters), T)."""
        h = _masked(x, mask).transpose(1, 2)
        return torch.cat([torch.relu(b(h)) for b in self.branches], dim=1)

    def forward(self, x, mask=None):
        h = self.proj(self.pyramid(x, mask)).transpose(1, 2)
        return _masked(self.norm(x + self.dropout(h)), mask)


class FFTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, filters: int, kernel: int = 9, dropout: float = 0.2):
        super().__init__()
        self.attn = SelfAttention(dim, heads, dropout)
        self.ff = ConvFeedForward(dim, filters, kernel, dropout)

    def forward(self, x, mask=None):
        return self.ff(self.attn(x, mask), mask)


class ASPPTransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, filters: Sequence[int] = (768, 384, 192, 192),
                 dilations: Sequence[int] = (1, 3, 5, 7), kernel: int = 9, dropout: float = 0.2):
        super().__init__()
        self.attn = SelfAttention(dim, heads, dropout)
        self.ff = ASPPFeedForward(dim, filters, dilations, kernel, dropout)

    def forward(self, x, mask=None):
        return self.ff(self.attn(x, mask), mask)


class Encoder(nn.Module):
    """Stack of FFT blocks mapping combined low-level embeddings to initial phoneme embeddings."""

    def __init__(self, dim: int, layers: int, heads: int, filters: int, kernel: int, dropout: float):
        super().__init__()
        self.blocks = nn.ModuleList(FFTBlock(dim, heads, filters, kernel, dropout) for _ in range(layers))

    def forward(self, x, mask=None):
        for block in self.blocks:
            x = block(x, mask)
        return x


class Decoder(nn.Module):
    """Frame-level blocks followed by an affine projection to mel bins."""

    def __init__(self, blocks: Sequence[nn.Module], dim: int, n_mels: int):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.proj = nn.Linear(dim, n_mels)

    @classmethod
    def aspp(cls, dim, layers, heads, n_mels, filters=(768, 384, 192, 192), dilations=(1, 3, 5, 7),
             kernel=9, dropout=0.2) -> "Decoder":
        return cls([ASPPTransformerBlock(dim, heads, filters, dilations, kernel, dropout)
                    for _ in range(layers)], dim, n_mels)

    @classmethod
    def fft(cls, dim, layers, heads, n_mels, filters=1536, kernel=9, dropout=0.2) -> "Decoder":
        return cls([FFTBlock(dim, heads, filters, kernel, dropout) for _ in range(layers)], dim, n_mels)

    def forward(self, frames, mask=None):
        x = frames
        for block in self.blocks:
            x = block(x, mask)
        return _masked(self.proj(x), mask)


def length_regulate(E: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Repeat row i of a (L, d) matrix durations[i] times."""
    if durations.dim() != 1 or len(durations) != E.shape[0]:
        raise ValueError("one duration per phoneme is required")
    if bool((durations < 1).any()):
        raise ValueError("durations must be at least one frame")
    return torch.repeat_interleave(E, durations.long(), dim=0)


def length_regulate_batch(E: torch.Tensor, durations: torch.Tensor, mask: torch.Tensor):
    """Batched length regulation over padded phoneme sequences.

    Args:
        E: Joint embeddings (B, L, d).
        durations: Integer durations (B, L); ignored where ``mask`` is False.
        mask: Phoneme validity mask (B, L).

    Returns:
        Tuple[Tensor, Tensor]: Frames (B, T_max, d) and frame mask (B, T_max).

    """
    seqs = [length_regulate(e[m], d[m]) for e, d, m in zip(E, durations, mask)]
    t_max = max(s.shape[0] for s in seqs)
    out = E.new_zeros(len(seqs), t_max, E.shape[-1])
    frame_mask = torch.zeros(len(seqs), t_max, dtype=torch.bool, device=E.device)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        frame_mask[i, : s.shape[0]] = True
    return out, frame_mask


class Discriminator(nn.Module):
    """Patch discriminator treating a mel-spectrogram as a one-channel image.

    ``filters`` lists (in, out) channel pairs, one pair per layer, followed by
    a 1x1 projection to a real-valued score per (frame, bin) patch.
    """

    def __init__(self, kernel=(9, 9), filters=(1, 64, 64, 64, 64, 64)):
        super().__init__()
        pairs = list(zip(filters[0::2], filters[1::2]))
        self.kernel = tuple(kernel)
        self.convs = nn.ModuleList(
            nn.Conv2d(i, o, self.kernel, stride=1, padding=(self.kernel[0] // 2, self.kernel[1] // 2))
            for i, o in pairs
        )
        self.out = nn.Conv2d(pairs[-1][1], 1, 1)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """Score map (B, T', n_mels) for mels (B, T, n_mels); inputs shorter than a kernel are zero-padded."""
        t = mel.shape[1]
        if t < self.kernel[0]:
            mel = nn.functional.pad(mel, (0, 0, 0, self.kernel[0] - t))
        x = mel.unsqueeze(1)
        for conv in self.convs:
            x = torch.relu(conv(x))
        return self.out(x).squeeze(1)


def erf_probe(model: nn.Module, E_frames: torch.Tensor, out_index: int) -> torch.Tensor:
    """Per-input-frame L1 norm of the gradient of one output frame (summed over bins).

    Args:
        model: Module mapping (1, T, d) frames to (1, T, n_out).
        E_frames: Frame-level input embeddings (T, d).
        out_index: Output frame to differentiate.

    Returns:
        Tensor: Non-negative profile of length T.

    """
    T = E_frames.shape[0]
    if not 0 <= out_index < T:
        raise IndexError(f"out_index {out_index} outside [0, {T})")
    x = E_frames.detach().clone().unsqueeze(0).requires_grad_(True)
    y = model(x)
    (grad,) = torch.autograd.grad(y[0, out_index].sum(), x)
    return grad[0].abs().sum(-1)


def mass_width(profile, center: int, fraction: float = 0.9) -> int:
    """Width of the smallest window centred on ``center`` that holds ``fraction`` of the profile's mass."""
    p = torch.as_tensor(profile, dtype=torch.float64)
    total = float(p.sum())
    if total == 0:
        return 0
    T = len(p)
    for h in range(T):
        lo, hi = max(0, center - h), min(T, center + h + 1)
        if float(p[lo:hi].sum()) >= fraction * total:
            return hi - lo
    return T
