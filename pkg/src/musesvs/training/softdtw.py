"""Soft dynamic time warping between mel-spectrograms.

The pairwise cost of aligning frame i of A with frame j of B is the mean
absolute difference of the two frames. With smoothing ``gamma`` the minimum in
the DTW recursion becomes ``-gamma * log(sum(exp(-x / gamma)))``; ``gamma = 0``
recovers classic DTW. Kernels run in numba; the autograd function returns
gradients for both inputs.
"""

from __future__ import annotations

import math
from typing import Optional

import numba
import numpy as np
import torch

_INF = np.inf


@numba.njit(cache=True)
def _allowed(i, j, n, m, band):
    if band < 0:
        return True
    return abs(j - i * m / n) <= band + 1e-9 or (i == n - 1 and j == m - 1)


@numba.njit(cache=True)
def _cost_matrix(A, B, band):
    n, k = A.shape
    m = B.shape[0]
    D = np.full((n, m), _INF)
    for i in range(n):
        for j in range(m):
            if not _allowed(i, j, n, m, band):
                continue
            s = 0.0
            for c in range(k):
                s += abs(A[i, c] - B[j, c])
            D[i, j] = s / k
    return D


@numba.njit(cache=True)
def _softmin3(a, b, c, gamma):
    if gamma == 0.0:
        return min(a, b, c)
    lo = min(a, b, c)
    if lo == _INF:
        return _INF
    s = math.exp(-(a - lo) / gamma) + math.exp(-(b - lo) / gamma) + math.exp(-(c - lo) / gamma)
    return lo - gamma * math.log(s)


@numba.njit(cache=True)
def _forward(D, gamma):
    n, m = D.shape
    R = np.full((n + 2, m + 2), _INF)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d = D[i - 1, j - 1]
            if d == _INF:
                continue
            R[i, j] = d + _softmin3(R[i - 1, j - 1], R[i - 1, j], R[i, j - 1], gamma)
    return R


@numba.njit(cache=True)
def _backward_soft(D, R, gamma):
    n, m = D.shape
    Dp = np.zeros((n + 2, m + 2))
    Dp[1:n + 1, 1:m + 1] = D
    Rp = R.copy()
    for i in range(n + 2):
        for j in range(m + 2):
            if Rp[i, j] == _INF:
                Rp[i, j] = -_INF
    Rp[n + 1, :] = -_INF
    Rp[:, m + 1] = -_INF
    Rp[n + 1, m + 1] = R[n, m]
    E = np.zeros((n + 2, m + 2))
    E[n + 1, m + 1] = 1.0
    for j in range(m, 0, -1):
        for i in range(n, 0, -1):
            if Rp[i, j] == -_INF:
                continue
            acc = 0.0
            if E[i + 1, j] != 0.0:
                acc += E[i + 1, j] * math.exp((Rp[i + 1, j] - Rp[i, j] - Dp[i + 1, j]) / gamma)
            if E[i, j + 1] != 0.0:
                acc += E[i, j + 1] * math.exp((Rp[i, j + 1] - Rp[i, j] - Dp[i, j + 1]) / gamma)
            if E[i + 1, j + 1] != 0.0:
                acc += E[i + 1, j + 1] * math.exp((Rp[i + 1, j + 1] - Rp[i, j] - Dp[i + 1, j + 1]) / gamma)
            E[i, j] = acc
    return E[1:n + 1, 1:m + 1]


@numba.njit(cache=True)
def _backward_hard(R):
    n, m = R.shape[0] - 2, R.shape[1] - 2
    E = np.zeros((n, m))
    i, j = n, m
    while i >= 1 and j >= 1:
        E[i - 1, j - 1] = 1.0
        if i == 1 and j == 1:
            break
        a, b, c = R[i - 1, j - 1], R[i - 1, j], R[i, j - 1]
        if a <= b and a <= c:
            i, j = i - 1, j - 1
        elif b <= c:
            i -= 1
        else:
            j -= 1
    return E


@numba.njit(cache=True)
def _input_grads(A, B, E):
    n, k = A.shape
    m = B.shape[0]
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    for i in range(n):
        for j in range(m):
            e = E[i, j]
            if e == 0.0:
                continue
            w = e / k
            for c in range(k):
                diff = A[i, c] - B[j, c]
                if diff > 0:
                    gA[i, c] += w
                    gB[j, c] -= w
                elif diff < 0:
                    gA[i, c] -= w
                    gB[j, c] += w
    return gA, gB


class _SoftDTW(torch.autograd.Function):
    @staticmethod
    def forward(ctx, A, B, gamma, band):
        a = A.detach().cpu().double().numpy()
        b = B.detach().cpu().double().numpy()
        D = _cost_matrix(a, b, band)
        R = _forward(D, gamma)
        ctx.save_for_backward(A, B)
        ctx.gamma = gamma
        ctx.arrays = (a, b, D, R)
        return A.new_tensor(R[a.shape[0], b.shape[0]])

    @staticmethod
    def backward(ctx, grad_out):
        a, b, D, R = ctx.arrays
        A, B = ctx.saved_tensors
        E = _backward_hard(R) if ctx.gamma == 0 else _backward_soft(D, R, ctx.gamma)
        ga, gb = _input_grads(a, b, E)
        ga = torch.from_numpy(ga).to(A.dtype).to(A.device) * grad_out
        gb = torch.from_numpy(gb).to(B.dtype).to(B.device) * grad_out
        return ga, gb, None, None


def soft_dtw(A: torch.Tensor, B: torch.Tensor, gamma: float = 1.0, band: Optional[int] = None,
             normalize: bool = False) -> torch.Tensor:
    """Soft-DTW alignment cost between frame sequences A (n, k) and B (m, k).

    Args:
        A: First sequence; gradients flow to it (and to B).
        B: Second sequence.
        gamma: Smoothing; 0 gives classic DTW.
        band: Optional Sakoe-Chiba half-width around the (scaled) diagonal.
        normalize: Divide by max(n, m).

    Returns:
        Tensor: Scalar cost.

    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if A.dim() == 1:
        A = A.unsqueeze(-1)
    if B.dim() == 1:
        B = B.unsqueeze(-1)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("soft-DTW needs non-empty sequences")
    if A.shape[1] != B.shape[1]:
        raise ValueError("frames must have equal dimension")
    value = _SoftDTW.apply(A, B, float(gamma), -1 if band is None else int(band))
    if normalize:
        value = value / max(A.shape[0], B.shape[0])
    return value


def soft_dtw_batch(pred, target, lengths, gamma=1.0, band=None):
    """Mean over the batch of length-normalised soft-DTW between padded (B, T, k) mel batches."""
    losses = [soft_dtw(p[:n], t[:n], gamma, band, normalize=True)
              for p, t, n in zip(pred, target, lengths.tolist())]
    return torch.stack(losses).mean()
