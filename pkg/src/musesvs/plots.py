"""Static diagnostic figures written as PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import FRAME_RATE  # noqa: E402
from .evaluation import extract_phoneme_pitch_stats  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_f0(path, f0: np.ndarray, durations: Sequence[int], voiced=None, frame_rate: float = FRAME_RATE,
            title: str = "F0") -> Path:
    """F0 contour with the per-phoneme mean and a mean +/- std band."""
    durations = np.asarray(durations, dtype=int)
    voiced = np.ones(len(durations), bool) if voiced is None else np.asarray(voiced, bool)
    mu, sigma, _ = extract_phoneme_pitch_stats(f0, durations, voiced)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    t = np.arange(len(f0)) / frame_rate
    fig, ax = plt.subplots(figsize=(10, 3.5))
    ax.plot(t, np.where(np.asarray(f0) > 0, f0, np.nan), lw=0.8, color="0.3", label="F0")
    for k, i in enumerate(np.flatnonzero(voiced)):
        a, b = bounds[i] / frame_rate, bounds[i + 1] / frame_rate
        ax.hlines(mu[k], a, b, color="tab:red", lw=1.5, label="mean" if k == 0 else None)
        ax.fill_between([a, b], mu[k] - sigma[k], mu[k] + sigma[k], color="tab:red", alpha=0.2,
                        label="mean ± std" if k == 0 else None)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("Hz")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def plot_energy(path, curves: Mapping[str, np.ndarray], frame_rate: float = FRAME_RATE) -> Path:
    """Frame energy (mel-column norm) for one or more mels."""
    fig, ax = plt.subplots(figsize=(10, 3))
    for label, mel in curves.items():
        e = np.linalg.norm(np.asarray(mel, dtype=float), axis=1)
        ax.plot(np.arange(len(e)) / frame_rate, e, lw=0.9, label=label)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("energy")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_mel(path, mel: np.ndarray, frame_rate: float = FRAME_RATE, title: str = "mel") -> Path:
    mel = np.asarray(mel)
    fig, ax = plt.subplots(figsize=(10, 3.5))
    im = ax.imshow(mel.T, origin="lower", aspect="auto", extent=(0, len(mel) / frame_rate, 0, mel.shape[1]))
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("mel bin")
    ax.set_title(title)
    return _save(fig, path)


def pca_2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x = x - x.mean(0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt[:2].T


def plot_embeddings_pca(path, vectors: np.ndarray, labels: Sequence[str], title: str = "embeddings") -> Path:
    """2-D PCA scatter, one colour per label."""
    xy = pca_2d(vectors)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    uniq = list(dict.fromkeys(labels))
    cmap = plt.get_cmap("tab10")
    labels = np.asarray(labels)
    for k, lab in enumerate(uniq):
        sel = labels == lab
        ax.scatter(xy[sel, 0], xy[sel, 1], s=40, color=cmap(k % 10), label=lab)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_sync_accumulation(path, traces: Mapping[str, Sequence[float]], frame_rate: float = FRAME_RATE) -> Path:
    """Running synchronisation error against phoneme position, one line per predictor."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for label, trace in traces.items():
        ax.plot(np.arange(1, len(trace) + 1), np.asarray(trace) / frame_rate, label=label)
    ax.axhline(0, color="0.6", lw=0.8)
    ax.set_xlabel("phoneme index")
    ax.set_ylabel("SyncErr (s)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_erf(path, profiles: Mapping[str, np.ndarray], out_index: int | None = None) -> Path:
    """Gradient-norm profiles from the receptive-field probe."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for label, prof in profiles.items():
        p = np.asarray(prof, dtype=float)
        ax.plot(p / (p.max() or 1.0), label=label)
    if out_index is not None:
        ax.axvline(out_index, color="0.6", ls="--", lw=0.8)
    ax.set_xlabel("input frame")
    ax.set_ylabel("|grad| (normalised)")
    ax.legend(fontsize=8)
    return _save(fig, path)
