"""Objective metrics: phoneme pitch-distribution distance, synchronisation error, duration RMSE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import FRAME_RATE


def frechet_gaussian(mu1: float, sigma1: float, mu2: float, sigma2: float) -> float:
    """Closed-form 2-Wasserstein (Frechet) distance between two univariate Gaussians."""
    if sigma1 < 0 or sigma2 < 0:
        raise ValueError("standard deviations must be non-negative")
    return math.hypot(mu1 - mu2, sigma1 - sigma2)


@dataclass(frozen=True)
class PhonemePitchObservation:
    """Per-phoneme (mean, std) of synthesized and ground-truth F0 for one sample."""

    mu_pred: np.ndarray
    sigma_pred: np.ndarray
    mu_true: np.ndarray
    sigma_true: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=float) for a in (self.mu_pred, self.sigma_pred, self.mu_true, self.sigma_true)]
        voiced = np.asarray(self.voiced, dtype=bool)
        if any(a.shape != voiced.shape for a in arrays):
            raise ValueError("all per-phoneme arrays must have the same length")
        if (arrays[1] < 0).any() or (arrays[3] < 0).any():
            raise ValueError("standard deviations must be non-negative")
        for name, a in zip(("mu_pred", "sigma_pred", "mu_true", "sigma_true"), arrays):
            object.__setattr__(self, name, a)
        object.__setattr__(self, "voiced", voiced)

    def distances(self) -> np.ndarray:
        v = self.voiced
        return np.hypot(self.mu_pred[v] - self.mu_true[v], self.sigma_pred[v] - self.sigma_true[v])


def pitch_error(obs: Sequence[PhonemePitchObservation], normalized: bool = False) -> float:
    """Mean over samples of the summed per-phoneme Frechet distances.

    The per-sample sum is not divided by the phoneme count, so longer samples
    weigh more; ``normalized=True`` divides by the voiced-phoneme count instead.
    """
    if not obs:
        raise ValueError("pitch_error needs at least one sample")
    return float(np.mean(per_sample_pitch_error(obs, normalized)))


def per_sample_pitch_error(obs: Sequence[PhonemePitchObservation], normalized: bool = False) -> list[float]:
    out = []
    for o in obs:
        d = o.distances()
        out.append(float(d.mean()) if normalized and len(d) else float(d.sum()))
    return out


def _sync_one(predicted, note) -> float:
    predicted = np.asarray(predicted, dtype=float)
    note = np.asarray(note, dtype=float)
    if note.size == 0 or note.sum() <= 0:
        raise ValueError("note sequence must be non-empty with positive total length")
    return abs(predicted.sum() - note.sum()) / note.sum()


def sync_error(plans: Iterable[tuple[Sequence[float], Sequence[float]]]) -> float:
    """Mean over songs of |sum(predicted) - sum(note)| / sum(note)."""
    errs = [_sync_one(p, n) for p, n in plans]
    if not errs:
        raise ValueError("sync_error needs at least one song")
    return float(np.mean(errs))


def _rmse_one(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty duration sequence")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def duration_rmse(pred: Sequence[Sequence[float]], truth: Sequence[Sequence[float]],
                  frame_rate: float = FRAME_RATE) -> tuple[float, float]:
    """Per-sample RMSE averaged over samples, as (frames, seconds)."""
    if len(pred) != len(truth):
        raise ValueError("need one prediction per ground-truth sample")
    if not pred:
        raise ValueError("duration_rmse needs at least one sample")
    frames = float(np.mean([_rmse_one(p, t) for p, t in zip(pred, truth)]))
    return frames, frames / frame_rate


def extract_phoneme_pitch_stats(f0, durations, voiced=None):
    """Population mean, std and CV of F0 inside each phoneme interval.

    Intervals shorter than two frames report a std of 0. Phonemes where
    ``voiced`` is False are left out of the returned arrays.

    Returns:
        Tuple[ndarray, ndarray, ndarray]: ``(mu, sigma, cv)``.

    """
    f0 = np.asarray(f0, dtype=float)
    durations = np.asarray(durations, dtype=int)
    if durations.sum() != len(f0):
        raise ValueError(f"durations cover {durations.sum()} frames but the contour has {len(f0)}")
    voiced = np.ones(len(durations), bool) if voiced is None else np.asarray(voiced, dtype=bool)
    if voiced.shape != durations.shape:
        raise ValueError("one voicing flag per phoneme is required")
    bounds = np.concatenate([[0], np.cumsum(durations)])
    mu, sigma = [], []
    for a, b, v in zip(bounds[:-1], bounds[1:], voiced):
        if not v:
            continue
        seg = f0[a:b]
        mu.append(seg.mean() if len(seg) else 0.0)
        sigma.append(seg.std() if len(seg) >= 2 else 0.0)
    mu, sigma = np.asarray(mu), np.asarray(sigma)
    cv = np.divide(sigma, mu, out=np.zeros_like(sigma), where=mu > 0)
    return mu, sigma, cv


def metric_report(pitch_obs: Sequence[PhonemePitchObservation], predicted: Sequence[Sequence[float]],
                  note: Sequence[Sequence[float]], truth: Sequence[Sequence[float]],
                  names: Sequence[str] | None = None, frame_rate: float = FRAME_RATE) -> dict:
    """JSON-ready report with the aggregate metrics and a per-sample breakdown."""
    names = list(names) if names is not None else [f"sample_{i}" for i in range(len(predicted))]
    rm_frames, rm_seconds = duration_rmse(predicted, truth, frame_rate)
    p_err = per_sample_pitch_error(pitch_obs)
    return {
        "error_p": float(np.mean(p_err)),
        "error_p_normalized": pitch_error(pitch_obs, normalized=True),
        "error_s": sync_error(zip(predicted, note)),
        "rmse_d_frames": rm_frames,
        "rmse_d_seconds": rm_seconds,
        "per_sample": [
            {
                "name": n,
                "error_p": pe,
                "error_s": _sync_one(p, nt),
                "rmse_d_frames": _rmse_one(p, t),
                "end_sync_err_frames": float(np.sum(p) - np.sum(nt)),
            }
            for n, pe, p, nt, t in zip(names, p_err, predicted, note, truth)
        ],
    }


@dataclass
class PredictorRun:
    """Inference outputs of one duration predictor over a set of samples."""

    names: list
    predicted: list  # rounded frames per phoneme
    note: list
    truth: list
    sync_trace: list  # running SyncErr per phoneme of the rounded plan
    cv: list  # predicted CV on voiced phonemes
    pitch_obs: list


def run_predictor(model, samples, predictor: str, batch_size: int = 16, vibrato_hz: float = 5.5, seed: int = 0,
                  contexts=None) -> PredictorRun:
    """Predict durations and pitch statistics for every sample without decoding mels.

    Args:
        model: A trained generator.
        samples: Corpus samples (score, context and ground truth).
        predictor: Name of the duration head to roll out.
        batch_size: Samples per adaptor pass.
        vibrato_hz: Vibrato rate used to realise F0 contours.
        seed: Phase seed for the F0 realisation.
        contexts: Optional replacement contexts, one per sample.

    Returns:
        PredictorRun: Per-sample predictions aligned with ``samples``.

    """
    import torch

    from .model import collate
    from .variance import PitchStats, realize_f0

    run = PredictorRun([], [], [], [], [], [], [])
    model.eval()
    ctxs = [s.ctx for s in samples] if contexts is None else list(contexts)
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            batch = collate([s.score for s in chunk], ctxs[lo:lo + batch_size], model.emotion_table)
            out = model.adapt(batch)
            plan = out.durations[predictor]
            rounded = plan.rounded()
            for i, s in enumerate(chunk):
                n = len(s.score)
                d = rounded[i, :n].numpy()
                note = np.asarray(s.score.note_durations)
                voiced = s.score.voiced
                stats = PitchStats(*(x[i, :n].numpy() for x in (out.pitch.note_hz, out.pitch.mean_hz, out.pitch.cv,
                                                                out.pitch.voiced)))
                f0 = realize_f0(stats, d, vibrato_hz, seed, model.cfg.frame_rate)
                mu_p, sd_p, _ = extract_phoneme_pitch_stats(f0, d, voiced)
                mu_t, sd_t, _ = extract_phoneme_pitch_stats(s.f0, s.duration, voiced)
                run.names.append(s.name)
                run.predicted.append(d)
                run.note.append(note)
                run.truth.append(np.asarray(s.duration))
                run.sync_trace.append(np.cumsum(d - note))
                run.cv.append(stats.cv[voiced])
                run.pitch_obs.append(PhonemePitchObservation(mu_p, sd_p, mu_t, sd_t, np.ones(len(mu_p), bool)))
    return run


def report_for(run: PredictorRun, frame_rate: float = FRAME_RATE) -> dict:
    return metric_report(run.pitch_obs, run.predicted, run.note, run.truth, run.names, frame_rate)
