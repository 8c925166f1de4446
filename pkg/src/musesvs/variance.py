"""Variance adaptor: attribute predictors and encoders, statistical pitch predictor, duration predictors.

All per-phoneme tensors are batched as (B, L) with a boolean validity mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .embedding import (
    AttributeTable,
    JointEmbeddingSeq,
    ResidualAttributeEncoder,
    accumulate_residual,
    mix,
)
from .score_io import EmbeddingMode

PITCH_FEATURE_SCALE = (100.0, 10.0)  # (relative mean deviation -> percent, CV x 10)
ENERGY_FEATURE_SCALE = 0.5  # phoneme energies of the synthetic corpus lie in about [0, 3]


@dataclass
class PitchStats:
    note_hz: torch.Tensor
    mean_hz: torch.Tensor
    cv: torch.Tensor
    voiced: torch.Tensor

    @property
    def residual(self) -> torch.Tensor:
        return self.mean_hz - self.note_hz


@dataclass
class DurationPlan:
    """Predicted and note durations with the running synchronisation error.

    ``sync_err[..., i] = sum_{j<=i} predicted[j] - sum_{j<=i} note[j]`` over valid phonemes.
    """

    predicted: torch.Tensor
    note: torch.Tensor
    mask: torch.Tensor
    sync_err: torch.Tensor = None
    ratio: Optional[torch.Tensor] = None  # note-normalisation baseline only

    def __post_init__(self):
        if self.sync_err is None:
            diff = (self.predicted - self.note) * self.mask
            self.sync_err = torch.cumsum(diff, dim=-1)

    def check(self, atol: float = 0.0) -> None:
        """Assert the SyncErr recurrence and its telescoping identity."""
        diff = (self.predicted - self.note) * self.mask
        prev = F.pad(self.sync_err[..., :-1], (1, 0))
        if not torch.allclose(self.sync_err, prev + diff, rtol=0, atol=atol):
            raise AssertionError("SyncErr recurrence violated")
        end = self.sync_err[..., -1]
        total = (self.predicted * self.mask).sum(-1) - (self.note * self.mask).sum(-1)
        if not torch.allclose(end, total, rtol=1e-12 if end.dtype == torch.float64 else 1e-5,
                              atol=max(atol, 1e-4)):
            raise AssertionError("SyncErr telescoping identity violated")

    def rounded(self) -> torch.Tensor:
        return round_durations(self.predicted, self.mask)


def round_durations(predicted: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Integer frames >= 1 whose running sum tracks the running sum of ``predicted``.

    The remainder of each rounding is carried into the next phoneme, so the
    cumulative rounding error stays below one frame plus the clamp deficit.
    """
    pred = predicted.detach().double().cpu().numpy()
    m = mask.cpu().numpy().astype(bool)
    flat_p = pred.reshape(-1, pred.shape[-1])
    flat_m = m.reshape(-1, m.shape[-1])
    out = np.zeros(flat_p.shape, dtype=np.int64)
    for row in range(flat_p.shape[0]):
        carry = 0.0
        for i in np.flatnonzero(flat_m[row]):
            want = flat_p[row, i] + carry
            d = max(1, int(math.floor(want + 0.5)))
            carry = want - d
            out[row, i] = d
    out = out.reshape(pred.shape)
    return torch.from_numpy(out).to(predicted.device)


class VariancePredictor(nn.Module):
    """Stacked conv1d -> ReLU -> LayerNorm -> dropout layers and a linear output."""

    def __init__(self, dim: int, out_dim: int = 1, layers: int = 2, filters: int = 384, kernel: int = 3,
                 dropout: float = 0.5):
        super().__init__()
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(layers):
            self.convs.append(nn.Conv1d(dim if i == 0 else filters, filters, kernel, padding=kernel // 2))
            self.norms.append(nn.LayerNorm(filters))
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(filters, out_dim)

    def forward(self, x, mask=None):
        for conv, norm in zip(self.convs, self.norms):
            if mask is not None:
                x = x * mask.unsqueeze(-1)
            x = self.dropout(norm(torch.relu(conv(x.transpose(1, 2)).transpose(1, 2))))
        y = self.out(x).squeeze(-1)
        return y if mask is None else y * mask


class PitchPredictor(nn.Module):
    """Phoneme-level pitch statistics: mean as note pitch plus a residual, and the coefficient of variation."""

    def __init__(self, dim, layers=2, filters=384, kernel=3, dropout=0.5, statistical=True):
        super().__init__()
        self.residual_head = VariancePredictor(dim, 1, layers, filters, kernel, dropout)
        self.cv_head = VariancePredictor(dim, 1, layers, filters, kernel, dropout) if statistical else None

    def forward(self, E2, note_hz, voiced, mask=None) -> PitchStats:
        r = self.residual_head(E2, mask)
        mean = (note_hz + r) * voiced
        if self.cv_head is None:
            cv = torch.zeros_like(mean)
        else:
            cv = F.softplus(self.cv_head(E2, mask)) * voiced
        return PitchStats(note_hz=note_hz, mean_hz=mean, cv=cv, voiced=voiced)


def pitch_features(mean_hz, cv, note_hz, voiced):
    """Scaled (relative mean deviation, CV) pairs fed to the pitch encoder; zero on rests."""
    safe = torch.where(voiced, note_hz, torch.ones_like(note_hz))
    rel = (mean_hz - note_hz) / safe
    feats = torch.stack([rel * PITCH_FEATURE_SCALE[0], cv * PITCH_FEATURE_SCALE[1]], dim=-1)
    return feats * voiced.unsqueeze(-1)


def _masked_mean(x, mask):
    m = mask.to(x.dtype)
    return (x * m).sum(-1) / m.sum(-1).clamp(min=1)


def pitch_loss(pred: PitchStats, target: PitchStats, lambda_pm: float = 1.0, lambda_pcv: float = 10.0,
               mask: Optional[torch.Tensor] = None):
    """Absolute error of mean pitch (Hz) and CV over voiced phonemes, per-sample mean then batch mean.

    ``sqrt(x**2)`` is written as ``|x|``.
    """
    if pred.mean_hz.shape != target.mean_hz.shape:
        raise ValueError("prediction and target lengths differ")
    m = target.voiced if mask is None else target.voiced & mask
    mean_term = _masked_mean((pred.mean_hz - target.mean_hz).abs(), m)
    cv_term = _masked_mean((pred.cv - target.cv).abs(), m)
    return (lambda_pm * mean_term + lambda_pcv * cv_term).mean()


def realize_f0(stats: PitchStats, durations, vibrato_rate_hz: float = 5.5, rng_seed=0,
               frame_rate: float = 93.75) -> np.ndarray:
    """Frame-level F0 contour from phoneme statistics for one (unbatched) sequence.

    Within phoneme i, F0 = mean_i * (1 + sqrt(2) * cv_i * sin(2 pi f n / frame_rate + phase_i)),
    so the per-phoneme standard deviation approaches mean_i * cv_i. Rests are 0 Hz.
    """
    mean = np.asarray(_np(stats.mean_hz), dtype=float)
    cv = np.asarray(_np(stats.cv), dtype=float)
    voiced = np.asarray(_np(stats.voiced), dtype=bool)
    durations = np.asarray(_np(durations), dtype=int)
    if not mean.shape == cv.shape == durations.shape:
        raise ValueError("statistics and durations must align")
    rng = np.random.default_rng(rng_seed)
    phases = rng.uniform(0.0, 2 * np.pi, size=len(durations))
    out = []
    for mu, c, v, d, ph in zip(mean, cv, voiced, durations, phases):
        n = np.arange(d)
        if not v:
            out.append(np.zeros(d))
            continue
        out.append(mu * (1 + np.sqrt(2) * c * np.sin(2 * np.pi * vibrato_rate_hz * n / frame_rate + ph)))
    return np.concatenate(out) if out else np.zeros(0)


def _np(x):
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else x


class EnergyPredictor(nn.Module):
    def __init__(self, dim, layers=2, filters=384, kernel=3, dropout=0.5):
        super().__init__()
        self.net = VariancePredictor(dim, 1, layers, filters, kernel, dropout)

    def forward(self, E3, mask=None):
        e = F.softplus(self.net(E3, mask))
        return e if mask is None else e * mask


def energy_loss(pred, target, mask):
    return _masked_mean((pred - target) ** 2, mask).mean()


class CRDP(nn.Module):
    """Context-aware residual duration predictor.

    A GRU cell walks over the phonemes; at step i it reads the stage-2 joint
    embedding and the synchronisation error accumulated so far (in seconds) and
    emits the residual from the note duration.
    """

    def __init__(self, dim: int, hidden: int = 384, frame_rate: float = 93.75):
        super().__init__()
        self.frame_rate = frame_rate
        self.cell = nn.GRUCell(dim + 1, hidden)
        self.head = nn.Linear(hidden, 1)

    def step(self, state, E2_i, sync_err_prev, note_i):
        """One autoregressive step.

        Args:
            state: GRU hidden state (B, H).
            E2_i: Joint embedding of phoneme i (B, d).
            sync_err_prev: SyncErr(i-1) in frames (B,).
            note_i: Note duration of phoneme i in frames (B,).

        Returns:
            Tuple[Tensor, Tensor]: Predicted duration d_hat_i = note_i + s_hat_i (B,) and the new state.

        """
        x = torch.cat([E2_i, (sync_err_prev / self.frame_rate).unsqueeze(-1).to(E2_i.dtype)], dim=-1)
        state = self.cell(x, state)
        s_hat = self.head(state).squeeze(-1)
        return note_i + s_hat, state

    def forward(self, E2, note, mask) -> DurationPlan:
        B, L, _ = E2.shape
        note = note.to(E2.dtype)
        state = E2.new_zeros(B, self.cell.hidden_size)
        sync = E2.new_zeros(B)
        preds, syncs = [], []
        for i in range(L):
            m = mask[:, i]
            d_hat, new_state = self.step(state, E2[:, i], sync, note[:, i])
            if not self.training:
                d_hat = d_hat.clamp(min=1.0)
            d_hat = torch.where(m, d_hat, torch.zeros_like(d_hat))
            state = torch.where(m.unsqueeze(-1), new_state, state)
            sync = sync + torch.where(m, d_hat - note[:, i], torch.zeros_like(d_hat))
            preds.append(d_hat)
            syncs.append(sync)
        return DurationPlan(torch.stack(preds, 1), note * mask, mask, torch.stack(syncs, 1))


def duration_loss(plan: DurationPlan, target_d, lambda_sync: float = 0.3):
    """Per-sample (1/N) * [sum (d_hat - d)^2 + lambda_sync * |sum_i SyncErr(i)|], averaged over the batch."""
    if plan.predicted.shape != target_d.shape:
        raise ValueError("prediction and target lengths differ")
    m = plan.mask.to(plan.predicted.dtype)
    n = m.sum(-1).clamp(min=1)
    sq = (((plan.predicted - target_d) ** 2) * m).sum(-1)
    sync = (plan.sync_err * m).sum(-1).abs()
    return ((sq + lambda_sync * sync) / n).mean()


class NoteNormDurationPredictor(nn.Module):
    """Parallel baseline predicting the ratio of phoneme duration to note duration."""

    def __init__(self, dim, layers=2, filters=384, kernel=3, dropout=0.5):
        super().__init__()
        self.net = VariancePredictor(dim, 1, layers, filters, kernel, dropout)
        nn.init.constant_(self.net.out.bias, math.log(math.e - 1))  # softplus -> 1

    def forward(self, E2, note, mask) -> DurationPlan:
        ratio = F.softplus(self.net(E2, mask)) * mask
        note = note.to(E2.dtype)
        pred = ratio * note
        if not self.training:
            pred = torch.where(mask, pred.clamp(min=1.0), pred)
        return DurationPlan(pred, note * mask, mask, ratio=ratio)


def note_norm_loss(plan: DurationPlan, target_d):
    target_ratio = target_d / plan.note.clamp(min=1)
    return _masked_mean((plan.ratio - target_ratio) ** 2, plan.mask).mean()


class SyllableDurationPredictor(nn.Module):
    """Parallel baseline predicting phoneme durations directly (log-domain output head)."""

    def __init__(self, dim, layers=2, filters=384, kernel=3, dropout=0.5, init_frames: float = 8.0):
        super().__init__()
        self.net = VariancePredictor(dim, 1, layers, filters, kernel, dropout)
        nn.init.constant_(self.net.out.bias, math.log(init_frames))

    def forward(self, E2, note, mask) -> DurationPlan:
        pred = torch.exp(self.net(E2, mask).clamp(max=10.0)) * mask
        if not self.training:
            pred = torch.where(mask, pred.clamp(min=1.0), pred)
        return DurationPlan(pred, note.to(E2.dtype) * mask, mask)


def syllable_sums(x, syllable_index, n_syllables: int):
    """Sum per-phoneme values into syllables; ``syllable_index`` is -1 on padding."""
    idx = syllable_index.clamp(min=0)
    out = x.new_zeros(x.shape[0], n_syllables)
    return out.scatter_add(1, idx, x * (syllable_index >= 0).to(x.dtype))


def syllable_duration_loss(plan: DurationPlan, target_d, syllable_index):
    if syllable_index is None:
        raise ValueError("syllable duration loss needs syllable bounds")
    m = plan.mask
    phoneme_term = _masked_mean((plan.predicted - target_d) ** 2, m)
    n_syl = int(syllable_index.max()) + 1
    pred_s = syllable_sums(plan.predicted * m, syllable_index, n_syl)
    true_s = syllable_sums(target_d * m, syllable_index, n_syl)
    syl_mask = syllable_sums(torch.ones_like(target_d), syllable_index, n_syl) > 0
    syllable_term = _masked_mean((pred_s - true_s) ** 2, syl_mask)
    return (phoneme_term + syllable_term).mean()


@dataclass
class Teacher:
    """Ground-truth per-phoneme targets used for teacher forcing."""

    mean_hz: torch.Tensor
    cv: torch.Tensor
    energy: torch.Tensor
    duration: torch.Tensor


@dataclass
class AdaptorOutput:
    joint: JointEmbeddingSeq
    pitch: PitchStats
    energy: torch.Tensor
    durations: dict[str, DurationPlan]
    stages: list[JointEmbeddingSeq] = field(default_factory=list)


class VarianceAdaptor(nn.Module):
    def __init__(self, dim: int, n_singers: int, mode: EmbeddingMode | str = "interpolated", layers=2,
                 filters=384, kernel=3, dropout=0.5, crdp_hidden=384, frame_rate=93.75,
                 duration_predictors=("crdp",), statistical_pitch=True):
        super().__init__()
        self.mode = EmbeddingMode(mode)
        self.singer_table = AttributeTable.singers(n_singers, dim)
        self.emotion_table = AttributeTable.emotions(self.mode, dim)
        self.singer_encoder = ResidualAttributeEncoder(dim, None, filters, kernel, dropout)
        self.emotion_encoder = ResidualAttributeEncoder(dim, None, filters, kernel, dropout)
        self.pitch_predictor = PitchPredictor(dim, layers, filters, kernel, dropout, statistical_pitch)
        self.pitch_encoder = ResidualAttributeEncoder(dim, 2, filters, kernel, dropout)
        self.energy_predictor = EnergyPredictor(dim, layers, filters, kernel, dropout)
        self.energy_encoder = ResidualAttributeEncoder(dim, 1, filters, kernel, dropout)
        predictors = {
            "crdp": lambda: CRDP(dim, crdp_hidden, frame_rate),
            "note_norm": lambda: NoteNormDurationPredictor(dim, layers, filters, kernel, dropout),
            "syllable": lambda: SyllableDurationPredictor(dim, layers, filters, kernel, dropout),
        }
        self.duration_predictors = nn.ModuleDict({k: predictors[k]() for k in duration_predictors})

    def emotion_residual(self, E1, emo_index, emo_t, mask=None):
        """Residual emotion embedding; interpolated mode mixes the endpoint residuals with weight t."""
        endpoint = self.emotion_table(emo_index)
        r_end = endpoint.unsqueeze(-2) + self.emotion_encoder(E1, endpoint, mask)
        if self.mode is EmbeddingMode.LEVEL_WISE:
            return r_end
        neutral = self.emotion_table.entry("neutral").expand_as(endpoint)
        r_neu = neutral.unsqueeze(-2) + self.emotion_encoder(E1, neutral, mask)
        return mix(r_end, r_neu, emo_t)

    def forward(self, E0: JointEmbeddingSeq, mask, singer_ids, emo_index, emo_t, note_hz, note_dur,
                teacher: Optional[Teacher] = None) -> AdaptorOutput:
        voiced = (note_hz > 0) & mask
        mvec = mask.unsqueeze(-1).to(E0.values.dtype)
        stages = [E0]

        singer = self.singer_table(singer_ids)
        R1 = (singer.unsqueeze(-2) + self.singer_encoder(E0.values, singer, mask)) * mvec
        E1 = accumulate_residual(E0, R1)
        stages.append(E1)

        R2 = self.emotion_residual(E1.values, emo_index, emo_t, mask) * mvec
        E2 = accumulate_residual(E1, R2)
        stages.append(E2)

        pitch = self.pitch_predictor(E2.values, note_hz, voiced, mask)
        if teacher is not None:
            if teacher.mean_hz.shape != note_hz.shape:
                raise ValueError("teacher sequence length mismatch")
            feats = pitch_features(teacher.mean_hz, teacher.cv, note_hz, voiced)
        else:
            feats = pitch_features(pitch.mean_hz, pitch.cv, note_hz, voiced)
        E3 = accumulate_residual(E2, self.pitch_encoder(E2.values, feats, mask))
        stages.append(E3)

        energy = self.energy_predictor(E3.values, mask)
        e_in = teacher.energy if teacher is not None else energy
        E4 = accumulate_residual(E3, self.energy_encoder(E3.values, (e_in * ENERGY_FEATURE_SCALE).unsqueeze(-1),
                                                         mask))
        stages.append(E4)

        durations = {k: p(E2.values, note_dur, mask) for k, p in self.duration_predictors.items()}
        return AdaptorOutput(joint=E4, pitch=pitch, energy=energy, durations=durations, stages=stages)
