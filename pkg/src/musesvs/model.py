"""Full acoustic model: input embedding, encoder, variance adaptor, length regulator, decoder.

The global style vector enters the decoder input as a projected frame bias.
During training it comes from the reference encoder applied to the target
mel; at synthesis it is rebuilt from the singer and emotion tables, which are
distilled toward the reference vectors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .blocks import Decoder, Encoder, length_regulate, length_regulate_batch
from .config import ModelConfig
from .embedding import InputEmbedding, JointEmbeddingSeq, emotion_interpolation, mix
from .score_io import AttributeContext, EmbeddingMode, Score, note_hz
from .style import StyleReference, StyleVector
from .variance import AdaptorOutput, DurationPlan, PitchStats, Teacher, VarianceAdaptor, realize_f0


@dataclass
class Batch:
    """Padded per-phoneme inputs (B, L) plus optional targets."""

    phonemes: torch.Tensor
    pitches: torch.Tensor
    note_dur: torch.Tensor
    note_hz: torch.Tensor
    mask: torch.Tensor
    singer: torch.Tensor
    emo_index: torch.Tensor
    emo_t: torch.Tensor
    syllable_index: torch.Tensor
    contexts: list
    duration: Optional[torch.Tensor] = None
    mean_hz: Optional[torch.Tensor] = None
    cv: Optional[torch.Tensor] = None
    energy: Optional[torch.Tensor] = None
    mel: Optional[torch.Tensor] = None
    mel_lengths: Optional[torch.Tensor] = None

    def teacher(self) -> Teacher:
        return Teacher(self.mean_hz, self.cv, self.energy, self.duration)

    def target_pitch(self) -> PitchStats:
        return PitchStats(self.note_hz, self.mean_hz, self.cv, (self.note_hz > 0) & self.mask)


def _pad(seqs, dtype, fill=0):
    L = max(len(s) for s in seqs)
    out = torch.full((len(seqs), L), fill, dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(np.asarray(s), dtype=dtype)
    return out


def syllable_index(score: Score) -> np.ndarray:
    bounds = score.syllable_bounds or tuple((i, i + 1) for i in range(len(score)))
    idx = np.zeros(len(score), dtype=np.int64)
    for k, (a, b) in enumerate(bounds):
        idx[a:b] = k
    return idx


def collate(scores: Sequence[Score], contexts: Sequence[AttributeContext], emotion_table,
            samples=None) -> Batch:
    """Batch scores and contexts; ``samples`` (corpus samples aligned with scores) adds targets."""
    mode = emotion_table.mode
    contexts = [c if c.mode is mode else dataclasses.replace(c, mode=mode) for c in contexts]
    emo_index, emo_t = emotion_interpolation(contexts, emotion_table)
    batch = Batch(
        phonemes=_pad([s.phonemes for s in scores], torch.long),
        pitches=_pad([s.note_pitches for s in scores], torch.long),
        note_dur=_pad([s.note_durations for s in scores], torch.long, 1),
        note_hz=_pad([note_hz(s) for s in scores], torch.float32),
        mask=_pad([np.ones(len(s), bool) for s in scores], torch.bool, False),
        singer=torch.tensor([c.singer_id for c in contexts], dtype=torch.long),
        emo_index=emo_index,
        emo_t=emo_t,
        syllable_index=_pad([syllable_index(s) for s in scores], torch.long, -1),
        contexts=contexts,
    )
    if samples is not None:
        batch.duration = _pad([s.duration for s in samples], torch.long, 1)
        batch.mean_hz = _pad([s.mean_hz for s in samples], torch.float32)
        batch.cv = _pad([s.cv for s in samples], torch.float32)
        batch.energy = _pad([s.energy for s in samples], torch.float32)
        T = max(len(s.mel) for s in samples)
        mel = torch.zeros(len(samples), T, samples[0].mel.shape[1])
        for i, s in enumerate(samples):
            mel[i, : len(s.mel)] = torch.from_numpy(np.asarray(s.mel, dtype=np.float32))
        batch.mel = mel
        batch.mel_lengths = torch.tensor([len(s.mel) for s in samples], dtype=torch.long)
    return batch


def collate_samples(samples, emotion_table) -> Batch:
    return collate([s.score for s in samples], [s.ctx for s in samples], emotion_table, samples)


@dataclass
class TrainOutput:
    adaptor: AdaptorOutput
    mel: torch.Tensor  # (B, T, n_mels), T from ground-truth durations
    frame_mask: torch.Tensor
    style: StyleVector


@dataclass
class Synthesis:
    mel: np.ndarray  # (T, n_mels)
    durations: np.ndarray  # rounded frames per phoneme
    plan: DurationPlan
    pitch: PitchStats
    energy: np.ndarray
    f0: np.ndarray
    stages: list[JointEmbeddingSeq]
    style: StyleVector


class MuseSVS(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = InputEmbedding(len(cfg.phonemes), d, cfg.max_duration)
        self.encoder = Encoder(d, cfg.enc_layers, cfg.enc_heads, cfg.enc_filters, cfg.enc_kernel, cfg.enc_dropout)
        self.adaptor = VarianceAdaptor(
            d, cfg.n_singers, cfg.embedding_mode, cfg.va_layers, cfg.va_filters, cfg.va_kernel, cfg.va_dropout,
            cfg.crdp_hidden, cfg.frame_rate, cfg.duration_predictors, cfg.statistical_pitch,
        )
        if cfg.dec_block == "aspp":
            self.decoder = Decoder.aspp(d, cfg.dec_layers, cfg.dec_heads, cfg.n_mels, cfg.aspp_filters,
                                        cfg.aspp_dilations, cfg.aspp_kernel, cfg.dec_dropout)
        else:
            self.decoder = Decoder.fft(d, cfg.dec_layers, cfg.dec_heads, cfg.n_mels, cfg.dec_filters,
                                       cfg.aspp_kernel, cfg.dec_dropout)
        self.style = StyleReference(cfg.n_mels, cfg.ref_filters, cfg.ref_kernel, cfg.ref_stride, cfg.ref_gru,
                                    cfg.gst_tokens, cfg.gst_token_dim, cfg.gst_hidden, cfg.gst_heads, d,
                                    freeze=cfg.freeze_reference)
        self.style_proj = nn.Linear(d, d)

    @property
    def emotion_table(self):
        return self.adaptor.emotion_table

    @property
    def singer_table(self):
        return self.adaptor.singer_table

    def encode(self, batch: Batch) -> JointEmbeddingSeq:
        low = self.embed(batch.phonemes, batch.pitches, batch.note_dur)
        return JointEmbeddingSeq(self.encoder(low * batch.mask.unsqueeze(-1), batch.mask), 0)

    def table_emotion(self, batch: Batch) -> torch.Tensor:
        """Emotion base embeddings (B, d) mixed from the table entries."""
        table = self.emotion_table
        endpoint = table(batch.emo_index)
        if table.mode is EmbeddingMode.LEVEL_WISE:
            return endpoint
        return mix(endpoint, table.entry("neutral").expand_as(endpoint), batch.emo_t)

    def table_style(self, batch: Batch) -> torch.Tensor:
        """Style vector rebuilt from the tables, in the mean-removed frame of the reference vectors."""
        singer = self.singer_table(batch.singer)
        return singer - self.singer_table.weight.mean(0) + self.table_emotion(batch)

    def decode(self, frames, frame_mask, style: torch.Tensor):
        bias = self.style_proj(style).unsqueeze(1)
        return self.decoder((frames + bias) * frame_mask.unsqueeze(-1), frame_mask)

    def adapt(self, batch: Batch, teacher: Optional[Teacher] = None) -> AdaptorOutput:
        E0 = self.encode(batch)
        return self.adaptor(E0, batch.mask, batch.singer, batch.emo_index, batch.emo_t, batch.note_hz,
                            batch.note_dur, teacher)

    def forward(self, batch: Batch) -> TrainOutput:
        """Teacher-forced pass: ground-truth pitch/energy feed the encoders, ground-truth durations expand."""
        out = self.adapt(batch, batch.teacher())
        frames, frame_mask = length_regulate_batch(out.joint.values, batch.duration, batch.mask)
        style, _ = self.style(batch.mel, batch.mel_lengths)
        centred = style.values - self.style.style_mean
        mel = self.decode(frames, frame_mask, centred)
        return TrainOutput(out, mel, frame_mask, style)

    @torch.no_grad()
    def synthesize(self, score: Score, ctx: AttributeContext, predictor: Optional[str] = None,
                   vibrato_hz: float = 5.5, seed: int = 0) -> Synthesis:
        """Inference path: predicted pitch, energy and durations; style from the tables."""
        predictor = predictor or self.cfg.duration_predictor
        if predictor not in self.adaptor.duration_predictors:
            raise ValueError(f"model has no {predictor!r} duration predictor")
        was_training = self.training
        self.eval()
        try:
            batch = collate([score], [ctx], self.emotion_table)
            out = self.adapt(batch)
            plan = out.durations[predictor]
            durations = plan.rounded()[0]
            E4 = out.joint.values[0]
            frames = length_regulate(E4, durations).unsqueeze(0)
            frame_mask = torch.ones(frames.shape[:2], dtype=torch.bool)
            style = self.table_style(batch)
            mel = self.decode(frames, frame_mask, style)[0]
        finally:
            self.train(was_training)
        pitch = PitchStats(*(x[0] for x in (out.pitch.note_hz, out.pitch.mean_hz, out.pitch.cv, out.pitch.voiced)))
        f0 = realize_f0(pitch, durations, vibrato_hz, seed, self.cfg.frame_rate)
        return Synthesis(
            mel=mel.numpy(), durations=durations.numpy(), plan=plan, pitch=pitch,
            energy=out.energy[0].numpy(), f0=f0, stages=[JointEmbeddingSeq(s.values[0], s.stage) for s in out.stages],
            style=StyleVector(style[0], "table"),
        )
