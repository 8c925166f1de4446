"""Model, loss and run configuration.

Two model presets are provided: ``full`` carries the reference hyperparameters
(about 100M parameters, constructible but not meant to be trained here) and
``toy`` is the desk-scale configuration used by the test-suite.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SAMPLE_RATE = 24000
HOP_LENGTH = 256
FRAME_RATE = SAMPLE_RATE / HOP_LENGTH  # 93.75 frames per second

INTENSITY_LEVELS = (0.0, 0.3, 0.7, 1.0)

DEFAULT_PHONEMES = (
    "<rest>",
    "a", "e", "i", "o", "u", "eo", "eu",
    "g", "n", "d", "r", "m", "b", "s", "j", "ch", "k", "t", "p", "h", "ng", "l",
)
VOWELS = frozenset({"a", "e", "i", "o", "u", "eo", "eu"})
REST = "<rest>"


class ConfigError(ValueError):
    """Raised for invalid configuration documents."""


@dataclass
class ModelConfig:
    phonemes: tuple[str, ...] = DEFAULT_PHONEMES
    n_singers: int = 4
    n_mels: int = 80
    frame_rate: float = FRAME_RATE
    max_duration: int = 256  # duration-embedding vocabulary, longer notes are clamped

    d_model: int = 384

    enc_layers: int = 6
    enc_heads: int = 2
    enc_kernel: int = 9
    enc_filters: int = 1536
    enc_dropout: float = 0.2

    dec_layers: int = 6
    dec_heads: int = 2
    dec_block: str = "aspp"  # "aspp" or "fft" (ablation without ASPP)
    aspp_kernel: int = 9
    aspp_dilations: tuple[int, ...] = (1, 3, 5, 7)
    aspp_filters: tuple[int, ...] = (768, 384, 192, 192)
    dec_filters: int = 1536  # hidden filters of the plain FFT decoder variant
    dec_dropout: float = 0.2

    va_layers: int = 2
    va_kernel: int = 3
    va_filters: int = 384
    va_dropout: float = 0.5
    statistical_pitch: bool = True  # False -> deterministic mean-only pitch head

    crdp_hidden: int = 384
    duration_predictors: tuple[str, ...] = ("crdp",)
    duration_predictor: str = "crdp"

    embedding_mode: str = "interpolated"

    ref_filters: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    ref_kernel: int = 3
    ref_stride: int = 2
    ref_gru: int = 192
    gst_tokens: int = 10
    gst_token_dim: int = 48
    gst_hidden: int = 384
    gst_heads: int = 8
    freeze_reference: bool = False  # stop reconstruction gradients at the reference encoder

    disc_kernel: tuple[int, int] = (9, 9)
    disc_filters: tuple[int, ...] = (1, 64, 64, 64, 64, 64)
    disc_segment: int = 128  # random frame window scored by the discriminator

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        if name == "full":
            cfg = cls()
        elif name == "toy":
            cfg = cls(
                d_model=32,
                enc_layers=2,
                enc_heads=1,
                enc_filters=128,
                dec_layers=2,
                dec_heads=1,
                aspp_filters=(64, 32, 16, 16),
                dec_filters=128,
                va_filters=32,
                crdp_hidden=32,
                ref_filters=(8, 8, 16, 16, 32, 32),
                ref_gru=32,
                gst_token_dim=16,
                gst_hidden=32,
                gst_heads=2,
                disc_kernel=(9, 9),
                disc_filters=(1, 8, 8, 8, 8, 8),
                disc_segment=32,
            )
        else:
            raise ConfigError(f"unknown preset {name!r}")
        return dataclasses.replace(cfg, **_tuplify(overrides))

    def validate(self) -> None:
        if self.d_model % 2:
            raise ConfigError("d_model must be even")
        if len(self.aspp_dilations) != len(self.aspp_filters):
            raise ConfigError("aspp_dilations and aspp_filters must have equal length")
        if len(self.disc_filters) % 2:
            raise ConfigError("disc_filters lists (in, out) channel pairs")
        if self.gst_hidden % self.gst_heads:
            raise ConfigError("gst_hidden must be divisible by gst_heads")
        if self.dec_block not in ("aspp", "fft"):
            raise ConfigError(f"unknown decoder block {self.dec_block!r}")
        known = {"crdp", "note_norm", "syllable"}
        if not set(self.duration_predictors) <= known:
            raise ConfigError(f"duration_predictors must be drawn from {sorted(known)}")
        if self.duration_predictor not in self.duration_predictors:
            raise ConfigError("duration_predictor must be one of duration_predictors")
        if self.embedding_mode not in ("interpolated", "level_wise"):
            raise ConfigError(f"unknown embedding mode {self.embedding_mode!r}")


@dataclass
class LossWeights:
    mel: float = 1.0
    pitch: float = 1.0
    energy: float = 0.8
    duration: float = 0.8
    adv_start: float = 0.01
    adv_end: float = 0.5
    pitch_mean: float = 1.0
    pitch_cv: float = 10.0
    sync: float = 0.3
    style: float = 1.0  # distillation of the singer/emotion tables


@dataclass
class CorpusConfig:
    n_samples: int = 200
    phonemes_per_sample: tuple[int, int] = (24, 48)
    n_singers: int = 4
    intensity_levels: tuple[float, ...] = INTENSITY_LEVELS
    cv_base: float = 0.01  # a0
    cv_slope: float = 0.04  # a1
    duration_jitter: float = 0.15  # alpha
    consonant_transfer: float = 0.0  # optional share of consonant length moved into the vowel at t=1
    energy_slope: float = 0.3
    vibrato_hz: float = 5.5
    note_seconds: tuple[float, float] = (0.12, 0.40)
    midi_range: tuple[int, int] = (55, 76)
    rest_prob: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.phonemes_per_sample
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if lo < 1 or hi < lo:
            raise ConfigError("phonemes_per_sample must be a non-empty range")
        if self.n_singers < 1:
            raise ConfigError("n_singers must be positive")
        if not self.intensity_levels:
            raise ConfigError("intensity_levels must not be empty")
        if self.cv_slope <= 0:
            raise ConfigError("cv_slope must be positive so CV increases with intensity")
        if self.cv_base < 0 or self.duration_jitter < 0:
            raise ConfigError("cv_base and duration_jitter must be non-negative")
        if not 0 < self.note_seconds[0] <= self.note_seconds[1]:
            raise ConfigError("note_seconds must be a positive range")
        if not 0 <= self.midi_range[0] <= self.midi_range[1] <= 127:
            raise ConfigError("midi_range must lie in [0, 127]")


@dataclass
class RunConfig:
    preset: str = "toy"
    model: dict[str, Any] = field(default_factory=dict)  # overrides on the preset
    loss: LossWeights = field(default_factory=LossWeights)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    seed: int = 0
    steps: int = 1000
    batch_size: int = 8
    lr_peak: float = 1e-3
    lr_warmup: int = 400
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    grad_clip: float = 1.0
    adv_warmup: int = 200
    adv_ramp: int = 400
    adversarial: bool = True
    soft_dtw_gamma: float = 1.0
    checkpoint_every: int = 0

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig.preset(self.preset, **self.model)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        doc = dict(doc)
        try:
            loss = LossWeights(**doc.pop("loss", {}))
            corpus = CorpusConfig(**_tuplify(doc.pop("corpus", {})))
            cfg = cls(loss=loss, corpus=corpus, **_tuplify(doc))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        corpus.validate()
        cfg.model_config()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)


def _tuplify(d: dict[str, Any]) -> dict[str, Any]:
    # JSON has no tuples; dataclass fields holding sequences are tuples
    return {k: tuple(_tuplify_item(x) for x in v) if isinstance(v, list) else v for k, v in d.items()}


def _tuplify_item(x: Any) -> Any:
    return tuple(x) if isinstance(x, list) else x
