"""Synthetic singing corpus.

Stands in for recorded data with controllable ground truth:

* pitch CV per phoneme is ``cv_base + cv_slope * t`` (vibrato grows with intensity),
* phoneme durations are the note durations plus zero-mean jitter of standard
  deviation ``duration_jitter * t * note``, clipped to 40 %; optionally part of
  each consonant is first moved into its syllable's vowel (zero-sum),
* energy fluctuates with a tremolo whose depth grows with intensity,
* mel frames are rendered deterministically as Gaussian bumps at the mel
  positions of the F0 harmonics, shaped by a per-vowel formant envelope and a
  per-singer spectral tilt.

Everything is a pure function of the config seed and the sample index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..config import DEFAULT_PHONEMES, FRAME_RATE, REST, SAMPLE_RATE, VOWELS, CorpusConfig
from ..score_io import AttributeContext, Emotion, Score, midi_to_hz, parse_score, serialize_score
from ..variance import PitchStats, realize_f0

FORMANTS = {  # (F1, F2) in Hz
    "a": (800, 1300), "e": (500, 1900), "i": (300, 2300), "o": (500, 900),
    "u": (350, 800), "eo": (600, 1000), "eu": (350, 1500),
}
MAX_CONSONANT_FRAMES = 6
JITTER_CLIP = 0.4


@dataclass
class Sample:
    name: str
    score: Score
    ctx: AttributeContext
    duration: np.ndarray  # ground-truth frames per phoneme
    mean_hz: np.ndarray
    cv: np.ndarray
    energy: np.ndarray
    f0: np.ndarray  # per frame, 0 on rests
    mel: np.ndarray  # (T, n_mels) float32, T == duration.sum()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


class MelRenderer:
    """Deterministic harmonic renderer producing compressed mel frames in roughly [0, 2]."""

    def __init__(self, n_mels: int = 80, sample_rate: int = SAMPLE_RATE, width: float = 0.8):
        self.n_mels = n_mels
        self.fmax = sample_rate / 2
        self.mel_max = float(hz_to_mel(self.fmax))
        self.centers = np.linspace(0.0, self.mel_max, n_mels)
        self.center_hz = 700.0 * (10 ** (self.centers / 2595.0) - 1.0)
        self.width = width

    def bin_position(self, hz):
        return hz_to_mel(hz) / self.mel_max * (self.n_mels - 1)

    def envelope(self, symbol: str, hz):
        hz = np.asarray(hz, dtype=float)
        if symbol in FORMANTS:
            f1, f2 = FORMANTS[symbol]
            return 0.15 + np.exp(-((hz - f1) / 250.0) ** 2) + 0.7 * np.exp(-((hz - f2) / 350.0) ** 2)
        return 0.35 * np.ones_like(hz)

    def render(self, symbols: Sequence[str], durations, f0, amplitude, tilt: float) -> np.ndarray:
        """Render frames for a phoneme sequence.

        Args:
            symbols: Phoneme symbol per phoneme.
            durations: Frames per phoneme.
            f0: Per-frame F0 in Hz (0 on rests).
            amplitude: Per-frame linear amplitude.
            tilt: Spectral tilt exponent of the harmonic series.

        Returns:
            ndarray: Mel frames (T, n_mels), float32.

        """
        T = int(np.sum(durations))
        lin = np.zeros((T, self.n_mels))
        bins = np.arange(self.n_mels)
        frame = 0
        for sym, d in zip(symbols, durations):
            sl = slice(frame, frame + d)
            frame += d
            if sym == REST:
                lin[sl] = 0.01
                continue
            f = f0[sl]
            n_harm = int(self.fmax // max(float(f.min()), 50.0))
            h = np.arange(1, n_harm + 1)
            freqs = f[:, None] * h[None, :]  # (d, H)
            weight = self.envelope(sym, freqs) * h[None, :] ** (-tilt) * (freqs < self.fmax)
            pos = self.bin_position(freqs)
            bumps = np.exp(-((bins[None, None, :] - pos[:, :, None]) ** 2) / (2 * self.width ** 2))
            spec = np.einsum("dh,dhk->dk", weight, bumps)
            if sym not in VOWELS:
                spec = spec + 0.25 * (self.center_hz > 3000)[None, :]
            lin[sl] = spec * amplitude[sl, None]
        return np.log1p(4.0 * lin).astype(np.float32)


def phoneme_energy(mel: np.ndarray, durations) -> np.ndarray:
    """Mean Euclidean norm of the mel columns inside each phoneme."""
    norms = np.linalg.norm(np.asarray(mel, dtype=float), axis=1)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    return np.array([norms[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])


def _singer_traits(seed: int, n_singers: int):
    rng = np.random.default_rng([seed, 10_000])
    return {
        "detune_cents": rng.uniform(-20, 20, n_singers),
        "tilt": rng.uniform(0.6, 1.2, n_singers),
        "gain": rng.uniform(0.7, 1.0, n_singers),
        "transfer": rng.uniform(0.7, 1.3, n_singers),  # singer-specific consonant/vowel balance
    }


def _syllables(rng, n_phonemes: int, cfg: CorpusConfig, phonemes: Sequence[str]):
    vowels = [p for p in phonemes if p in VOWELS]
    consonants = [p for p in phonemes if p not in VOWELS and p != REST]
    out = []  # (symbols, midi, seconds)
    count = 0
    midi = int(rng.integers(cfg.midi_range[0], cfg.midi_range[1] + 1))
    while count < n_phonemes:
        left = n_phonemes - count
        seconds = float(rng.uniform(*cfg.note_seconds))
        if count > 0 and rng.random() < cfg.rest_prob:
            out.append(([REST], 0, seconds))
            count += 1
            continue
        kind = int(rng.integers(1, 4)) if left >= 3 else int(rng.integers(1, left + 1))
        v = str(rng.choice(vowels))
        if kind == 1:
            syms = [v]
        elif kind == 2:
            syms = [str(rng.choice(consonants)), v]
        else:
            syms = [str(rng.choice(consonants)), v, str(rng.choice(consonants))]
        midi = int(np.clip(midi + rng.integers(-4, 5), *cfg.midi_range))
        out.append((syms, midi, seconds))
        count += len(syms)
    return out


def duration_jitter(rng, note, intensity: float, alpha: float) -> np.ndarray:
    """Zero-mean Gaussian jitter with std ``alpha * t * note``, clipped symmetrically to 40 % of the note."""
    note = np.asarray(note, dtype=float)
    jitter = rng.normal(0.0, 1.0, len(note)) * alpha * intensity * note
    return np.clip(jitter, -JITTER_CLIP * note, JITTER_CLIP * note)


def _sample_context(rng, cfg: CorpusConfig, index: int) -> AttributeContext:
    singer = index % cfg.n_singers
    t = float(cfg.intensity_levels[int(rng.integers(len(cfg.intensity_levels)))])
    if t == 0:
        return AttributeContext(singer, Emotion.NEUTRAL, 0.0)
    return AttributeContext(singer, Emotion.HAPPY if rng.random() < 0.5 else Emotion.SAD, t)


def generate_sample(cfg: CorpusConfig, index: int, phonemes: Sequence[str] = DEFAULT_PHONEMES,
                    frame_rate: float = FRAME_RATE, n_mels: int = 80,
                    renderer: MelRenderer | None = None) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    traits = _singer_traits(cfg.seed, cfg.n_singers)
    ctx = _sample_context(rng, cfg, index)
    t = ctx.intensity
    s = ctx.singer_id
    lo, hi = cfg.phonemes_per_sample
    n = int(rng.integers(lo, hi + 1))

    symbols, midi, note_frames, bounds = [], [], [], []
    for syms, m, seconds in _syllables(rng, n, cfg, phonemes):
        total = max(len(syms), int(np.floor(seconds * frame_rate + 0.5)))
        start = len(symbols)
        if len(syms) == 1:
            frames = [total]
        else:
            cons = min(MAX_CONSONANT_FRAMES, max(2, int(round(0.2 * total))))
            n_cons = len(syms) - 1
            cons = min(cons, (total - 1) // (n_cons + 1))
            cons = max(cons, 1)
            vowel = total - n_cons * cons
            frames = [cons, vowel] if len(syms) == 2 else [cons, vowel, cons]
        symbols += syms
        midi += [m] * len(syms)
        note_frames += frames
        bounds.append((start, len(symbols)))
    note = np.asarray(note_frames, dtype=float)
    midi = np.asarray(midi)
    voiced = midi > 0

    # Ground-truth durations: consonant -> vowel transfer inside each syllable, then jitter.
    target = note.copy()
    share = cfg.consonant_transfer * t * traits["transfer"][s]
    for a, b in bounds:
        vow = [i for i in range(a, b) if symbols[i] in VOWELS]
        cons = [i for i in range(a, b) if symbols[i] not in VOWELS and symbols[i] != REST]
        if vow and cons:
            moved = share * note[cons]
            target[cons] -= moved
            target[vow[0]] += moved.sum()
    jitter = duration_jitter(rng, note, t, cfg.duration_jitter)
    duration = np.maximum(1, np.floor(target + jitter + 0.5)).astype(np.int64)

    note_hz = np.zeros(len(note))
    note_hz[voiced] = midi_to_hz(midi[voiced])
    cents = traits["detune_cents"][s] + rng.normal(0.0, 5.0, len(note))
    mean_hz = np.where(voiced, note_hz * 2 ** (cents / 1200), 0.0)
    cv = np.where(voiced, cfg.cv_base + cfg.cv_slope * t, 0.0)
    stats = PitchStats(note_hz=note_hz, mean_hz=mean_hz, cv=cv, voiced=voiced)
    f0 = realize_f0(stats, duration, cfg.vibrato_hz, rng_seed=int(rng.integers(2 ** 31)),
                    frame_rate=frame_rate)

    T = int(duration.sum())
    frames = np.arange(T)
    emo_gain = 1.0 + (0.15 if ctx.emotion is Emotion.HAPPY else -0.15 if ctx.emotion is Emotion.SAD else 0.0) * t
    cls_gain = np.repeat(np.where([x in VOWELS for x in symbols], 1.0, 0.5), duration)
    trem = 1.0 + cfg.energy_slope * t * np.sin(2 * np.pi * cfg.vibrato_hz * frames / frame_rate + rng.uniform(0, 6.3))
    amplitude = traits["gain"][s] * emo_gain * cls_gain * trem
    renderer = renderer or MelRenderer(n_mels)
    mel = renderer.render(symbols, duration, f0, amplitude, traits["tilt"][s])
    energy = phoneme_energy(mel, duration)

    index_of = {p: i for i, p in enumerate(phonemes)}
    score = Score(
        phonemes=tuple(index_of[x] for x in symbols),
        note_pitches=tuple(int(m) for m in midi),
        note_durations=tuple(int(d) for d in note),
        syllable_bounds=tuple(bounds),
    )
    return Sample(f"sample_{index:05d}", score, ctx, duration, mean_hz, cv, energy, f0, mel)


def generate_synthetic_corpus(cfg: CorpusConfig, phonemes: Sequence[str] = DEFAULT_PHONEMES,
                              frame_rate: float = FRAME_RATE, n_mels: int = 80) -> list[Sample]:
    cfg.validate()
    renderer = MelRenderer(n_mels)
    return [generate_sample(cfg, i, phonemes, frame_rate, n_mels, renderer) for i in range(cfg.n_samples)]


def save_corpus(samples: Sequence[Sample], root: str | Path, phonemes: Sequence[str] = DEFAULT_PHONEMES,
                frame_rate: float = FRAME_RATE) -> None:
    """Write one directory per sample: ``score.json``, ``context.json`` and ``targets.npz``."""
    root = Path(root)
    for s in samples:
        d = root / s.name
        d.mkdir(parents=True, exist_ok=True)
        (d / "score.json").write_bytes(serialize_score(s.score, phonemes, frame_rate))
        (d / "context.json").write_text(json.dumps({
            "singer_id": s.ctx.singer_id, "emotion": s.ctx.emotion.value, "intensity": s.ctx.intensity,
        }, indent=1))
        with open(d / "targets.npz", "wb") as fh:
            np.savez(fh, duration=s.duration, mean_hz=s.mean_hz, cv=s.cv, energy=s.energy,
                     f0=s.f0, mel=s.mel.astype("<f4"))


def load_corpus(root: str | Path, phonemes: Sequence[str] = DEFAULT_PHONEMES,
                frame_rate: float = FRAME_RATE) -> list[Sample]:
    out = []
    for d in sorted(p for p in Path(root).iterdir() if (p / "score.json").exists()):
        score = parse_score((d / "score.json").read_bytes(), phonemes, frame_rate)
        c = json.loads((d / "context.json").read_text())
        ctx = AttributeContext(int(c["singer_id"]), Emotion(c["emotion"]), float(c["intensity"]))
        with np.load(d / "targets.npz") as z:
            out.append(Sample(d.name, score, ctx, z["duration"], z["mean_hz"], z["cv"], z["energy"], z["f0"],
                              z["mel"]))
    return out
