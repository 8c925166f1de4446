"""Score and attribute data model, score-file parsing, unit conversion."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import DEFAULT_PHONEMES, FRAME_RATE, INTENSITY_LEVELS


class ScoreError(ValueError):
    """Raised for malformed or inconsistent score documents."""


class Emotion(str, enum.Enum):
    NEUTRAL = "neutral"
    HAPPY = "happy"
    SAD = "sad"


class EmbeddingMode(str, enum.Enum):
    INTERPOLATED = "interpolated"
    LEVEL_WISE = "level_wise"


@dataclass(frozen=True)
class Score:
    """Phoneme sequence with per-phoneme note pitch (MIDI) and note duration (frames).

    A note pitch of 0 marks a rest.
    """

    phonemes: tuple[int, ...]
    note_pitches: tuple[int, ...]
    note_durations: tuple[int, ...]
    syllable_bounds: tuple[tuple[int, int], ...] | None = None
    tempo_bpm: float | None = None

    def __post_init__(self):
        n = len(self.phonemes)
        if n == 0:
            raise ScoreError("score has no phonemes")
        if not n == len(self.note_pitches) == len(self.note_durations):
            raise ScoreError(
                f"length mismatch: {n} phonemes, {len(self.note_pitches)} pitches, "
                f"{len(self.note_durations)} durations"
            )
        if any(d < 1 for d in self.note_durations):
            raise ScoreError("note durations must be at least one frame")
        if any(not 0 <= p <= 127 for p in self.note_pitches):
            raise ScoreError("note pitches must lie in [0, 127]")
        if self.syllable_bounds is not None:
            _check_partition(self.syllable_bounds, n)

    def __len__(self) -> int:
        return len(self.phonemes)

    @property
    def voiced(self) -> np.ndarray:
        return np.asarray(self.note_pitches) > 0

    @property
    def total_frames(self) -> int:
        return int(sum(self.note_durations))


def _check_partition(bounds: Sequence[tuple[int, int]], n: int) -> None:
    pos = 0
    for start, end in bounds:
        if start != pos or end <= start:
            raise ScoreError(f"syllable bounds must partition [0, {n}) contiguously")
        pos = end
    if pos != n:
        raise ScoreError(f"syllable bounds must partition [0, {n}) contiguously")


@dataclass(frozen=True)
class AttributeContext:
    """Singer, emotion type and emotional intensity for one synthesis request."""

    singer_id: int
    emotion: Emotion = Emotion.NEUTRAL
    intensity: float = 0.0
    mode: EmbeddingMode = EmbeddingMode.INTERPOLATED

    def __post_init__(self):
        object.__setattr__(self, "emotion", Emotion(self.emotion))
        object.__setattr__(self, "mode", EmbeddingMode(self.mode))
        if self.singer_id < 0:
            raise ValueError("singer_id must be non-negative")
        if not math.isfinite(self.intensity) or self.intensity < 0:
            raise ValueError("intensity must be a finite non-negative number")
        if self.emotion is Emotion.NEUTRAL and self.intensity != 0:
            raise ValueError("neutral emotion requires intensity 0")
        if self.mode is EmbeddingMode.LEVEL_WISE and self.intensity not in INTENSITY_LEVELS:
            raise ValueError(
                f"level-wise embeddings only exist for intensities {INTENSITY_LEVELS}, "
                f"got {self.intensity}"
            )


def seconds_to_frames(seconds: float, frame_rate: float = FRAME_RATE) -> int:
    """Round half up to whole frames, never below one frame."""
    return max(1, int(math.floor(seconds * frame_rate + 0.5)))


def midi_to_hz(midi):
    """Convert MIDI note numbers (scalar or array) to Hz with A4 = 440 Hz."""
    m = np.asarray(midi, dtype=float)
    if np.any(~np.isfinite(m)) or np.any((m < 0) | (m > 127)):
        raise ValueError("MIDI note numbers must lie in [0, 127]")
    hz = 440.0 * 2.0 ** ((m - 69.0) / 12.0)
    return float(hz) if np.ndim(hz) == 0 else hz


def note_hz(score: Score) -> np.ndarray:
    """Per-phoneme note pitch in Hz; rests map to 0."""
    pitches = np.asarray(score.note_pitches)
    out = np.zeros(len(pitches))
    voiced = pitches > 0
    out[voiced] = midi_to_hz(pitches[voiced])
    return out


def parse_score(
    data: bytes | str,
    phonemes: Sequence[str] = DEFAULT_PHONEMES,
    frame_rate: float = FRAME_RATE,
) -> Score:
    """Parse a JSON score document.

    Args:
        data: Document content with keys ``phonemes``, ``note_midi``,
            ``note_seconds`` and optionally ``syllables`` and ``tempo_bpm``.
        phonemes: Symbol vocabulary; a symbol's index is its phoneme id.
        frame_rate: Frames per second used to convert note lengths.

    Returns:
        Score: The validated score.

    """
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ScoreError(f"malformed score document: {exc}") from None
    if not isinstance(doc, dict):
        raise ScoreError("score document must be a JSON object")
    try:
        symbols = doc["phonemes"]
        midi = doc["note_midi"]
        seconds = doc["note_seconds"]
    except KeyError as exc:
        raise ScoreError(f"missing key {exc.args[0]!r}") from None
    if not all(isinstance(v, list) for v in (symbols, midi, seconds)):
        raise ScoreError("phonemes, note_midi and note_seconds must be arrays")
    if not len(symbols) == len(midi) == len(seconds):
        raise ScoreError(
            f"length mismatch: {len(symbols)} phonemes, {len(midi)} pitches, {len(seconds)} durations"
        )

    index = {s: i for i, s in enumerate(phonemes)}
    ids = []
    for s in symbols:
        if s not in index:
            raise ScoreError(f"unknown phoneme symbol {s!r}")
        ids.append(index[s])
    if any(isinstance(m, bool) or not isinstance(m, int) for m in midi):
        raise ScoreError("note_midi entries must be integers")
    if any(isinstance(s, bool) or not isinstance(s, (int, float)) for s in seconds):
        raise ScoreError("note_seconds entries must be numbers")
    if any(s < 0 for s in seconds):
        raise ScoreError("note durations must be non-negative")

    syllables = doc.get("syllables")
    bounds = None
    if syllables is not None:
        try:
            bounds = tuple((int(a), int(b)) for a, b in syllables)
        except (TypeError, ValueError):
            raise ScoreError("syllables must be an array of [start, end) pairs") from None
    tempo = doc.get("tempo_bpm")
    return Score(
        phonemes=tuple(ids),
        note_pitches=tuple(midi),
        note_durations=tuple(seconds_to_frames(s, frame_rate) for s in seconds),
        syllable_bounds=bounds,
        tempo_bpm=None if tempo is None else float(tempo),
    )


def serialize_score(
    score: Score,
    phonemes: Sequence[str] = DEFAULT_PHONEMES,
    frame_rate: float = FRAME_RATE,
) -> bytes:
    doc = {
        "phonemes": [phonemes[i] for i in score.phonemes],
        "note_midi": list(score.note_pitches),
        "note_seconds": [d / frame_rate for d in score.note_durations],
    }
    if score.syllable_bounds is not None:
        doc["syllables"] = [list(b) for b in score.syllable_bounds]
    if score.tempo_bpm is not None:
        doc["tempo_bpm"] = score.tempo_bpm
    return json.dumps(doc, indent=1).encode()
