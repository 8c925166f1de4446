import hashlib
from dataclasses import replace

import numpy as np
import pytest

from musesvs.config import VOWELS, ConfigError, CorpusConfig, DEFAULT_PHONEMES
from musesvs.evaluation import extract_phoneme_pitch_stats
from musesvs.score_io import Emotion
from musesvs.training.corpus import (
    JITTER_CLIP,
    MelRenderer,
    duration_jitter,
    generate_sample,
    generate_synthetic_corpus,
    load_corpus,
    phoneme_energy,
    save_corpus,
)


def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


CFG = CorpusConfig(n_samples=12, phonemes_per_sample=(10, 20))


def test_neutral_samples_have_base_cv():
    samples = generate_synthetic_corpus(replace(CFG, intensity_levels=(0.0,)))
    for s in samples:
        assert s.ctx.emotion is Emotion.NEUTRAL
        voiced = np.asarray(s.score.voiced)
        assert np.all(s.cv[voiced] == CFG.cv_base)
        assert np.array_equal(s.duration, np.asarray(s.score.note_durations))


def test_cv_follows_intensity():
    for s in generate_synthetic_corpus(CFG):
        voiced = np.asarray(s.score.voiced)
        np.testing.assert_allclose(s.cv[voiced], CFG.cv_base + CFG.cv_slope * s.ctx.intensity, rtol=0, atol=1e-15)


def test_jitter_is_zero_mean():
    rng = np.random.default_rng(5)
    note = np.full(30, 20.0)
    sums = np.array([duration_jitter(rng, note, 1.0, 0.15).sum() for _ in range(10_000)])
    se = sums.std(ddof=1) / np.sqrt(len(sums))
    assert abs(sums.mean()) < 3 * se


def test_jitter_clipped_and_scaled():
    rng = np.random.default_rng(6)
    note = np.full(20_000, 10.0)
    j = duration_jitter(rng, note, 1.0, 0.5)
    assert np.abs(j).max() <= JITTER_CLIP * 10.0
    assert np.all(duration_jitter(rng, note, 0.0, 0.15) == 0)
    small = duration_jitter(rng, note, 0.5, 0.15)
    assert small.std() == pytest.approx(0.075 * 10.0, rel=0.03)


def test_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    save_corpus(generate_synthetic_corpus(CFG), a)
    save_corpus(generate_synthetic_corpus(CFG), b)
    assert _tree_hash(a) == _tree_hash(b)
    save_corpus(generate_synthetic_corpus(replace(CFG, seed=1)), tmp_path / "c")
    assert _tree_hash(a) != _tree_hash(tmp_path / "c")


def test_round_trip(tmp_path):
    samples = generate_synthetic_corpus(CFG)
    save_corpus(samples, tmp_path)
    back = load_corpus(tmp_path)
    assert [s.name for s in back] == [s.name for s in samples]
    for x, y in zip(samples, back):
        assert x.score == y.score and x.ctx == y.ctx
        assert np.array_equal(x.duration, y.duration)
        assert np.array_equal(x.mel.astype("<f4"), y.mel)


def test_sample_consistency():
    for s in generate_synthetic_corpus(CFG):
        n = len(s.score)
        assert CFG.phonemes_per_sample[0] <= n
        assert s.mel.shape == (s.duration.sum(), 80)
        assert s.mel.dtype == np.float32
        assert len(s.f0) == s.duration.sum()
        assert s.duration.min() >= 1
        np.testing.assert_allclose(s.energy, phoneme_energy(s.mel, s.duration))
        voiced = np.asarray(s.score.voiced)
        mu, _, _ = extract_phoneme_pitch_stats(s.f0, s.duration, voiced)
        long = s.duration[voiced] >= 20
        np.testing.assert_allclose(mu[long], s.mean_hz[voiced][long], rtol=0.03)
        assert np.all(s.f0[np.repeat(~voiced, s.duration)] == 0)


def test_consonants_carry_high_band_noise():
    s = generate_sample(CFG, 3)
    renderer = MelRenderer(80)
    high = renderer.center_hz > 3000
    sym = [DEFAULT_PHONEMES[p] for p in s.score.phonemes]
    frame_vowel = np.repeat([x in VOWELS for x in sym], s.duration)
    frame_voiced = np.repeat(np.asarray(s.score.voiced), s.duration)
    cons = ~frame_vowel & frame_voiced
    assert s.mel[cons][:, high].mean() > 2 * s.mel[frame_vowel][:, high].mean()


def test_singer_assignment_cycles():
    samples = generate_synthetic_corpus(CFG)
    assert [s.ctx.singer_id for s in samples] == [i % CFG.n_singers for i in range(len(samples))]


@pytest.mark.parametrize("bad", [
    dict(n_samples=0), dict(phonemes_per_sample=(10, 5)), dict(phonemes_per_sample=(0, 5)), dict(n_singers=0),
    dict(intensity_levels=()), dict(cv_slope=0.0), dict(cv_base=-0.1), dict(duration_jitter=-1.0),
    dict(note_seconds=(0.0, 0.1)), dict(midi_range=(60, 200)),
])
def test_degenerate_configs_rejected(bad):
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(replace(CFG, **bad))
