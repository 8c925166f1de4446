import csv

import numpy as np
import pytest
import torch

from musesvs.config import RunConfig
from musesvs.training import trainer as trainer_mod
from musesvs.training.checkpoint import read_meta
from musesvs.training.losses import NumericError
from musesvs.training.trainer import CSV_FIELDS, load_model, train

CFG = RunConfig(batch_size=4, model={"duration_predictors": ("crdp", "note_norm", "syllable")})


def test_smoke_run_reduces_mel_loss(small_corpus, tmp_path):
    res = train(CFG, small_corpus, tmp_path, steps=50)
    mel = [r.values["mel"] for r in res.history]
    assert len(mel) == 50
    assert mel[-1] < mel[0]
    assert all(np.isfinite(list(r.values.values())).all() for r in res.history)
    rows = list(csv.DictReader(open(tmp_path / "losses.csv")))
    assert len(rows) == 50 and tuple(rows[0]) == CSV_FIELDS
    meta = read_meta(tmp_path / "checkpoint.npz")
    assert meta["step"] == 50 and meta["config_hash"] == CFG.digest() and meta["seed"] == CFG.seed


def test_resume_is_bit_identical(small_corpus, tmp_path):
    full = train(CFG, small_corpus, tmp_path / "full", steps=3)
    part = train(CFG, small_corpus, tmp_path / "part", steps=2)
    resumed = train(CFG, small_corpus, tmp_path / "part", resume=part.checkpoint, steps=3)
    assert len(resumed.history) == 1
    assert resumed.history[0].values == full.history[2].values
    a = dict(full.trainer.model.named_parameters())
    for k, v in resumed.trainer.model.named_parameters():
        assert torch.equal(v, a[k]), k
    rows = list(csv.DictReader(open(tmp_path / "part" / "losses.csv")))
    assert [r["step"] for r in rows] == ["1", "2", "3"]


def test_non_finite_loss_keeps_last_good_checkpoint(small_corpus, tmp_path, monkeypatch):
    real = trainer_mod.soft_dtw_batch
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        out = real(*args, **kwargs)
        return out * float("nan") if calls["n"] == 3 else out

    monkeypatch.setattr(trainer_mod, "soft_dtw_batch", flaky)
    with pytest.raises(NumericError, match="mel"):
        train(CFG, small_corpus, tmp_path, steps=5)
    assert read_meta(tmp_path / "checkpoint.npz")["step"] == 2
    monkeypatch.setattr(trainer_mod, "soft_dtw_batch", real)
    clean = train(CFG, small_corpus, tmp_path / "clean", steps=2)
    model, _ = load_model(tmp_path / "checkpoint.npz")
    ref = dict(clean.trainer.model.named_parameters())
    for k, v in model.named_parameters():
        assert torch.equal(v, ref[k]), k


def test_empty_corpus_rejected(tmp_path):
    with pytest.raises(ValueError):
        train(CFG, [], tmp_path, steps=1)


def test_load_model_round_trip(small_corpus, tmp_path):
    res = train(CFG, small_corpus, tmp_path, steps=1)
    model, cfg = load_model(res.checkpoint)
    assert cfg.digest() == CFG.digest()
    assert not model.training
    for (k, v), (_, w) in zip(model.state_dict().items(), res.trainer.model.state_dict().items()):
        assert torch.equal(v, w), k
