import json

import numpy as np
import pytest

from musesvs.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, _tree_digest, main
from musesvs.training import trainer as trainer_mod

TINY = {
    "batch_size": 2,
    "steps": 3,
    "corpus": {"n_samples": 4, "phonemes_per_sample": [6, 10]},
    "model": {"duration_predictors": ["crdp", "note_norm", "syllable"]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == EXIT_OK
    return root, cfg


def test_gen_data_is_reproducible(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert _tree_digest(tmp_path / "again") == _tree_digest(root / "data")
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["tree_sha256"] == _tree_digest(root / "data")
    assert manifest["command"] == "gen-data" and manifest["config_hash"]


def test_gen_data_sample_count(tmp_path):
    assert main(["gen-data", "--n-samples", "200", "--out", str(tmp_path)]) == EXIT_OK
    assert len([p for p in tmp_path.iterdir() if p.is_dir()]) == 200


@pytest.mark.parametrize("doc", [{"corpus": {"n_samples": 0}}, {"no_such_key": 1}, {"preset": "huge"}, [1, 2]])
def test_invalid_config_exit_code(tmp_path, doc, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_train_writes_one_csv_row_per_step(workspace):
    root, _ = workspace
    lines = (root / "run" / "losses.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + TINY["steps"]
    assert (root / "run" / "checkpoint.npz").exists()
    assert json.loads((root / "run" / "manifest.json").read_text())["status"] == "ok"


def test_train_numeric_failure_exit_code(workspace, tmp_path, monkeypatch):
    root, cfg = workspace
    real = trainer_mod.soft_dtw_batch
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        out = real(*args, **kwargs)
        return out * float("nan") if calls["n"] == 2 else out

    monkeypatch.setattr(trainer_mod, "soft_dtw_batch", flaky)
    code = main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path)])
    assert code == EXIT_NUMERIC
    from musesvs.training.checkpoint import read_meta

    assert read_meta(tmp_path / "checkpoint.npz")["step"] == 1


def _synth(root, out, *extra):
    score = next(p for p in (root / "data").iterdir() if p.is_dir()) / "score.json"
    return main(["synth", "--checkpoint", str(root / "run" / "checkpoint.npz"), "--score", str(score),
                 "--out", str(out), *extra])


def test_synth_outputs(workspace, tmp_path):
    root, _ = workspace
    assert _synth(root, tmp_path, "--emotion", "happy", "--intensity", "0.7") == EXIT_OK
    mel = np.load(tmp_path / "mel.npy")
    plan = json.loads((tmp_path / "durations.json").read_text())
    assert mel.shape == (sum(plan["rounded"]), 80)
    assert len(np.load(tmp_path / "f0.npy")) == mel.shape[0]
    assert mel.dtype == np.dtype("<f4")


def test_synth_extrapolation_contract(workspace, tmp_path):
    root, _ = workspace
    assert _synth(root, tmp_path / "a", "--emotion", "sad", "--intensity", "1.5") == EXIT_OK
    assert _synth(root, tmp_path / "b", "--emotion", "sad", "--intensity", "1.5", "--mode", "level_wise") == EXIT_CONFIG
    assert _synth(root, tmp_path / "c", "--singer", "99") == EXIT_CONFIG


def test_synth_rejects_level_wise_extrapolation_on_level_wise_model(workspace, tmp_path):
    root, cfg = workspace
    run = tmp_path / "lw"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run), "--mode",
                 "level_wise", "--steps", "1"]) == EXIT_OK
    score = next(p for p in (root / "data").iterdir() if p.is_dir()) / "score.json"
    base = ["synth", "--checkpoint", str(run / "checkpoint.npz"), "--score", str(score), "--emotion", "happy"]
    assert main(base + ["--intensity", "0.7", "--out", str(tmp_path / "ok")]) == EXIT_OK
    assert main(base + ["--intensity", "1.5", "--out", str(tmp_path / "bad")]) == EXIT_CONFIG


def test_synth_missing_inputs(workspace, tmp_path):
    root, _ = workspace
    assert main(["synth", "--checkpoint", str(tmp_path / "none.npz"), "--score", "x", "--out", str(tmp_path)]) \
        == EXIT_CONFIG


def test_eval_report(workspace, tmp_path):
    root, _ = workspace
    assert main(["eval", "--checkpoint", str(root / "run" / "checkpoint.npz"), "--data", str(root / "data"),
                 "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report) == {"crdp", "note_norm", "syllable"}
    for r in report.values():
        assert {"error_p", "error_s", "rmse_d_frames", "rmse_d_seconds", "per_sample"} <= set(r)
    table = (tmp_path / "table.txt").read_text().splitlines()
    assert len(table) == 4 and "error_s" in table[0]
    assert main(["eval", "--checkpoint", str(root / "run" / "checkpoint.npz"), "--data", str(root / "data"),
                 "--predictor", "crdp", "--out", str(tmp_path / "one")]) == EXIT_OK
    assert "error_s" in json.loads((tmp_path / "one" / "report.json").read_text())


@pytest.mark.parametrize("kind", ["f0", "energy", "mel"])
def test_plots_from_directories(workspace, tmp_path, kind):
    root, _ = workspace
    _synth(root, tmp_path / "syn", "--emotion", "happy")
    sample = next(p for p in (root / "data").iterdir() if p.is_dir())
    assert main(["plot", kind, "--input", str(tmp_path / "syn"), str(sample), "--out", str(tmp_path / "p")]) == EXIT_OK
    pngs = list((tmp_path / "p").glob("*.png"))
    assert pngs and all(p.stat().st_size > 0 for p in pngs)


def test_model_plots(workspace, tmp_path):
    root, _ = workspace
    ckpt = str(root / "run" / "checkpoint.npz")
    assert main(["plot", "embeddings_pca", "--checkpoint", ckpt, "--out", str(tmp_path)]) == EXIT_OK
    assert main(["plot", "sync_accumulation", "--checkpoint", ckpt, "--data", str(root / "data"),
                 "--out", str(tmp_path)]) == EXIT_OK
    assert main(["plot", "erf", "--out", str(tmp_path)]) == EXIT_OK
    for name in ("embeddings_pca.png", "sync_accumulation.png", "erf.png"):
        assert (tmp_path / name).stat().st_size > 0
    erf = json.loads((tmp_path / "erf.json").read_text())
    assert set(erf) == {"aspp", "fft"}
    assert main(["plot", "sync_accumulation", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["plot", "f0", "--out", str(tmp_path)]) == EXIT_CONFIG
