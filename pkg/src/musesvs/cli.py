"""Command-line interface: ``musesvs {gen-data,train,synth,eval,plot}``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
Every command writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("musesvs")


class UsageError(Exception):
    """Invalid flag combination or input file; maps to the configuration exit code."""


def _threads() -> None:
    value = os.environ.get("MUSESVS_NUM_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"MUSESVS_NUM_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("MUSESVS_NUM_THREADS must be positive")
    import numba
    import torch

    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _git_revision() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def write_manifest(out: Path, command: str, args: argparse.Namespace, cfg=None, extra: Optional[dict] = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "config_path": None if getattr(args, "config", None) is None else str(args.config),
        "seed": getattr(args, "seed", None) if cfg is None else cfg.seed,
        "output_dir": str(out),
        "config_hash": None if cfg is None else cfg.digest(),
        "git_revision": _git_revision(),
        "flags": flags,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _run_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "preset", None):
        changes["preset"] = args.preset
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
        changes["corpus"] = dataclasses.replace(cfg.corpus, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if getattr(args, "predictor", None):
        model = dict(cfg.model)
        preds = tuple(model.get("duration_predictors", ("crdp",)))
        if args.predictor not in preds:
            preds = preds + (args.predictor,)
        model.update(duration_predictors=preds, duration_predictor=args.predictor)
        changes["model"] = model
    if getattr(args, "mode", None):
        model = dict(changes.get("model", cfg.model))
        model["embedding_mode"] = args.mode
        changes["model"] = model
    cfg = dataclasses.replace(cfg, **changes)
    cfg.corpus.validate()
    cfg.model_config()
    return cfg


def _load_samples(path, cfg):
    from .training.corpus import load_corpus

    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"corpus directory {root} does not exist")
    samples = load_corpus(root, cfg.model_config().phonemes, cfg.model_config().frame_rate)
    if not samples:
        raise UsageError(f"no samples found under {root}")
    return samples


def _load_model(path):
    from .training.trainer import load_model

    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_model(path)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# commands


def cmd_gen_data(args) -> int:
    from .training.corpus import generate_synthetic_corpus, save_corpus

    cfg = _run_config(args)
    corpus_cfg = cfg.corpus
    if args.n_samples is not None:
        corpus_cfg = dataclasses.replace(corpus_cfg, n_samples=args.n_samples)
    corpus_cfg.validate()
    mcfg = cfg.model_config()
    samples = generate_synthetic_corpus(corpus_cfg, mcfg.phonemes, mcfg.frame_rate, mcfg.n_mels)
    out = Path(args.out)
    save_corpus(samples, out, mcfg.phonemes, mcfg.frame_rate)
    (out / "corpus_config.json").write_text(json.dumps(dataclasses.asdict(corpus_cfg), indent=1))
    write_manifest(out, "gen-data", args, cfg, {"n_samples": len(samples), "tree_sha256": _tree_digest(out)})
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training.corpus import generate_synthetic_corpus
    from .training.losses import NumericError
    from .training.trainer import train

    cfg = _run_config(args)
    mcfg = cfg.model_config()
    if args.data:
        samples = _load_samples(args.data, cfg)
    else:
        samples = generate_synthetic_corpus(cfg.corpus, mcfg.phonemes, mcfg.frame_rate, mcfg.n_mels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=1))

    def progress(rec):
        if rec.step % max(1, args.log_every) == 0:
            log.info("step %d total %.4f mel %.4f", rec.step, rec.values["total"], rec.values["mel"])

    try:
        result = train(cfg, samples, out, resume=args.resume, progress=progress)
    except NumericError as exc:
        write_manifest(out, "train", args, cfg, {"status": "numeric_failure", "error": str(exc)})
        print(f"numeric failure: {exc}; last good checkpoint kept at {out / 'checkpoint.npz'}", file=sys.stderr)
        return EXIT_NUMERIC
    write_manifest(out, "train", args, cfg, {"status": "ok", "steps": result.trainer.step})
    print(f"trained {result.trainer.step} steps; checkpoint {result.checkpoint}")
    return EXIT_OK


def _context(args, model):
    from .score_io import AttributeContext, EmbeddingMode, Emotion

    trained = model.emotion_table.mode
    mode = EmbeddingMode(args.mode) if args.mode else trained
    if mode is not trained:
        raise UsageError(f"checkpoint was trained in {trained.value} mode, not {mode.value}")
    intensity = 0.0 if args.emotion == "neutral" and args.intensity is None else args.intensity
    intensity = 1.0 if intensity is None else intensity
    ctx = AttributeContext(args.singer, Emotion(args.emotion), float(intensity), mode)
    if ctx.singer_id >= model.cfg.n_singers:
        raise UsageError(f"singer {ctx.singer_id} outside the {model.cfg.n_singers} trained singers")
    return ctx


def cmd_synth(args) -> int:
    from .embedding import emotion_base_embedding
    from .score_io import parse_score

    model, cfg = _load_model(args.checkpoint)
    mcfg = model.cfg
    try:
        score = parse_score(Path(args.score).read_bytes(), mcfg.phonemes, mcfg.frame_rate)
    except OSError as exc:
        raise UsageError(f"cannot read score: {exc}") from None
    ctx = _context(args, model)
    predictor = args.predictor or mcfg.duration_predictor
    syn = model.synthesize(score, ctx, predictor, cfg.corpus.vibrato_hz, args.seed or 0)
    if not np.all(np.isfinite(syn.mel)):
        print("synthesized mel is not finite", file=sys.stderr)
        return EXIT_NUMERIC
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "mel.npy", syn.mel.astype("<f4"))
    np.save(out / "f0.npy", syn.f0.astype("<f4"))
    base = emotion_base_embedding(ctx, model.emotion_table).detach().numpy()
    np.save(out / "base_embedding.npy", base.astype("<f4"))
    plan = {
        "predictor": predictor,
        "frame_rate": mcfg.frame_rate,
        "note": [int(x) for x in score.note_durations],
        "predicted": [float(x) for x in syn.plan.predicted[0]],
        "rounded": [int(x) for x in syn.durations],
        "sync_err": [float(x) for x in syn.plan.sync_err[0]],
        "voiced": [bool(v) for v in score.voiced],
        "mean_hz": [float(x) for x in syn.pitch.mean_hz],
        "cv": [float(x) for x in syn.pitch.cv],
        "energy": [float(x) for x in syn.energy],
    }
    (out / "durations.json").write_text(json.dumps(plan, indent=1))
    write_manifest(out, "synth", args, cfg, {
        "context": {"singer_id": ctx.singer_id, "emotion": ctx.emotion.value, "intensity": ctx.intensity,
                    "mode": ctx.mode.value},
        "frames": int(syn.mel.shape[0]),
    })
    print(f"wrote {syn.mel.shape[0]} frames to {out / 'mel.npy'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import report_for, run_predictor

    model, cfg = _load_model(args.checkpoint)
    samples = _load_samples(args.data, cfg)
    names = list(model.adaptor.duration_predictors) if args.predictor in (None, "all") else [args.predictor]
    for n in names:
        if n not in model.adaptor.duration_predictors:
            raise UsageError(f"checkpoint has no {n!r} duration predictor")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for n in names:
        reports[n] = report_for(run_predictor(model, samples, n, seed=args.seed or 0), model.cfg.frame_rate)
    (out / "report.json").write_text(json.dumps(reports if len(names) > 1 else reports[names[0]], indent=1))
    lines = ["predictor    error_s   rmse_d(s)  rmse_d(frames)  error_p"]
    for n, r in reports.items():
        lines.append(f"{n:<12} {100 * r['error_s']:6.2f}%   {r['rmse_d_seconds']:.4f}     {r['rmse_d_frames']:8.3f}"
                     f"   {r['error_p']:9.2f}")
    (out / "table.txt").write_text("\n".join(lines) + "\n")
    write_manifest(out, "eval", args, cfg, {"predictors": names})
    print("\n".join(lines))
    return EXIT_OK


def cmd_plot(args) -> int:
    from . import plots

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = args.kind
    cfg = None
    if kind in ("f0", "mel", "energy"):
        if not args.input:
            raise UsageError(f"plot {kind} needs --input (a synth output directory or corpus sample)")
        written = _plot_from_dirs(kind, [Path(p) for p in args.input], out)
    elif kind == "embeddings_pca":
        model, cfg = _load_model(_need(args.checkpoint, "--checkpoint"))
        written = [_plot_pca(model, out)]
    elif kind == "sync_accumulation":
        from .evaluation import run_predictor

        model, cfg = _load_model(_need(args.checkpoint, "--checkpoint"))
        samples = _load_samples(_need(args.data, "--data"), cfg)
        longest = max(samples, key=lambda s: len(s.score))
        traces = {n: run_predictor(model, [longest], n).sync_trace[0] for n in model.adaptor.duration_predictors}
        written = [plots.plot_sync_accumulation(out / "sync_accumulation.png", traces, model.cfg.frame_rate)]
        (out / "sync_accumulation.json").write_text(json.dumps({k: v.tolist() for k, v in traces.items()}))
    else:
        written = [_plot_erf(args, out)]
    write_manifest(out, "plot", args, cfg, {"files": [str(p) for p in written]})
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def _need(value, flag):
    if not value:
        raise UsageError(f"this plot needs {flag}")
    return value


def _plot_from_dirs(kind, dirs, out):
    from . import plots

    written = []
    curves = {}
    for d in dirs:
        if (d / "targets.npz").exists():  # corpus sample
            from .score_io import parse_score

            with np.load(d / "targets.npz") as z:
                mel, f0, durations = z["mel"], z["f0"], z["duration"]
            voiced = parse_score((d / "score.json").read_bytes()).voiced
        elif (d / "mel.npy").exists():
            mel, f0 = np.load(d / "mel.npy"), np.load(d / "f0.npy")
            plan = json.loads((d / "durations.json").read_text())
            durations, voiced = np.asarray(plan["rounded"]), np.asarray(plan["voiced"])
        else:
            raise UsageError(f"{d} is neither a synth output nor a corpus sample directory")
        tag = d.name
        if kind == "f0":
            written.append(plots.plot_f0(out / f"f0_{tag}.png", f0, durations, voiced, title=f"F0 {tag}"))
        elif kind == "mel":
            written.append(plots.plot_mel(out / f"mel_{tag}.png", mel, title=tag))
        else:
            curves[tag] = mel
    if kind == "energy":
        written.append(plots.plot_energy(out / "energy.png", curves))
    return written


def _plot_pca(model, out):
    import torch

    from . import plots
    from .embedding import emotion_base_embedding
    from .score_io import AttributeContext, Emotion

    vecs, labels = [], []
    levels = (0.0, 0.3, 0.7, 1.0)
    with torch.no_grad():
        for emo in (Emotion.HAPPY, Emotion.SAD):
            for t in levels:
                ctx = AttributeContext(0, emo if t else Emotion.NEUTRAL, t, model.emotion_table.mode)
                vecs.append(emotion_base_embedding(ctx, model.emotion_table).numpy())
                labels.append("neutral" if t == 0 else f"{emo.value}_{t:.1f}")
    return plots.plot_embeddings_pca(out / "embeddings_pca.png", np.stack(vecs), labels, "emotion embeddings")


def _plot_erf(args, out):
    import torch

    from . import plots
    from .blocks import Decoder, erf_probe
    from .config import ModelConfig

    mcfg = ModelConfig.preset(args.preset or "toy")
    torch.manual_seed(args.seed or 0)
    T = 140
    x = torch.randn(T, mcfg.d_model)
    out_index = 69
    profiles = {}
    for name in ("aspp", "fft"):
        if name == "aspp":
            dec = Decoder.aspp(mcfg.d_model, mcfg.dec_layers, mcfg.dec_heads, mcfg.n_mels, mcfg.aspp_filters,
                               mcfg.aspp_dilations, mcfg.aspp_kernel, 0.0)
        else:
            dec = Decoder.fft(mcfg.d_model, mcfg.dec_layers, mcfg.dec_heads, mcfg.n_mels, mcfg.dec_filters,
                              mcfg.aspp_kernel, 0.0)
        dec.eval()
        profiles[name] = erf_probe(dec, x, out_index).numpy()
    (out / "erf.json").write_text(json.dumps({k: v.tolist() for k, v in profiles.items()}))
    return plots.plot_erf(out / "erf.png", profiles, out_index)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="musesvs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="run config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=out_required)
        sp.add_argument("--preset", choices=("toy", "full"))

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(g)
    g.add_argument("--n-samples", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", type=Path, help="corpus directory (generated from the config when omitted)")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", type=Path)
    t.add_argument("--predictor", choices=("crdp", "note_norm", "syllable"))
    t.add_argument("--mode", choices=("interpolated", "level_wise"))
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="synthesize a mel-spectrogram from a score")
    common(s)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--score", type=Path, required=True)
    s.add_argument("--singer", type=int, default=0)
    s.add_argument("--emotion", choices=("neutral", "happy", "sad"), default="neutral")
    s.add_argument("--intensity", type=float)
    s.add_argument("--mode", choices=("interpolated", "level_wise"))
    s.add_argument("--predictor", choices=("crdp", "note_norm", "syllable"))
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="objective metrics on a corpus")
    common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--predictor", choices=("crdp", "note_norm", "syllable", "all"), default="all")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="diagnostic figures")
    common(pl)
    pl.add_argument("kind", choices=("f0", "energy", "mel", "embeddings_pca", "sync_accumulation", "erf"))
    pl.add_argument("--input", nargs="+", help="synth output or corpus sample directories")
    pl.add_argument("--checkpoint", type=Path)
    pl.add_argument("--data", type=Path)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .config import ConfigError
    from .score_io import ScoreError
    from .training.losses import NumericError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        _threads()
        return args.func(args)
    except (ConfigError, ScoreError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:  # invalid attribute contexts and the like
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
