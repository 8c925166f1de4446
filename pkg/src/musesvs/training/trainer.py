"""Training loop: alternating generator and discriminator updates with resumable checkpoints."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..blocks import Discriminator
from ..config import RunConfig
from ..model import Batch, MuseSVS, collate_samples
from ..style import distill_loss
from ..variance import (
    duration_loss,
    energy_loss,
    note_norm_loss,
    pitch_loss,
    syllable_duration_loss,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Sample
from .losses import NumericError, adversarial_losses, lambda_adv_schedule, lr_schedule, total_loss
from .softdtw import soft_dtw_batch

log = logging.getLogger(__name__)

CSV_FIELDS = ("step", "lr", "lambda_adv", "total", "mel", "pitch", "energy", "duration", "adv", "style",
              "d_loss", *(f"duration_{k}" for k in ("crdp", "note_norm", "syllable")))


def duration_losses(durations, batch: Batch, lambda_sync: float) -> dict[str, torch.Tensor]:
    """Training loss of every duration head present in the adaptor output."""
    target = batch.duration.to(torch.float32)
    out = {}
    for name, plan in durations.items():
        if name == "crdp":
            out[name] = duration_loss(plan, target, lambda_sync)
        elif name == "note_norm":
            out[name] = note_norm_loss(plan, target)
        else:
            out[name] = syllable_duration_loss(plan, target, batch.syllable_index)
    return out


def _segments(real, fake, lengths, size, rng):
    """Aligned random windows of ``size`` frames from real and generated mels."""
    reals, fakes = [], []
    for r, f, n in zip(real, fake, lengths.tolist()):
        w = min(size, n)
        start = int(rng.integers(0, n - w + 1))
        reals.append(r[start:start + w])
        fakes.append(f[start:start + w])
    w = min(x.shape[0] for x in reals)
    return torch.stack([x[:w] for x in reals]), torch.stack([x[:w] for x in fakes])


@dataclass
class StepRecord:
    step: int
    values: dict[str, float] = field(default_factory=dict)


class Trainer:
    """Owns the model, discriminator, optimizers and RNG streams of one run."""

    def __init__(self, cfg: RunConfig, samples: Sequence[Sample]):
        if not samples:
            raise ValueError("training needs at least one sample")
        self.cfg = cfg
        self.samples = list(samples)
        self.model_cfg = cfg.model_config()
        torch.manual_seed(cfg.seed)
        self.model = MuseSVS(self.model_cfg)
        self.disc = Discriminator(self.model_cfg.disc_kernel, self.model_cfg.disc_filters)
        self.gen_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr_peak, betas=cfg.adam_betas,
                                        eps=cfg.adam_eps)
        self.disc_opt = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr_peak, betas=cfg.adam_betas,
                                         eps=cfg.adam_eps)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0

    # checkpoint plumbing

    def modules(self):
        return {"model": self.model, "disc": self.disc}

    def optimizers(self):
        return {"gen": self.gen_opt, "disc": self.disc_opt}

    def save(self, path) -> Path:
        meta = {"step": self.step, "seed": self.cfg.seed, "config_hash": self.cfg.digest(),
                "run_config": self.cfg.to_dict()}
        return save_checkpoint(path, self.modules(), self.optimizers(), meta, self.rng)

    def restore(self, path) -> dict:
        meta = load_checkpoint(path, self.modules(), self.optimizers(), self.rng)
        if meta.get("config_hash") != self.cfg.digest():
            log.warning("checkpoint config hash %s differs from run config %s", meta.get("config_hash"),
                        self.cfg.digest())
        self.step = int(meta["step"])
        return meta

    # one optimisation step

    def next_batch(self) -> Batch:
        n = len(self.samples)
        idx = self.rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
        return collate_samples([self.samples[i] for i in idx], self.model.emotion_table)

    def train_step(self) -> StepRecord:
        cfg, w = self.cfg, self.cfg.loss
        step = self.step + 1
        lr = lr_schedule(step, cfg.lr_warmup, cfg.lr_peak)
        for opt in (self.gen_opt, self.disc_opt):
            for g in opt.param_groups:
                g["lr"] = lr

        self.model.train()
        batch = self.next_batch()
        out = self.model(batch)
        heads = duration_losses(out.adaptor.durations, batch, w.sync)
        parts = {
            "mel": soft_dtw_batch(out.mel, batch.mel, batch.mel_lengths, cfg.soft_dtw_gamma),
            "pitch": pitch_loss(out.adaptor.pitch, batch.target_pitch(), w.pitch_mean, w.pitch_cv, batch.mask),
            "energy": energy_loss(out.adaptor.energy, batch.energy, batch.mask),
            "duration": sum(heads.values()),
            "style": distill_loss(out.style.values.detach(), self.model.singer_table(batch.singer),
                                  self.model.singer_table.weight.mean(0), self.model.table_emotion(batch),
                                  self.model.style.style_mean),
        }
        d_loss = None
        if cfg.adversarial:
            real, fake = _segments(batch.mel, out.mel, batch.mel_lengths, self.model_cfg.disc_segment, self.rng)
            d_loss, parts["adv"] = adversarial_losses(self.disc, real, fake)
        total = total_loss(parts, w, step - 1, cfg.adv_warmup, cfg.adv_ramp)
        if d_loss is not None and not torch.isfinite(d_loss):
            raise NumericError(f"discriminator loss is not finite ({float(d_loss.detach())})")

        self.gen_opt.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.gen_opt.step()
        if d_loss is not None:
            self.disc_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            torch.nn.utils.clip_grad_norm_(self.disc.parameters(), cfg.grad_clip)
            self.disc_opt.step()
        self.model.style.update_mean(out.style.values)

        self.step = step
        values = {"lr": lr, "lambda_adv": lambda_adv_schedule(step - 1, cfg.adv_warmup, cfg.adv_ramp,
                                                              w.adv_start, w.adv_end),
                  "total": float(total.detach()), "d_loss": float("nan") if d_loss is None else float(d_loss.detach())}
        values.update({k: float(v.detach()) for k, v in parts.items()})
        values.update({f"duration_{k}": float(v.detach()) for k, v in heads.items()})
        return StepRecord(step, values)


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[StepRecord]
    trainer: Trainer


def train(cfg: RunConfig, samples: Sequence[Sample], out_dir: str | Path, resume: Optional[str | Path] = None,
          steps: Optional[int] = None, progress: Optional[Callable[[StepRecord], None]] = None) -> TrainResult:
    """Run (or resume) training and write ``checkpoint.npz`` and ``losses.csv`` into ``out_dir``.

    On a non-finite loss the checkpoint of the last good step is written to
    ``checkpoint.npz`` and :class:`NumericError` is re-raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, samples)
    if resume is not None:
        trainer.restore(resume)
    target = cfg.steps if steps is None else steps
    ckpt = out_dir / "checkpoint.npz"
    csv_path = out_dir / "losses.csv"
    fresh = resume is None or not csv_path.exists()
    history: list[StepRecord] = []
    with open(csv_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, restval="")
        if fresh:
            writer.writeheader()
        while trainer.step < target:
            rng_state = trainer.rng.bit_generator.state
            torch_state = torch.get_rng_state()
            try:
                rec = trainer.train_step()
            except NumericError:
                # parameters are untouched when the loss check fails; rewind the RNG streams too
                trainer.rng.bit_generator.state = rng_state
                torch.set_rng_state(torch_state)
                trainer.save(ckpt)
                raise
            history.append(rec)
            writer.writerow({"step": rec.step, **{k: f"{v:.8g}" for k, v in rec.values.items()}})
            if progress is not None:
                progress(rec)
            if cfg.checkpoint_every and rec.step % cfg.checkpoint_every == 0:
                trainer.save(ckpt)
    trainer.save(ckpt)
    return TrainResult(ckpt, history, trainer)


def load_model(path: str | Path) -> tuple[MuseSVS, RunConfig]:
    """Rebuild the generator from a checkpoint written by :func:`train`."""
    from .checkpoint import read_meta

    meta = read_meta(path)
    cfg = RunConfig.from_dict(meta["run_config"])
    model = MuseSVS(cfg.model_config())
    load_checkpoint(path, {"model": model}, restore_torch_rng=False)
    model.eval()
    return model, cfg
