"""Loss weighting, schedules and the least-squares adversarial objective."""

from __future__ import annotations

import math
from typing import Mapping

import torch
from torch.func import functional_call

from ..config import LossWeights


class NumericError(RuntimeError):
    """Raised when a loss term is not finite."""


def lambda_adv_schedule(step: int, warmup_steps: int, ramp_steps: int, start: float = 0.01,
                        end: float = 0.5) -> float:
    """Adversarial weight: ``start`` during warm-up, then a linear ramp to ``end``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup_steps:
        return start
    if ramp_steps <= 0 or step >= warmup_steps + ramp_steps:
        return end
    return start + (end - start) * (step - warmup_steps) / ramp_steps


def total_loss(parts: Mapping[str, torch.Tensor | float], w: LossWeights, step: int, warmup_steps: int = 0,
               ramp_steps: int = 0):
    """Weighted sum of the mel, pitch, energy, duration and adversarial terms.

    Accepts an optional ``style`` part (table distillation), weighted by ``w.style``.
    """
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name!r} is not finite ({v})")
    weights = {
        "mel": w.mel,
        "pitch": w.pitch,
        "energy": w.energy,
        "duration": w.duration,
        "adv": lambda_adv_schedule(step, warmup_steps, ramp_steps, w.adv_start, w.adv_end),
        "style": w.style,
    }
    unknown = set(parts) - set(weights)
    if unknown:
        raise KeyError(f"unknown loss parts {sorted(unknown)}")
    total = 0.0
    for name in ("mel", "pitch", "energy", "duration", "adv", "style"):
        if name in parts:
            total = total + weights[name] * parts[name]
    return total


def lr_schedule(step: int, warmup: int, peak: float = 1e-3) -> float:
    """Inverse-square-root schedule with linear warm-up, scaled so the peak (at ``warmup``) is ``peak``.

    This is the Transformer rule ``d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)``
    with the ``d_model`` factor replaced by the calibration ``peak * warmup**0.5``.
    """
    if step < 1:
        raise ValueError("learning-rate schedule starts at step 1")
    scale = peak * warmup ** 0.5
    return scale * min(step ** -0.5, step * warmup ** -1.5)


def adversarial_losses(disc: torch.nn.Module, real_mel: torch.Tensor, fake_mel: torch.Tensor):
    """Least-squares GAN losses.

    The discriminator loss sees a detached fake; the generator loss is computed
    with detached discriminator parameters, so each loss only reaches its own
    side's parameters.

    Returns:
        Tuple[Tensor, Tensor]: ``(d_loss, g_loss)``.

    """
    d_real = disc(real_mel)
    d_fake = disc(fake_mel.detach())
    d_loss = ((d_real - 1) ** 2).mean() + (d_fake ** 2).mean()
    frozen = {k: v.detach() for k, v in disc.named_parameters()}
    g_fake = functional_call(disc, frozen, (fake_mel,))
    g_loss = ((g_fake - 1) ** 2).mean()
    return d_loss, g_loss
