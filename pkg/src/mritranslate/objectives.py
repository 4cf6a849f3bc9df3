"""Composite generator objective: adversarial + lambda1 * L1 + lambda2 *
multi-scale structural loss.

L1 is a mean over elements so the weights stay scale-independent across
resolutions. The structural term maps model-space tensors from [-1, 1] to
[0, 1] and evaluates 1 - MS-SSIM with data range 1; the scale count
auto-reduces when the image is too small for the default five scales.
Adversarial losses default to conditional BCE on patch logits, with a
least-squares variant behind ``mode="lsgan"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DivergenceError
from .metrics import DEFAULT_SSIM_PARAMS, SsimParams, max_feasible_scales, ms_ssim_torch

GAN_MODES = ("bce", "lsgan")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 100.0
    lambda2: float = 100.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    adv: torch.Tensor
    l1: torch.Tensor
    ms_ssim_loss: torch.Tensor
    total: torch.Tensor

    def floats(self) -> tuple[float, float, float, float]:
        return (
            float(self.adv.detach()),
            float(self.l1.detach()),
            float(self.ms_ssim_loss.detach()),
            float(self.total.detach()),
        )


def l1_loss(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if generated.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}"
        )
    return (generated - target).abs().mean()


def ms_ssim_loss(
    generated: torch.Tensor,
    target: torch.Tensor,
    scales: int | None = None,
    params: SsimParams = DEFAULT_SSIM_PARAMS,
) -> torch.Tensor:
    """1 - MS-SSIM on [0, 1]-mapped model-space tensors; differentiable."""
    if generated.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}"
        )
    h, w = generated.shape[-2:]
    if scales is None:
        scales = min(5, max_feasible_scales(h, w, params.win_size))
        if scales < 1:
            raise ValueError(
                f"image {h}x{w} is too small for the {params.win_size}-tap window"
            )
    value = ms_ssim_torch(
        (generated + 1.0) / 2.0,
        (target + 1.0) / 2.0,
        data_range=1.0,
        scales=scales,
        params=params,
    )
    return 1.0 - value


def gan_criterion(logits: torch.Tensor, is_real: bool, mode: str) -> torch.Tensor:
    target = torch.ones_like(logits) if is_real else torch.zeros_like(logits)
    if mode == "bce":
        return F.binary_cross_entropy_with_logits(logits, target)
    if mode == "lsgan":
        return F.mse_loss(logits, target)
    raise ValueError(f"gan mode must be one of {GAN_MODES}")


def adversarial_losses(
    disc,
    source: torch.Tensor,
    target: torch.Tensor,
    generated: torch.Tensor,
    mode: str = "bce",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator-side and discriminator-side adversarial losses.

    The discriminator term averages a real pass against the target and a fake
    pass against the detached generation; the generator term scores the
    (attached) generation toward the real label.
    """
    d_real = gan_criterion(disc(source, target), True, mode)
    d_fake = gan_criterion(disc(source, generated.detach()), False, mode)
    d_loss = 0.5 * (d_real + d_fake)
    g_adv = gan_criterion(disc(source, generated), True, mode)
    return g_adv, d_loss


def combine(
    adv: torch.Tensor,
    l1: torch.Tensor,
    ms: torch.Tensor,
    weights: LossWeights,
) -> LossBreakdown:
    for name, value in (("adv", adv), ("l1", l1), ("ms_ssim_loss", ms)):
        if not torch.isfinite(value).all():
            raise DivergenceError(f"non-finite loss component: {name}")
    total = adv + weights.lambda1 * l1 + weights.lambda2 * ms
    return LossBreakdown(adv=adv, l1=l1, ms_ssim_loss=ms, total=total)


def total_generator_loss(
    disc,
    source: torch.Tensor,
    target: torch.Tensor,
    generated: torch.Tensor,
    weights: LossWeights = LossWeights(),
    gan_mode: str = "bce",
    scales: int | None = None,
) -> tuple[LossBreakdown, torch.Tensor]:
    """Full objective for one batch; returns (breakdown, d_loss)."""
    g_adv, d_loss = adversarial_losses(disc, source, target, generated, gan_mode)
    breakdown = combine(
        g_adv,
        l1_loss(generated, target),
        ms_ssim_loss(generated, target, scales=scales),
        weights,
    )
    return breakdown, d_loss
