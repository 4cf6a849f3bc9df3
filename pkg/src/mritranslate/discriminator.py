"""Conditional patch discriminator over concatenated (source, candidate)
pairs.

The stack is deliberately shallow: ``n_down`` stride-2 4x4 convs, one
stride-1 4x4 block, and a 4x4 stride-1 head to a single logit channel, so the
output stays a patch map rather than a global decision. With the default
``n_down=3`` at 256x256 input the logit map is 30x30 and the receptive field
is 70 pixels; the deeper ``n_down=4`` stack serves as the size reference the
"simplified" claim is measured against. Hidden blocks use per-channel
instance normalization; the first block and the head use none.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_down: int = 3
    base_channels: int = 64
    in_channels: int = 6
    channel_cap_mult: int = 8

    def __post_init__(self):
        if self.n_down < 1:
            raise ConfigError("n_down must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")

    def channels(self, index: int) -> int:
        return self.base_channels * min(2**index, self.channel_cap_mult)


def receptive_field(config: DiscriminatorConfig) -> int:
    """Receptive field of one output logit, composed back-to-front."""
    layers = [2] * config.n_down + [1, 1]  # strides; every kernel is 4
    rf = 1
    for stride in reversed(layers):
        rf = rf * stride + (4 - stride)
    return rf


class PatchDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = [
            nn.Conv2d(config.in_channels, config.channels(0), 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        ]
        for k in range(1, config.n_down):
            layers += [
                nn.Conv2d(config.channels(k - 1), config.channels(k), 4, stride=2, padding=1),
                nn.InstanceNorm2d(config.channels(k), affine=True),
                nn.LeakyReLU(0.2),
            ]
        layers += [
            nn.Conv2d(
                config.channels(config.n_down - 1),
                config.channels(config.n_down),
                4,
                stride=1,
                padding=1,
            ),
            nn.InstanceNorm2d(config.channels(config.n_down), affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(config.channels(config.n_down), 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, source: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if source.shape != candidate.shape:
            raise ValueError(
                f"source {tuple(source.shape)} and candidate "
                f"{tuple(candidate.shape)} must match"
            )
        return self.net(torch.cat([source, candidate], dim=1))
