"""Translation generator: residual encoder with optional channel attention,
feeding either a plain U-Net decoder or a nested dense-skip decoder.

Feature-grid naming follows the usual ``x{i}_{j}`` convention: level ``i``
halves the spatial size ``i`` times, column ``j = 0`` is the encoder
backbone, and columns ``j >= 1`` are decoder fusion nodes. The plain decoder
realizes only the anti-diagonal chain ``x{i}_{L-i}`` with the symmetric
``j = 0`` skip; the nested decoder realizes the full triangle with dense
same-level skips by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, TopologyError

ENCODER_KINDS = ("plain_residual", "se_residual")
DECODER_KINDS = ("unet", "unetpp")
SKIP_DENSITIES = ("dense", "previous_only")
UPSAMPLE_MODES = ("transposed", "bilinear")

NodeId = tuple[int, int]


@dataclass(frozen=True)
class GeneratorConfig:
    encoder: str = "se_residual"
    decoder: str = "unetpp"
    depth: int = 4
    base_channels: int = 64
    se_reduction: int = 16
    skip_density: str = "dense"
    upsample: str = "transposed"
    channel_cap: int = 512
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.encoder not in ENCODER_KINDS:
            raise ConfigError(f"encoder must be one of {ENCODER_KINDS}")
        if self.decoder not in DECODER_KINDS:
            raise ConfigError(f"decoder must be one of {DECODER_KINDS}")
        if self.skip_density not in SKIP_DENSITIES:
            raise ConfigError(f"skip_density must be one of {SKIP_DENSITIES}")
        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample must be one of {UPSAMPLE_MODES}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.se_reduction < 1:
            raise ConfigError("se_reduction must be >= 1")

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2**level, self.channel_cap)

    def fusion_nodes(self) -> list[NodeId]:
        """Decoder node ids in computation order."""
        L = self.depth
        if self.decoder == "unetpp":
            return [(i, j) for j in range(1, L + 1) for i in range(0, L - j + 1)]
        return [(i, L - i) for i in range(L - 1, -1, -1)]

    def all_nodes(self) -> list[NodeId]:
        return [(i, 0) for i in range(self.depth + 1)] + self.fusion_nodes()


def node_key(node: NodeId) -> str:
    return f"x{node[0]}_{node[1]}"


def parse_node_id(node: Union[str, NodeId]) -> NodeId:
    if isinstance(node, tuple):
        return (int(node[0]), int(node[1]))
    text = node.strip().lstrip("x")
    i, j = text.replace(",", "_").split("_")
    return (int(i), int(j))


def se_hidden_units(channels: int, reduction: int) -> int:
    return max(channels // reduction, 1)


def se_extra_parameters(config: GeneratorConfig) -> int:
    """Parameter count added by channel attention over all encoder stages:
    per stage C*H + H (squeeze) plus H*C + C (excite)."""
    total = 0
    for level in range(config.depth + 1):
        c = config.channels(level)
        h = se_hidden_units(c, config.se_reduction)
        total += c * h + h + h * c + c
    return total


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class SEBlock(nn.Module):
    """Channel attention: pool each channel, squeeze/excite through a
    bottleneck, and rescale channels by sigmoid gates."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.channels = channels
        hidden = se_hidden_units(channels, reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(
                f"attention block built for {self.channels} channels, got {x.shape[1]}"
            )
        pooled = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.fc2(torch.relu(self.fc1(pooled))))
        return x * gate[:, :, None, None]


class ResidualBlock(nn.Module):
    """Two 3x3 convs with a projection/identity shortcut; channel attention,
    when enabled, rescales the residual sum before the final activation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        use_se: bool = False,
        se_reduction: int = 16,
    ):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm1 = nn.InstanceNorm2d(out_channels, affine=True)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(out_channels, affine=True)
        if in_channels == out_channels and stride == 1:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        self.se = SEBlock(out_channels, se_reduction) if use_se else None
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm2(self.conv2(self.act(self.norm1(self.conv1(x)))))
        pre = y + self.shortcut(x)
        if self.se is not None:
            pre = self.se(pre)
        return self.act(pre)


class Encoder(nn.Module):
    """Progressively deepened residual backbone; stage i halves the spatial
    size i times (stride-2 in the first conv of stages 1..L)."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        use_se = config.encoder == "se_residual"
        stages = [
            ResidualBlock(
                config.in_channels,
                config.channels(0),
                stride=1,
                use_se=use_se,
                se_reduction=config.se_reduction,
            )
        ]
        for level in range(1, config.depth + 1):
            stages.append(
                ResidualBlock(
                    config.channels(level - 1),
                    config.channels(level),
                    stride=2,
                    use_se=use_se,
                    se_reduction=config.se_reduction,
                )
            )
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        size = x.shape[-1]
        if x.shape[-2] != size:
            raise ConfigError(f"expected square input, got {tuple(x.shape[-2:])}")
        if size % 2**self.config.depth != 0:
            raise ConfigError(
                f"input size {size} must be divisible by {2 ** self.config.depth} "
                f"for depth {self.config.depth}"
            )
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class Upsampler(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, mode: str):
        super().__init__()
        if mode == "transposed":
            self.up = nn.ConvTranspose2d(in_channels, out_channels, 2, stride=2)
        else:
            self.up = nn.Sequential(
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(in_channels, out_channels, 1),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(x)


class FusionNode(nn.Module):
    """Upsample the deeper feature, concatenate the same-level inputs, and
    fuse with two 3x3 convs down to the level's channel count."""

    def __init__(self, config: GeneratorConfig, level: int, n_lateral: int):
        super().__init__()
        out_ch = config.channels(level)
        self.up = Upsampler(config.channels(level + 1), out_ch, config.upsample)
        in_ch = (n_lateral + 1) * out_ch
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(out_ch, affine=True)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(out_ch, affine=True)
        self.act = nn.ReLU()

    def forward(self, laterals: Sequence[torch.Tensor], below: torch.Tensor) -> torch.Tensor:
        merged = torch.cat([*laterals, self.up(below)], dim=1)
        y = self.act(self.norm1(self.conv1(merged)))
        return self.act(self.norm2(self.conv2(y)))


class TranslationGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.nodes = nn.ModuleDict()
        for i, j in config.fusion_nodes():
            self.nodes[node_key((i, j))] = FusionNode(
                config, i, n_lateral=len(self._lateral_ids(i, j))
            )
        self.head = nn.Conv2d(config.channels(0), config.out_channels, 1)

    def _lateral_ids(self, i: int, j: int) -> list[NodeId]:
        if self.config.decoder == "unet":
            return [(i, 0)]
        if self.config.skip_density == "dense":
            return [(i, k) for k in range(j)]
        return [(i, j - 1)]

    def _below_id(self, i: int, j: int) -> NodeId:
        return (i + 1, j - 1) if self.config.decoder == "unetpp" else (
            i + 1,
            self.config.depth - i - 1,
        )

    def _compute_nodes(self, x: torch.Tensor) -> dict[NodeId, torch.Tensor]:
        features: dict[NodeId, torch.Tensor] = {}
        for level, feat in enumerate(self.encoder(x)):
            features[(level, 0)] = feat
        for i, j in self.config.fusion_nodes():
            lateral_ids = self._lateral_ids(i, j)
            for lid in (*lateral_ids, self._below_id(i, j)):
                if lid not in features:
                    raise TopologyError(f"missing predecessor {node_key(lid)}")
            laterals = [features[lid] for lid in lateral_ids]
            below = features[self._below_id(i, j)]
            features[(i, j)] = self.nodes[node_key((i, j))](laterals, below)
        return features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = self._compute_nodes(x)
        top = features[(0, self.config.depth)]
        return torch.tanh(self.head(top))

    def forward_with_features(
        self, x: torch.Tensor
    ) -> tuple[torch.Tensor, dict[NodeId, torch.Tensor]]:
        features = self._compute_nodes(x)
        out = torch.tanh(self.head(features[(0, self.config.depth)]))
        return out, features

    def dump_feature_maps(
        self, x: torch.Tensor, nodes: Iterable[Union[str, NodeId]]
    ) -> dict[str, np.ndarray]:
        """Channel-mean 2D maps of the requested grid nodes (first batch
        element), for visualization."""
        wanted = [parse_node_id(n) for n in nodes]
        known = set(self.config.all_nodes())
        for node in wanted:
            if node not in known:
                raise TopologyError(
                    f"node {node_key(node)} does not exist in this topology; "
                    f"available: {[node_key(n) for n in sorted(known)]}"
                )
        with torch.no_grad():
            _, features = self.forward_with_features(x)
        return {
            node_key(n): features[n][0].mean(dim=0).cpu().numpy() for n in wanted
        }
