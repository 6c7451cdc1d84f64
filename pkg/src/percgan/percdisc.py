"""Discriminators built around a reference trunk's feature pyramid.

The trunk halves spatial size from block to block. Learnable combiner
blocks walk the pyramid top-down in resolution: the first combined map is
the first pyramid level, and each later one stacks the downsampled previous
combined map with the next pyramid level along channels. A scalar head
scores the last combined map; optional patch heads score intermediate maps
per spatial location, and the discriminator's log-probability is the sum of
all head log-probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .refnet import (
    BlockPartition,
    ChainTrunk,
    FeaturePyramid,
    ReferenceNet,
    extract_features,
)

PROB_EPS = 1e-7

TRUNK_PERCEPTUAL = "perceptual"
TRUNK_RANDOM = "random"
TRUNK_PLAIN = "plain"


class CombinerBlock(nn.Module):
    """Halves the spatial size of a combined map before channel stacking."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1),
            nn.InstanceNorm2d(out_channels),
            nn.LeakyReLU(0.2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class PatchHead(nn.Module):
    """Per-location score map over a combined feature map."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 1, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class MainHead(nn.Module):
    """Single scalar score per image from the last combined map."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(width, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


@dataclass
class DiscriminatorOutput:
    """Raw scores from every head, before any probability mapping.

    ``main_score`` has shape (B,); each patch score map has shape
    (B, 1, H_j, W_j). Probabilities are sigmoids of scores.
    """

    main_score: torch.Tensor
    patch_scores: tuple[torch.Tensor, ...] = ()

    def log_d(self, eps: float = PROB_EPS) -> torch.Tensor:
        """Per-image log-probability: main head plus every patch location."""
        total = _safe_log_sigmoid(self.main_score, eps)
        for scores in self.patch_scores:
            total = total + _safe_log_sigmoid(scores, eps).sum(dim=(1, 2, 3))
        return total

    def log_one_minus_d(self, eps: float = PROB_EPS) -> torch.Tensor:
        total = _safe_log_sigmoid(-self.main_score, eps)
        for scores in self.patch_scores:
            total = total + _safe_log_sigmoid(-scores, eps).sum(dim=(1, 2, 3))
        return total

    @property
    def head_count(self) -> int:
        return 1 + len(self.patch_scores)


def _safe_log_sigmoid(score: torch.Tensor, eps: float) -> torch.Tensor:
    # log of a sigmoid clamped away from {0, 1}; keeps losses finite for
    # arbitrarily confident heads.
    return torch.log(torch.sigmoid(score).clamp(eps, 1.0 - eps))


def combine(pyramid: FeaturePyramid, combiners: Sequence[nn.Module]) -> list[torch.Tensor]:
    """Fuse pyramid levels into combined maps by downsample-and-stack.

    The first combined map is the first pyramid level unchanged; combined
    map i stacks ``combiners[i-1]`` applied to map i-1 with pyramid level i.
    Each combiner must land exactly on the next level's spatial size.
    """
    if len(combiners) != pyramid.levels - 1:
        raise ShapeError(
            f"need {pyramid.levels - 1} combiners for {pyramid.levels} pyramid levels, "
            f"got {len(combiners)}"
        )
    combined = [pyramid.features[0]]
    for i in range(1, pyramid.levels):
        down = combiners[i - 1](combined[-1])
        feat = pyramid.features[i]
        if down.shape[-2:] != feat.shape[-2:]:
            raise ShapeError(
                f"combiner {i - 1} output is {tuple(down.shape[-2:])} but pyramid "
                f"level {i} is {tuple(feat.shape[-2:])}"
            )
        combined.append(torch.cat([down, feat], dim=1))
    return combined


class PerceptualDiscriminator(nn.Module):
    """Feature-pyramid discriminator over a (usually frozen) trunk.

    ``trunk_mode`` records how the trunk was produced: ``perceptual``
    (frozen pretrained weights), ``random`` (frozen random weights), or
    ``plain`` (trainable trunk, no freezing). Inputs are [-1,1] images;
    the trunk's input normalization is applied here, exactly once.
    """

    def __init__(
        self,
        trunk: ChainTrunk,
        part: BlockPartition,
        patch_levels: Sequence[int] = (),
        head_width: int = 64,
        trunk_mode: str = TRUNK_PERCEPTUAL,
    ):
        super().__init__()
        if trunk_mode not in (TRUNK_PERCEPTUAL, TRUNK_RANDOM, TRUNK_PLAIN):
            raise ConfigError(f"unknown trunk mode '{trunk_mode}'")
        if trunk_mode != TRUNK_PLAIN and not trunk.frozen:
            raise ConfigError(f"trunk mode '{trunk_mode}' requires a frozen trunk")
        for level in patch_levels:
            if not 0 <= level < part.block_count:
                raise ConfigError(
                    f"patch level {level} outside pyramid range 0..{part.block_count - 1}"
                )
        self.trunk = trunk
        self.part = part
        self.trunk_mode = trunk_mode
        self.patch_levels = tuple(sorted(patch_levels))

        # Channel counts of the combined maps, per the downsample-and-stack rule.
        combined_channels = [part.channels[0]]
        combiners = []
        for i in range(1, part.block_count):
            out_ch = part.channels[i]
            combiners.append(CombinerBlock(combined_channels[-1], out_ch))
            combined_channels.append(out_ch + part.channels[i])
        self.combiners = nn.ModuleList(combiners)
        self.combined_channels = tuple(combined_channels)

        self.main_head = MainHead(combined_channels[-1], head_width)
        self.patch_heads = nn.ModuleList(
            PatchHead(combined_channels[level], head_width) for level in self.patch_levels
        )

    def forward(self, batch: torch.Tensor) -> DiscriminatorOutput:
        x = self.trunk.normalize(batch)
        pyramid = extract_features(self.trunk, self.part, x)
        combined = combine(pyramid, self.combiners)
        main = self.main_head(combined[-1])
        patches = tuple(
            head(combined[level]) for head, level in zip(self.patch_heads, self.patch_levels)
        )
        return DiscriminatorOutput(main_score=main, patch_scores=patches)

    def trainable_parameters(self):
        """Parameters the discriminator optimizer should update."""
        params = list(self.combiners.parameters())
        params += list(self.main_head.parameters())
        params += list(self.patch_heads.parameters())
        if self.trunk_mode == TRUNK_PLAIN:
            params += list(self.trunk.parameters())
        return params

    def trunk_parameters(self):
        return list(self.trunk.parameters())


def build_perceptual_discriminator(
    trunk: ChainTrunk,
    part: BlockPartition,
    patch_levels: Sequence[int] = (),
    head_width: int = 64,
) -> PerceptualDiscriminator:
    """Wrap a trunk and partition into a discriminator, inferring the mode."""
    if isinstance(trunk, ReferenceNet):
        mode = TRUNK_PERCEPTUAL
    elif trunk.frozen:
        mode = TRUNK_RANDOM
    else:
        mode = TRUNK_PLAIN
    return PerceptualDiscriminator(
        trunk, part, patch_levels=patch_levels, head_width=head_width, trunk_mode=mode
    )
