"""Encoder-residual-decoder generator for image-to-image translation.

The network downsamples with stride-2 convs, transforms with residual
blocks, and upsamples with nearest-neighbor resizing followed by convs
(avoids checkerboard artifacts of transposed convs). Instance
normalization throughout; a final tanh keeps outputs in [-1,1].
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError, ShapeError


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class GeneratorNet(nn.Module):
    """Shape-preserving translator: M downsamples, N residual blocks, M upsamples.

    Inputs and outputs are [-1,1] images with identical spatial size; the
    spatial size must be divisible by 2**M.
    """

    def __init__(
        self,
        in_channels: int = 3,
        out_channels: int = 3,
        base_width: int = 64,
        downsamples: int = 2,
        res_blocks: int = 6,
    ):
        super().__init__()
        if downsamples < 1:
            raise ConfigError(f"need at least one downsample, got {downsamples}")
        if res_blocks < 1:
            raise ConfigError(f"need at least one residual block, got {res_blocks}")
        self.downsamples = downsamples
        self.res_blocks = res_blocks

        stem = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, base_width, 7),
            nn.InstanceNorm2d(base_width),
            nn.ReLU(inplace=True),
        ]
        width = base_width
        down = []
        for _ in range(downsamples):
            down += [
                nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(width * 2),
                nn.ReLU(inplace=True),
            ]
            width *= 2
        body = [ResidualBlock(width) for _ in range(res_blocks)]
        up = []
        for _ in range(downsamples):
            up += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(width, width // 2, 3, padding=1),
                nn.InstanceNorm2d(width // 2),
                nn.ReLU(inplace=True),
            ]
            width //= 2
        out = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(width, out_channels, 7),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*stem, *down, *body, *up, *out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ShapeError(f"expected a 4d batch, got shape {tuple(x.shape)}")
        factor = 2 ** self.downsamples
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeError(
                f"spatial size {tuple(x.shape[-2:])} is not divisible by the "
                f"generator's downsampling factor {factor}"
            )
        if min(x.shape[-2:]) < 2 * factor:
            raise ShapeError(
                f"spatial size {tuple(x.shape[-2:])} collapses below 2x2 after "
                f"{self.downsamples} downsamples; per-instance statistics need "
                f"at least a 2x2 bottleneck"
            )
        y = self.net(x)
        if y.shape[-2:] != x.shape[-2:]:
            raise ShapeError(
                f"generator changed spatial size {tuple(x.shape[-2:])} -> {tuple(y.shape[-2:])}"
            )
        return y


def default_capacity(image_size: int) -> tuple[int, int]:
    """(downsamples, res_blocks) for an image size: (3, 9) at 256+, (2, 6) below."""
    if image_size >= 256:
        return 3, 9
    return 2, 6


def build_generator(
    image_size: int,
    in_channels: int = 3,
    out_channels: int = 3,
    base_width: int = 64,
    downsamples: int | None = None,
    res_blocks: int | None = None,
) -> GeneratorNet:
    d_default, r_default = default_capacity(image_size)
    downsamples = d_default if downsamples is None else downsamples
    res_blocks = r_default if res_blocks is None else res_blocks
    if image_size % (2 ** downsamples):
        raise ConfigError(
            f"image size {image_size} is not divisible by 2**{downsamples}"
        )
    return GeneratorNet(
        in_channels=in_channels,
        out_channels=out_channels,
        base_width=base_width,
        downsamples=downsamples,
        res_blocks=res_blocks,
    )


def receptive_field(downsamples: int, res_blocks: int) -> int:
    """Input pixels influencing one output pixel, by layer-geometry walk.

    Tracks (extent, step) in input-pixel units: a conv with kernel k adds
    (k-1)*step, a stride-2 conv doubles the step, an upsample halves it.
    """
    rf, step = 1.0, 1.0
    rf += 6 * step  # 7x7 stem
    for _ in range(downsamples):
        rf += 2 * step
        step *= 2
    for _ in range(res_blocks):
        rf += 2 * 2 * step  # two 3x3 convs
    for _ in range(downsamples):
        step /= 2
        rf += 2 * step
    rf += 6 * step  # 7x7 output conv
    return int(round(rf))


def translate(gen: GeneratorNet, batch: torch.Tensor) -> torch.Tensor:
    """Run the generator without gradients, preserving train/eval mode."""
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            out = gen(batch)
    finally:
        gen.train(was_training)
    return out
