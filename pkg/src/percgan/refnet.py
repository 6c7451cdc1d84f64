"""Frozen reference trunks and their feature pyramids.

A reference network is a chain of conv / nonlinearity / pool layers loaded
from a name-keyed weights container. Its parameters never train, but its
forward pass stays differentiable with respect to the input, so gradients
reach the generator through it. The chain is split into blocks whose outputs
form a feature pyramid with spatial sizes halving from level to level.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, LoadError, NumericError, PartitionError, ShapeError, SurgeryError

log = logging.getLogger(__name__)

CONV = "conv"
RELU = "relu"
LEAKY_RELU = "leaky_relu"
MAX_POOL = "maxpool"
AVG_POOL = "avgpool"

_POOL_KINDS = (MAX_POOL, AVG_POOL)
_KINDS = (CONV, RELU, LEAKY_RELU, MAX_POOL, AVG_POOL)

# Channel statistics of the usual classification pretraining corpus, in [0,1]
# image space. Used as manifest defaults when exporting pretrained trunks.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_SCALE = (0.229, 0.224, 0.225)

# Statistics that make trunk normalization the identity map on [-1,1] inputs.
NEUTRAL_MEAN = (0.5, 0.5, 0.5)
NEUTRAL_SCALE = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class LayerSpec:
    """One entry of a chain trunk."""

    kind: str
    kernel: int = 0
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0
    slope: float = 0.0

    def halves_spatial(self) -> bool:
        return self.kind in _POOL_KINDS or (self.kind == CONV and self.stride == 2)


@dataclass(frozen=True)
class ArchDescriptor:
    """Ordered layer listing of a chain trunk (no branches).

    Pool entries must halve the spatial size (window 2, stride 2); conv
    entries use spatial-size-preserving padding, so all downsampling happens
    in pools or stride-2 convs.
    """

    source: str
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        channels = None
        for i, spec in enumerate(self.layers):
            if spec.kind not in _KINDS:
                raise ConfigError(f"layer {i}: unknown kind '{spec.kind}'")
            if spec.kind == CONV:
                if channels is not None and spec.in_channels != channels:
                    raise ConfigError(
                        f"layer {i}: conv expects {spec.in_channels} input channels, "
                        f"chain carries {channels}"
                    )
                if spec.stride not in (1, 2):
                    raise ConfigError(f"layer {i}: conv stride must be 1 or 2")
                channels = spec.out_channels
            elif spec.kind in _POOL_KINDS:
                if spec.kernel != 2 or spec.stride != 2:
                    raise ConfigError(
                        f"layer {i}: pool must halve spatial size (window 2, stride 2), "
                        f"got window {spec.kernel} stride {spec.stride}"
                    )

    @property
    def input_channels(self) -> int:
        for spec in self.layers:
            if spec.kind == CONV:
                return spec.in_channels
        return 0

    def conv_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind == CONV]

    def layer_names(self) -> list[str]:
        """Canonical name per layer: ``block{i}.layer{j}``.

        A new block starts at every spatial-halving layer, which matches the
        default partitioning. Only conv layers own weights, but every layer
        gets a name for error reporting.
        """
        names = []
        block, j = 0, 0
        for i, spec in enumerate(self.layers):
            if spec.halves_spatial() and i > 0:
                block += 1
                j = 0
            names.append(f"block{block}.layer{j}")
            j += 1
        return names

    def to_json(self, path) -> None:
        entries = []
        for spec in self.layers:
            entry = {"type": spec.kind}
            if spec.kind == CONV:
                entry.update(
                    kernel=spec.kernel,
                    stride=spec.stride,
                    in_channels=spec.in_channels,
                    out_channels=spec.out_channels,
                )
            elif spec.kind in _POOL_KINDS:
                entry.update(kernel=spec.kernel, stride=spec.stride)
            elif spec.kind == LEAKY_RELU:
                entry["slope"] = spec.slope
            entries.append(entry)
        Path(path).write_text(json.dumps({"source": self.source, "layers": entries}, indent=2))

    @staticmethod
    def from_json(path) -> "ArchDescriptor":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise LoadError(f"bad descriptor file {path}: line {e.lineno}: {e.msg}") from e
        except OSError as e:
            raise LoadError(f"cannot read descriptor file {path}: {e}") from e
        layers = []
        for i, entry in enumerate(raw.get("layers", [])):
            kind = entry.get("type")
            if kind not in _KINDS:
                raise LoadError(f"descriptor {path}: layer {i} has unknown type '{kind}'")
            layers.append(
                LayerSpec(
                    kind=kind,
                    kernel=int(entry.get("kernel", 0)),
                    stride=int(entry.get("stride", 1)),
                    in_channels=int(entry.get("in_channels", 0)),
                    out_channels=int(entry.get("out_channels", 0)),
                    slope=float(entry.get("slope", 0.0)),
                )
            )
        return ArchDescriptor(source=str(raw.get("source", Path(path).stem)), layers=tuple(layers))


def vgg19_descriptor() -> ArchDescriptor:
    """The 16-conv VGG-19 trunk (convs + rectifiers + five pools)."""
    plan = [64, 64, "P", 128, 128, "P", 256, 256, 256, 256, "P", 512, 512, 512, 512, "P", 512, 512, 512, 512, "P"]
    layers: list[LayerSpec] = []
    channels = 3
    for item in plan:
        if item == "P":
            layers.append(LayerSpec(MAX_POOL, kernel=2, stride=2))
        else:
            layers.append(LayerSpec(CONV, kernel=3, stride=1, in_channels=channels, out_channels=item))
            layers.append(LayerSpec(RELU))
            channels = item
    return ArchDescriptor(source="vgg19", layers=tuple(layers))


def toy_descriptor(widths: Sequence[int] = (16, 32, 64), in_channels: int = 3) -> ArchDescriptor:
    """Small chain trunk for desk-scale runs: one conv per block, pools between."""
    layers: list[LayerSpec] = []
    channels = in_channels
    for i, w in enumerate(widths):
        if i > 0:
            layers.append(LayerSpec(MAX_POOL, kernel=2, stride=2))
        layers.append(LayerSpec(CONV, kernel=3, stride=1, in_channels=channels, out_channels=w))
        layers.append(LayerSpec(RELU))
        channels = w
    return ArchDescriptor(source=f"toy{len(widths)}", layers=tuple(layers))


def surgery_descriptor(desc: ArchDescriptor, slope: float = 0.2) -> ArchDescriptor:
    """Descriptor after surgery: mean pools and leaky rectifiers."""
    layers = []
    for spec in desc.layers:
        if spec.kind == MAX_POOL:
            layers.append(replace(spec, kind=AVG_POOL))
        elif spec.kind == RELU:
            layers.append(LayerSpec(LEAKY_RELU, slope=slope))
        else:
            layers.append(spec)
    return ArchDescriptor(source=desc.source, layers=tuple(layers))


def _module_for(spec: LayerSpec) -> nn.Module:
    if spec.kind == CONV:
        return nn.Conv2d(
            spec.in_channels, spec.out_channels, spec.kernel, stride=spec.stride, padding=spec.kernel // 2
        )
    if spec.kind == RELU:
        return nn.ReLU()
    if spec.kind == LEAKY_RELU:
        return nn.LeakyReLU(spec.slope)
    if spec.kind == MAX_POOL:
        return nn.MaxPool2d(spec.kernel, spec.stride)
    if spec.kind == AVG_POOL:
        return nn.AvgPool2d(spec.kernel, spec.stride)
    raise ConfigError(f"unknown layer kind '{spec.kind}'")


class ChainTrunk(nn.Module):
    """Executable chain of layers with per-channel input statistics.

    ``normalize`` maps [-1,1] images into the trunk's input space; it is the
    caller's job to apply it exactly once, on the discriminator path only.
    """

    def __init__(self, desc: ArchDescriptor, mean=None, scale=None):
        super().__init__()
        self.desc = desc
        self.layers = nn.ModuleList(_module_for(spec) for spec in desc.layers)
        mean = NEUTRAL_MEAN if mean is None else tuple(mean)
        scale = NEUTRAL_SCALE if scale is None else tuple(scale)
        self.register_buffer("input_mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("input_scale", torch.tensor(scale, dtype=torch.float32).view(1, -1, 1, 1))

    def normalize(self, batch: torch.Tensor) -> torch.Tensor:
        """Map a [-1,1] image batch to the trunk's input statistics."""
        return (batch * 0.5 + 0.5 - self.input_mean) / self.input_scale

    def run_layers(self, x: torch.Tensor, start: int, end: int) -> torch.Tensor:
        for i in range(start, end):
            x = self.layers[i](x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.run_layers(x, 0, len(self.layers))

    def conv_modules(self) -> list[tuple[str, nn.Conv2d]]:
        names = self.desc.layer_names()
        return [(names[i], self.layers[i]) for i in self.desc.conv_indices()]

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())


class ReferenceNet(ChainTrunk):
    """Frozen pretrained trunk. Parameters never receive gradients."""

    def __init__(self, desc, mean=None, scale=None, surgically_modified: bool = False):
        super().__init__(desc, mean=mean, scale=scale)
        self.surgically_modified = surgically_modified
        for p in self.parameters():
            p.requires_grad_(False)


def _kaiming_init(trunk: ChainTrunk, seed: int) -> None:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for _, conv in trunk.conv_modules():
            nn.init.kaiming_normal_(conv.weight, a=0.2)
            nn.init.zeros_(conv.bias)


def random_reference_net(desc: ArchDescriptor, seed: int = 0, mean=None, scale=None) -> ReferenceNet:
    """Frozen trunk with fixed-seed random weights (negative-control mode)."""
    net = ReferenceNet(desc, mean=mean, scale=scale)
    _kaiming_init(net, seed)
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def trainable_trunk(desc: ArchDescriptor, seed: int = 0, mean=None, scale=None) -> ChainTrunk:
    """Randomly initialized trunk whose weights do train (plain baseline)."""
    trunk = ChainTrunk(desc, mean=mean, scale=scale)
    _kaiming_init(trunk, seed)
    return trunk


def _manifest_path(weights_path) -> Path:
    p = Path(weights_path)
    return p.with_name(p.stem + ".manifest.json")


def save_reference_weights(net: ChainTrunk, weights_path, replacements=None) -> Path:
    """Write the trunk to a name-keyed ``.npz`` container plus a JSON manifest."""
    weights_path = Path(weights_path)
    arrays: dict[str, np.ndarray] = {}
    keys: dict[str, list[int]] = {}
    for name, conv in net.conv_modules():
        for part in ("weight", "bias"):
            key = f"{name}.{part}"
            arr = getattr(conv, part).detach().cpu().numpy()
            arrays[key] = arr
            keys[key] = list(arr.shape)
    np.savez(weights_path, **arrays)
    manifest = {
        "source": net.desc.source,
        "surgery": bool(getattr(net, "surgically_modified", False)),
        "keys": keys,
        "normalization": {
            "mean": [float(v) for v in net.input_mean.flatten()],
            "scale": [float(v) for v in net.input_scale.flatten()],
        },
    }
    if replacements:
        manifest["replacements"] = replacements
    _manifest_path(weights_path).write_text(json.dumps(manifest, indent=2))
    return weights_path


def load_reference_weights(weights_path, desc: ArchDescriptor) -> ReferenceNet:
    """Load a frozen trunk from a weights container matching ``desc``.

    Raises LoadError naming the first missing key, or the layer plus both
    shapes on a mismatch.
    """
    weights_path = Path(weights_path)
    try:
        container = np.load(weights_path)
    except (OSError, ValueError) as e:
        raise LoadError(f"cannot read weights container {weights_path}: {e}") from e
    manifest_path = _manifest_path(weights_path)
    manifest = {}
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as e:
            raise LoadError(f"bad manifest {manifest_path}: line {e.lineno}: {e.msg}") from e

    surgically_modified = bool(manifest.get("surgery", False))
    if surgically_modified:
        bad = [
            i for i, s in enumerate(desc.layers)
            if s.kind == MAX_POOL or s.kind == RELU
        ]
        if bad:
            raise LoadError(
                f"manifest records surgery but descriptor still has max-pool/plain-rectifier "
                f"layers at {bad}; pass the modified descriptor"
            )

    norm = manifest.get("normalization", {})
    mean = norm.get("mean", NEUTRAL_MEAN)
    scale = norm.get("scale", NEUTRAL_SCALE)
    net = ReferenceNet(desc, mean=mean, scale=scale, surgically_modified=surgically_modified)

    available = set(container.files)
    with torch.no_grad():
        for name, conv in net.conv_modules():
            for part in ("weight", "bias"):
                key = f"{name}.{part}"
                if key not in available:
                    raise LoadError(f"weights container {weights_path} is missing key '{key}'")
                arr = container[key]
                want = tuple(getattr(conv, part).shape)
                if tuple(arr.shape) != want:
                    raise LoadError(
                        f"layer '{name}' {part} shape mismatch: container has {tuple(arr.shape)}, "
                        f"descriptor wants {want}"
                    )
                getattr(conv, part).copy_(torch.from_numpy(np.ascontiguousarray(arr)))
    for p in net.parameters():
        p.requires_grad_(False)
    log.info("loaded reference trunk '%s': %d conv layers", desc.source, len(desc.conv_indices()))
    return net


def apply_surgery(net: ReferenceNet, slope: float = 0.2) -> ReferenceNet:
    """Replace max pools with mean pools and rectifiers with leaky ones.

    Conv weights are copied untouched. Applying surgery twice is an error.
    """
    if net.surgically_modified:
        raise SurgeryError("trunk is already surgically modified")
    new_desc = surgery_descriptor(net.desc, slope=slope)
    out = ReferenceNet(
        new_desc,
        mean=net.input_mean.flatten().tolist(),
        scale=net.input_scale.flatten().tolist(),
        surgically_modified=True,
    )
    with torch.no_grad():
        for (_, src), (_, dst) in zip(net.conv_modules(), out.conv_modules()):
            dst.weight.copy_(src.weight)
            dst.bias.copy_(src.bias)
    for p in out.parameters():
        p.requires_grad_(False)
    return out


def surgery_replacements(desc: ArchDescriptor) -> list[dict]:
    """Layer-by-layer record of what surgery changes, for manifests."""
    out = []
    for i, spec in enumerate(desc.layers):
        if spec.kind == MAX_POOL:
            out.append({"layer": i, "from": MAX_POOL, "to": AVG_POOL})
        elif spec.kind == RELU:
            out.append({"layer": i, "from": RELU, "to": LEAKY_RELU, "slope": 0.2})
    return out


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous block ranges over a prefix of a chain trunk."""

    ranges: tuple[tuple[int, int], ...]
    channels: tuple[int, ...]
    factors: tuple[int, ...]

    @property
    def block_count(self) -> int:
        return len(self.ranges)

    @property
    def total_factor(self) -> int:
        out = 1
        for f in self.factors:
            out *= f
        return out


def default_boundaries(desc: ArchDescriptor, blocks: int) -> list[int]:
    """Block starts: the chain start plus the first ``blocks - 1`` halving layers."""
    halving = [i for i, s in enumerate(desc.layers) if s.halves_spatial()]
    if len(halving) < blocks - 1:
        raise ConfigError(
            f"trunk '{desc.source}' has only {len(halving)} halving layers, "
            f"cannot form {blocks} blocks"
        )
    return [0] + halving[: blocks - 1]


def partition(net, boundaries: Sequence[int]) -> BlockPartition:
    """Split a trunk into blocks starting at ``boundaries``.

    Every block after the first must begin with its single spatial-halving
    layer; the covered prefix ends just before the next halving layer after
    the last boundary (or at the end of the chain).
    """
    desc: ArchDescriptor = net.desc if hasattr(net, "desc") else net
    n = len(desc.layers)
    bounds = list(boundaries)
    if not bounds:
        raise PartitionError("no boundaries given")
    if bounds[0] != 0:
        raise PartitionError(f"first boundary must be 0 (blocks cover a prefix), got {bounds[0]}")
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise PartitionError(f"boundaries must be strictly increasing, got {bounds}")
    if bounds[-1] >= n:
        raise PartitionError(f"boundary {bounds[-1]} is past the last layer ({n - 1})")
    for b in bounds[1:]:
        if not desc.layers[b].halves_spatial():
            raise PartitionError(
                f"boundary {b} does not sit at a spatial-halving layer "
                f"(found '{desc.layers[b].kind}')"
            )

    # The prefix ends where the next halving layer after the last boundary begins.
    end = n
    for i in range(bounds[-1] + 1, n):
        if desc.layers[i].halves_spatial():
            end = i
            break
    starts = bounds + [end]

    ranges, channels, factors = [], [], []
    current_channels = desc.input_channels
    for k in range(len(bounds)):
        lo, hi = starts[k], starts[k + 1]
        factor = 1
        for i in range(lo, hi):
            spec = desc.layers[i]
            if spec.halves_spatial():
                if k > 0 and i != lo:
                    raise PartitionError(
                        f"block {k} has an interior halving layer at {i}; "
                        f"halving must open the block"
                    )
                factor *= 2
            if spec.kind == CONV:
                current_channels = spec.out_channels
        if k > 0 and factor != 2:
            raise PartitionError(f"block {k} downsamples by {factor}, expected exactly 2")
        ranges.append((lo, hi))
        channels.append(current_channels)
        factors.append(factor)
    return BlockPartition(ranges=tuple(ranges), channels=tuple(channels), factors=tuple(factors))


@dataclass
class FeaturePyramid:
    """Per-block activations with halving spatial sizes."""

    features: tuple[torch.Tensor, ...]
    sizes: tuple[int, ...]
    channels: tuple[int, ...]

    @property
    def levels(self) -> int:
        return len(self.features)


def extract_features(net: ChainTrunk, part: BlockPartition, batch: torch.Tensor) -> FeaturePyramid:
    """Run the partitioned trunk and collect each block's output.

    ``batch`` must already be normalized with the trunk's statistics and its
    (square) spatial size must be divisible by the partition's total
    downsampling factor.
    """
    if batch.dim() != 4:
        raise ShapeError(f"expected a 4d batch, got shape {tuple(batch.shape)}")
    if batch.shape[-1] != batch.shape[-2]:
        raise ShapeError(f"expected square images, got {tuple(batch.shape[-2:])}")
    size = batch.shape[-1]
    if size % part.total_factor != 0:
        raise ShapeError(
            f"spatial size {size} is not divisible by the trunk's total "
            f"downsampling factor {part.total_factor}"
        )
    features = []
    x = batch
    for k, (lo, hi) in enumerate(part.ranges):
        x = net.run_layers(x, lo, hi)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activation after block {k}")
        features.append(x)
    return FeaturePyramid(
        features=tuple(features),
        sizes=tuple(f.shape[-1] for f in features),
        channels=tuple(f.shape[1] for f in features),
    )


def torchvision_vgg19_arrays(state_dict) -> dict[str, np.ndarray]:
    """Re-key a torchvision VGG-19 ``features`` state dict to container names.

    The torchvision layer ordering matches :func:`vgg19_descriptor`, so index
    ``i`` in ``features`` is layer ``i`` of the descriptor.
    """
    desc = vgg19_descriptor()
    names = desc.layer_names()
    arrays: dict[str, np.ndarray] = {}
    for i in desc.conv_indices():
        for part in ("weight", "bias"):
            src = f"features.{i}.{part}"
            if src not in state_dict:
                raise LoadError(f"state dict is missing '{src}'")
            tensor = state_dict[src]
            arrays[f"{names[i]}.{part}"] = tensor.detach().cpu().numpy()
    return arrays


def save_torchvision_vgg19(state_dict, weights_path) -> Path:
    """Convert a torchvision VGG-19 state dict into the container format."""
    desc = vgg19_descriptor()
    net = ReferenceNet(desc, mean=IMAGENET_MEAN, scale=IMAGENET_SCALE)
    arrays = torchvision_vgg19_arrays(state_dict)
    with torch.no_grad():
        for name, conv in net.conv_modules():
            conv.weight.copy_(torch.from_numpy(arrays[f"{name}.weight"]))
            conv.bias.copy_(torch.from_numpy(arrays[f"{name}.bias"]))
    return save_reference_weights(net, weights_path)
