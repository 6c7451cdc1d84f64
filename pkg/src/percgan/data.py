"""Unaligned two-domain image data: loading, preprocessing, toy synthesis.

Domains are plain directories of raster images. There is deliberately no
pairing API anywhere in this module: batches are drawn from each domain
independently, with replacement. Images reach the generator as [-1,1]
float tensors; mapping into a trunk's input statistics happens inside the
discriminator, never here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

TASK_SHAPES = "shapes"
TASK_TINT = "tint"


@dataclass(frozen=True)
class PreprocessSpec:
    """Deterministic per-image pipeline: center crop, then resize, then map to [-1,1].

    ``flip`` enables horizontal-flip augmentation at sampling time (off by
    default so equal-seed runs stay bit-identical even across sampler
    implementations).
    """

    crop: Optional[int] = None
    resize: Optional[int] = None
    flip: bool = False

    def validate_for_factor(self, factor: int) -> None:
        """Check the output size against a model's total downsampling factor."""
        size = self.resize or self.crop
        if size is not None and size % factor:
            raise ConfigError(
                f"preprocessed size {size} is not divisible by the model "
                f"downsampling factor {factor}"
            )


def preprocess_image(path, spec: PreprocessSpec) -> torch.Tensor:
    """Decode one file into a 3×H×W float tensor in [-1,1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if spec.crop is not None:
                w, h = img.size
                if spec.crop > min(w, h):
                    raise DataError(
                        f"{path}: crop {spec.crop} exceeds source size {w}x{h}"
                    )
                left = (w - spec.crop) // 2
                top = (h - spec.crop) // 2
                img = img.crop((left, top, left + spec.crop, top + spec.crop))
            if spec.resize is not None and img.size != (spec.resize, spec.resize):
                img = img.resize((spec.resize, spec.resize), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except DataError:
        raise
    except Exception as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    arr = arr / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


class DomainDataset:
    """Immutable listing of one domain's images with an in-memory decode cache."""

    def __init__(self, label: str, files: Sequence[Path], spec: PreprocessSpec,
                 strict: bool = False, cache: bool = True):
        if not files:
            raise DataError(f"domain '{label}' has no images")
        self.label = label
        self.files = tuple(Path(f) for f in files)
        self.spec = spec
        self.strict = strict
        self._cache: Optional[dict] = {} if cache else None
        self._resolution: Optional[int] = spec.resize or spec.crop

    @property
    def count(self) -> int:
        return len(self.files)

    def __len__(self) -> int:
        return len(self.files)

    @property
    def resolution(self) -> int:
        if self._resolution is None:
            self._resolution = self.image(0).shape[-1]
        return self._resolution

    def image(self, index: int) -> torch.Tensor:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        tensor = preprocess_image(self.files[index], self.spec)
        if self._cache is not None:
            self._cache[index] = tensor
        return tensor

    def image_or_skip(self, index: int) -> Optional[torch.Tensor]:
        """Decode one image; in non-strict mode a bad file logs and returns None."""
        try:
            return self.image(index)
        except DataError:
            if self.strict:
                raise
            log.warning("skipping undecodable image %s", self.files[index])
            return None


def load_domain(path, spec: PreprocessSpec, label: Optional[str] = None,
                strict: bool = False, probe: int = 8) -> DomainDataset:
    """List a directory's images into a dataset, probing a few for decodability."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"domain directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise DataError(f"domain directory {path} contains no images")
    ds = DomainDataset(label or path.name, files, spec, strict=strict)
    if probe > 0:
        for i in np.linspace(0, len(files) - 1, min(probe, len(files))).astype(int):
            ds.image(int(i))  # raises DataError on an undecodable probe file
    return ds


def _gather(ds: DomainDataset, indices, rng: np.random.Generator) -> torch.Tensor:
    images = []
    for i in indices:
        tensor = ds.image_or_skip(int(i))
        tries = 0
        while tensor is None:
            i = (int(i) + 1) % ds.count
            tries += 1
            if tries > ds.count:
                raise DataError(f"domain '{ds.label}': no decodable images left")
            tensor = ds.image_or_skip(i)
        if ds.spec.flip and rng.random() < 0.5:
            tensor = torch.flip(tensor, dims=(-1,))
        images.append(tensor)
    return torch.stack(images)


def next_batch(ds: DomainDataset, n: int, rng) -> torch.Tensor:
    """Sample ``n`` images with replacement. ``rng`` is a seed or numpy Generator."""
    if n < 1:
        raise ConfigError(f"batch size must be >= 1, got {n}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    indices = rng.integers(0, ds.count, size=n)
    return _gather(ds, indices, rng)


class BatchSampler:
    """Stateful deterministic sampler over one or more datasets.

    With several datasets, each draw picks a dataset in proportion to its
    size, then an image within it, so the stream is a with-replacement
    sample of the union (used for autoencoder pretraining over X ∪ Y).
    """

    def __init__(self, datasets: Sequence[DomainDataset], batch_size: int, seed: int = 0):
        if not datasets:
            raise ConfigError("sampler needs at least one dataset")
        if batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {batch_size}")
        self.datasets = tuple(datasets)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        counts = np.array([ds.count for ds in self.datasets], dtype=np.float64)
        self._weights = counts / counts.sum()

    def next(self) -> torch.Tensor:
        if len(self.datasets) == 1:
            ds = self.datasets[0]
            idx = self.rng.integers(0, ds.count, size=self.batch_size)
            return _gather(ds, idx, self.rng)
        picks = self.rng.choice(len(self.datasets), size=self.batch_size, p=self._weights)
        images = []
        for which in picks:
            ds = self.datasets[which]
            idx = self.rng.integers(0, ds.count)
            images.append(_gather(ds, [idx], self.rng)[0])
        return torch.stack(images)


def _smooth_noise(rng: np.random.Generator, resolution: int, cells: int = 4) -> np.ndarray:
    """Low-frequency texture in [-1,1]: a coarse grid bilinearly upsampled."""
    grid = rng.uniform(0.0, 255.0, size=(cells, cells, 3)).astype(np.uint8)
    img = Image.fromarray(grid, "RGB").resize((resolution, resolution), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 127.5 - 1.0


def _toy_scene(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Textured background in [0,1], shared by both toy tasks."""
    base = rng.uniform(0.25, 0.75, size=3)
    noise = _smooth_noise(rng, resolution)
    scene = base[None, None, :] + 0.12 * noise
    return np.clip(scene, 0.02, 0.98)


def _contrasting_color(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    bg = background.mean(axis=(0, 1))
    for _ in range(10):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - bg).mean() >= 0.35:
            return color
    return 1.0 - bg


def _draw_shape(scene: np.ndarray, rng: np.random.Generator, circle: bool) -> np.ndarray:
    res = scene.shape[0]
    color = _contrasting_color(rng, scene)
    cx = rng.uniform(0.35, 0.65) * res
    cy = rng.uniform(0.35, 0.65) * res
    radius = rng.uniform(0.18, 0.30) * res
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    if circle:
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    else:
        half = radius * 0.886  # matches the circle's area
        mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    out = scene.copy()
    out[mask] = color
    return out


_WARM = np.array([1.25, 1.0, 0.65], dtype=np.float32)
_COOL = np.array([0.65, 1.0, 1.25], dtype=np.float32)


def _toy_image(kind: str, domain: str, rng: np.random.Generator, resolution: int) -> np.ndarray:
    scene = _toy_scene(rng, resolution)
    if kind == TASK_SHAPES:
        # Domain X carries squares, domain Y circles; everything else matches.
        img = _draw_shape(scene, rng, circle=(domain == "Y"))
    else:
        img = _draw_shape(scene, rng, circle=bool(rng.integers(0, 2)))
        img = img * (_COOL if domain == "Y" else _WARM)[None, None, :]
    return np.clip(img, 0.0, 1.0)


def synth_toy_domains(kind: str, count: int, resolution: int, seed: int, root):
    """Write two procedurally generated unaligned domains under ``root``.

    Emits ``root/domainX`` and ``root/domainY`` as PNG directories and
    returns the two loaded datasets. Bit-identical for a fixed seed.
    """
    if kind not in (TASK_SHAPES, TASK_TINT):
        raise ConfigError(f"unknown toy task '{kind}'")
    if resolution not in (16, 32, 64):
        raise ConfigError(f"toy resolution must be one of 16/32/64, got {resolution}")
    if count < 100:
        raise ConfigError(f"toy domains need at least 100 images per side, got {count}")
    root = Path(root)
    spec = PreprocessSpec(resize=resolution)
    datasets = []
    for di, domain in enumerate(("X", "Y")):
        out_dir = root / f"domain{domain}"
        out_dir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng([seed, di])
        for i in range(count):
            arr = _toy_image(kind, domain, rng, resolution)
            pixels = np.round(arr * 255.0).astype(np.uint8)
            Image.fromarray(pixels, "RGB").save(out_dir / f"{kind}_{i:05d}.png")
        datasets.append(load_domain(out_dir, spec, label=f"domain{domain}"))
    return datasets[0], datasets[1]
