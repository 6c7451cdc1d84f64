"""Quantitative evaluation of translation quality.

Two instruments: a classifier two-sample test (train a fresh small
classifier to tell real from translated; hold-out cross-entropy near ln 2
means indistinguishable, near 0 means trivially separable) and the mean
negative log-likelihood of the target class under a frozen attribute
classifier. Both use natural logarithms and a pinned, hashed classifier
configuration so results are comparable across runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .data import DomainDataset
from .errors import ConfigError, DataError

LN2 = math.log(2.0)


@dataclass(frozen=True)
class EvalConfig:
    """Pinned classifier recipe for both instruments."""

    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    width: int = 16
    seed: int = 0
    min_per_side: int = 200
    test_fraction: float = 0.5

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class C2STResult:
    log_loss: float
    accuracy: float
    train_size: int
    test_size: int
    config_hash: str

    def record(self, name: str) -> "MetricRecord":
        return MetricRecord(
            name=name,
            value=self.log_loss,
            config_hash=self.config_hash,
            details={"accuracy": self.accuracy, "train_size": self.train_size,
                     "test_size": self.test_size},
        )


@dataclass
class AttributeScore:
    mean_nll: float
    count: int

    def record(self, name: str, config_hash: str = "") -> "MetricRecord":
        return MetricRecord(
            name=name, value=self.mean_nll, config_hash=config_hash,
            details={"count": self.count},
        )


@dataclass
class MetricRecord:
    name: str
    value: float
    config_hash: str = ""
    timestamp: float = field(default_factory=time.time)
    details: dict = field(default_factory=dict)


class SmallConvClassifier(nn.Module):
    """Three conv stages with pooling, then a linear head.

    Downsampling uses max pooling: with the globally averaged final
    features, mean pools wash out localized cues (shape corners, edges)
    and leave gradient-free plateaus, while max pools keep them decisive.
    The head starts at zero, so the untrained classifier predicts the
    uniform distribution exactly (loss ln(num classes) for any input).
    """

    def __init__(self, classes: int = 2, width: int = 16, in_channels: int = 3):
        super().__init__()
        self.classes = classes
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.MaxPool2d(2),
            nn.Conv2d(width, width * 2, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.MaxPool2d(2),
            nn.Conv2d(width * 2, width * 4, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.head = nn.Linear(width * 4, classes)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def _as_stack(images) -> torch.Tensor:
    """Accept a 4d tensor, a list of 3d tensors, or a DomainDataset."""
    if isinstance(images, torch.Tensor):
        if images.dim() != 4:
            raise DataError(f"image set must be 4d, got shape {tuple(images.shape)}")
        return images
    if isinstance(images, DomainDataset):
        return torch.stack([images.image(i) for i in range(len(images))])
    return torch.stack(list(images))


def _fit_classifier(model: nn.Module, xs: torch.Tensor, ys: torch.Tensor, cfg: EvalConfig) -> None:
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           weight_decay=cfg.weight_decay)
    model.train()
    n = xs.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            logits = model(xs[idx])
            loss = F.cross_entropy(logits, ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()


def _score_classifier(model: nn.Module, xs: torch.Tensor, ys: torch.Tensor,
                      batch_size: int) -> tuple[float, float]:
    model.eval()
    total_nll, correct = 0.0, 0
    with torch.no_grad():
        for lo in range(0, xs.shape[0], batch_size):
            logits = model(xs[lo:lo + batch_size])
            labels = ys[lo:lo + batch_size]
            total_nll += F.cross_entropy(logits, labels, reduction="sum").item()
            correct += (logits.argmax(dim=1) == labels).sum().item()
    n = xs.shape[0]
    return total_nll / n, correct / n


def c2st(real_set, fake_set, cfg: Optional[EvalConfig] = None) -> C2STResult:
    """Two-sample test: hold-out cross-entropy of a fresh real-vs-fake classifier.

    Higher loss means the sets are harder to tell apart (ln 2 is chance).
    Deterministic for a fixed ``cfg.seed``.
    """
    cfg = cfg or EvalConfig()
    real = _as_stack(real_set)
    fake = _as_stack(fake_set)
    n = min(real.shape[0], fake.shape[0])
    if n < cfg.min_per_side:
        raise DataError(
            f"two-sample test needs at least {cfg.min_per_side} images per side, got {n}"
        )
    rng = np.random.default_rng(cfg.seed)
    real = real[rng.permutation(real.shape[0])[:n]]
    fake = fake[rng.permutation(fake.shape[0])[:n]]
    n_test = int(round(n * cfg.test_fraction))
    n_train = n - n_test

    train_x = torch.cat([real[:n_train], fake[:n_train]])
    train_y = torch.cat([torch.ones(n_train, dtype=torch.long),
                         torch.zeros(n_train, dtype=torch.long)])
    test_x = torch.cat([real[n_train:], fake[n_train:]])
    test_y = torch.cat([torch.ones(n_test, dtype=torch.long),
                        torch.zeros(n_test, dtype=torch.long)])

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = SmallConvClassifier(classes=2, width=cfg.width,
                                    in_channels=real.shape[1])
        _fit_classifier(model, train_x, train_y, cfg)
    log_loss, accuracy = _score_classifier(model, test_x, test_y, cfg.batch_size)
    return C2STResult(
        log_loss=log_loss,
        accuracy=accuracy,
        train_size=2 * n_train,
        test_size=2 * n_test,
        config_hash=cfg.config_hash(),
    )


def train_attribute_classifier(
    ds_x, ds_y, cfg: Optional[EvalConfig] = None, holdout_fraction: float = 0.2,
):
    """Train a two-class attribute judge from domain membership.

    Class 0 is the first domain's attribute, class 1 the second's. Returns
    the frozen classifier and its hold-out statistics (per-class mean
    negative log-likelihood and overall accuracy).
    """
    cfg = cfg or EvalConfig()
    xs0 = _as_stack(ds_x)
    xs1 = _as_stack(ds_y)
    rng = np.random.default_rng(cfg.seed)
    xs0 = xs0[rng.permutation(xs0.shape[0])]
    xs1 = xs1[rng.permutation(xs1.shape[0])]
    h0 = max(1, int(round(xs0.shape[0] * holdout_fraction)))
    h1 = max(1, int(round(xs1.shape[0] * holdout_fraction)))

    train_x = torch.cat([xs0[h0:], xs1[h1:]])
    train_y = torch.cat([
        torch.zeros(xs0.shape[0] - h0, dtype=torch.long),
        torch.ones(xs1.shape[0] - h1, dtype=torch.long),
    ])
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = SmallConvClassifier(classes=2, width=cfg.width,
                                    in_channels=train_x.shape[1])
        _fit_classifier(model, train_x, train_y, cfg)

    hold_x = torch.cat([xs0[:h0], xs1[:h1]])
    hold_y = torch.cat([torch.zeros(h0, dtype=torch.long), torch.ones(h1, dtype=torch.long)])
    _, accuracy = _score_classifier(model, hold_x, hold_y, cfg.batch_size)
    stats = {
        "holdout_accuracy": accuracy,
        "holdout_nll_class0": attribute_logloss(model, xs0[:h0], 0).mean_nll,
        "holdout_nll_class1": attribute_logloss(model, xs1[:h1], 1).mean_nll,
        "config_hash": cfg.config_hash(),
    }
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model, stats


def attribute_logloss(classifier: nn.Module, images, target: int,
                      batch_size: int = 64) -> AttributeScore:
    """Mean -log p(target | image) over a set, under a frozen classifier."""
    classes = getattr(classifier, "classes", None)
    if classes is not None and not 0 <= target < classes:
        raise ConfigError(f"class id {target} unknown to a {classes}-class classifier")
    xs = _as_stack(images)
    classifier.eval()
    total = 0.0
    with torch.no_grad():
        for lo in range(0, xs.shape[0], batch_size):
            log_probs = F.log_softmax(classifier(xs[lo:lo + batch_size]), dim=1)
            total += (-log_probs[:, target]).sum().item()
    return AttributeScore(mean_nll=total / xs.shape[0], count=xs.shape[0])


def export_classifier_trunk(model: SmallConvClassifier, weights_path):
    """Export a trained classifier's conv stack as a frozen reference trunk.

    The stack is exported as trained — max pools and leaky rectifiers —
    i.e. in pre-surgery form; callers decide whether to modify it at load
    time. The classifier consumed [-1,1] inputs directly, so the container
    records neutral normalization. Returns (container path, descriptor
    path).
    """
    from .refnet import (
        CONV,
        LEAKY_RELU,
        MAX_POOL,
        ArchDescriptor,
        LayerSpec,
        ReferenceNet,
        save_reference_weights,
    )

    convs = [m for m in model.features if isinstance(m, nn.Conv2d)]
    layers: list[LayerSpec] = []
    for i, conv in enumerate(convs):
        if i > 0:
            layers.append(LayerSpec(MAX_POOL, kernel=2, stride=2))
        layers.append(LayerSpec(
            CONV, kernel=conv.kernel_size[0], stride=1,
            in_channels=conv.in_channels, out_channels=conv.out_channels,
        ))
        layers.append(LayerSpec(LEAKY_RELU, slope=0.2))
    desc = ArchDescriptor(source="attribute-classifier", layers=tuple(layers))
    net = ReferenceNet(desc, surgically_modified=False)
    with torch.no_grad():
        for (_, dst), src in zip(net.conv_modules(), convs):
            dst.weight.copy_(src.weight)
            dst.bias.copy_(src.bias)
    container = save_reference_weights(net, weights_path)
    arch_path = Path(weights_path).with_name(Path(weights_path).stem + ".arch.json")
    desc.to_json(arch_path)
    return container, arch_path


def save_attribute_classifier(model: SmallConvClassifier, path) -> Path:
    path = Path(path)
    head_in = model.head.in_features
    torch.save({
        "classes": model.classes,
        "width": head_in // 4,
        "in_channels": model.features[0].in_channels,
        "state": model.state_dict(),
    }, path)
    return path


def load_attribute_classifier(path) -> SmallConvClassifier:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        model = SmallConvClassifier(
            classes=payload["classes"], width=payload["width"],
            in_channels=payload["in_channels"],
        )
        model.load_state_dict(payload["state"])
    except Exception as e:
        raise DataError(f"cannot load attribute classifier {path}: {e}") from e
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def export_metrics(results: Sequence[MetricRecord], path) -> Path:
    """Write metric records as one JSON object per line."""
    path = Path(path)
    lines = []
    for rec in results:
        lines.append(json.dumps({
            "name": rec.name,
            "value": rec.value,
            "config_hash": rec.config_hash,
            "timestamp": rec.timestamp,
            "details": rec.details,
        }, sort_keys=True))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_metrics(path) -> list[MetricRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        records.append(MetricRecord(
            name=raw["name"], value=raw["value"],
            config_hash=raw.get("config_hash", ""),
            timestamp=raw.get("timestamp", 0.0),
            details=raw.get("details", {}),
        ))
    return records


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = ((img.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def save_montage(pairs: Sequence[tuple[torch.Tensor, torch.Tensor]], path) -> Path:
    """Write a 2×N grid image: inputs on the top row, outputs below."""
    if not pairs:
        raise DataError("montage needs at least one image pair")
    path = Path(path)
    h, w = pairs[0][0].shape[-2:]
    grid = np.zeros((2 * h, len(pairs) * w, 3), dtype=np.uint8)
    for col, (src, out) in enumerate(pairs):
        grid[:h, col * w:(col + 1) * w] = _to_uint8(src)
        grid[h:, col * w:(col + 1) * w] = _to_uint8(out)
    Image.fromarray(grid, "RGB").save(path)
    return path
