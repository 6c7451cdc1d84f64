"""Run configuration: TOML loading, validation, overrides, model building.

A run is described by one file with sections [data], [generator],
[discriminator], [losses], [train], [eval]. Every field is addressable as
``section.key`` both in error messages and in command-line overrides.
The fully resolved configuration (defaults materialized) hashes to a stable
identity that checkpoints and metrics carry.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import data as data_mod
from .errors import ConfigError
from .evalkit import EvalConfig
from .generator import GeneratorNet
from .percdisc import (
    TRUNK_PERCEPTUAL,
    TRUNK_PLAIN,
    TRUNK_RANDOM,
    PerceptualDiscriminator,
)
from .refnet import (
    ArchDescriptor,
    apply_surgery,
    default_boundaries,
    load_reference_weights,
    partition,
    random_reference_net,
    surgery_descriptor,
    toy_descriptor,
    trainable_trunk,
    vgg19_descriptor,
)
from .trainer import MODE_CYCLE, MODE_SINGLE, TrainingConfig

DATA_FOLDERS = "folders"
DATA_TOY = "toy"


@dataclass
class DataSection:
    kind: str = DATA_FOLDERS
    root: str = ""
    domain_x: str = ""
    domain_y: str = ""
    crop: int = 0          # 0 disables
    resize: int = 0        # 0 disables
    flip: bool = False
    task: str = data_mod.TASK_SHAPES
    count: int = 2000
    resolution: int = 32
    seed: int = 0


@dataclass
class GeneratorSection:
    downsamples: int = 2
    res_blocks: int = 6
    width: int = 64
    normalization: str = "instance"


@dataclass
class DiscriminatorSection:
    arch: str = "vgg19"            # vgg19 | toy | path to a descriptor JSON
    weights: str = ""              # container path; empty means random trunk
    trunk_mode: str = TRUNK_PERCEPTUAL
    blocks: int = 5
    surgery: bool = True
    patch_levels: list = field(default_factory=list)
    head_width: int = 64
    toy_widths: list = field(default_factory=lambda: [16, 32, 64])


@dataclass
class LossSection:
    formulation: str = "non-saturating"
    lambda_id: float = 5.0
    lambda_cyc: float = 10.0


@dataclass
class TrainSection:
    mode: str = MODE_CYCLE
    batch_size: int = 16
    pretrain_steps: int = 2000
    adversarial_steps: int = 5000
    seed: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    log_every: int = 50
    checkpoint_every: int = 1000
    out_dir: str = "runs/out"


@dataclass
class EvalSection:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    width: int = 16
    seed: int = 0
    min_per_side: int = 200
    test_fraction: float = 0.5


_SECTIONS = {
    "data": DataSection,
    "generator": GeneratorSection,
    "discriminator": DiscriminatorSection,
    "losses": LossSection,
    "train": TrainSection,
    "eval": EvalSection,
}

# Keys a config file must state explicitly; everything else is defaulted.
_REQUIRED = (("losses", "lambda_id"), ("train", "mode"), ("data", "kind"))


@dataclass
class FrameworkConfig:
    data: DataSection = field(default_factory=DataSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    discriminator: DiscriminatorSection = field(default_factory=DiscriminatorSection)
    losses: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def config_hash(self) -> str:
        payload = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            mode=self.train.mode,
            formulation=self.losses.formulation,
            lambda_id=self.losses.lambda_id,
            lambda_cyc=self.losses.lambda_cyc,
            learning_rate=self.train.learning_rate,
            beta1=self.train.beta1,
            beta2=self.train.beta2,
            batch_size=self.train.batch_size,
            pretrain_steps=self.train.pretrain_steps,
            adversarial_steps=self.train.adversarial_steps,
            seed=self.train.seed,
            log_every=self.train.log_every,
            checkpoint_every=self.train.checkpoint_every,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**asdict(self.eval))

    def preprocess_spec(self) -> data_mod.PreprocessSpec:
        if self.data.kind == DATA_TOY:
            return data_mod.PreprocessSpec(resize=self.data.resolution, flip=self.data.flip)
        return data_mod.PreprocessSpec(
            crop=self.data.crop or None,
            resize=self.data.resize or None,
            flip=self.data.flip,
        )

    def image_size(self) -> Optional[int]:
        if self.data.kind == DATA_TOY:
            return self.data.resolution
        return self.data.resize or self.data.crop or None


def from_resolved(resolved: dict) -> FrameworkConfig:
    """Rebuild a config from its resolved-dict form (checkpoint snapshots)."""
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = cls(**resolved.get(name, {}))
    return FrameworkConfig(**sections)


def _coerce(section: str, key: str, value, want_type):
    if want_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean, got {value!r}")
        return value
    if want_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return value
    if want_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        return float(value)
    if want_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string, got {value!r}")
        return value
    if want_type is list:
        if not isinstance(value, list):
            raise ConfigError(f"{section}.{key} must be a list, got {value!r}")
        return list(value)
    return value


def _build_section(name: str, raw: dict):
    cls = _SECTIONS[name]
    defaults = cls()
    known = {f for f in defaults.__dataclass_fields__}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        want = type(getattr(defaults, key))
        values[key] = _coerce(name, key, value, want)
    return cls(**values)


def parse_override(text: str) -> tuple[str, str, object]:
    """Parse one ``section.key=value`` override; values use TOML literal syntax."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form section.key=value")
    address, raw_value = text.split("=", 1)
    if "." not in address:
        raise ConfigError(f"override '{text}' must address 'section.key'")
    section, key = address.split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw_value}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw_value  # bare strings need no quotes
    return section.strip(), key.strip(), value


def load_config(path=None, overrides=(), require_explicit: bool = True) -> FrameworkConfig:
    """Load and validate a run configuration.

    ``overrides`` are ``section.key=value`` strings applied on top of the
    file. With ``require_explicit`` the file must state the keys a run must
    pin (λ_id, mode, data kind); programmatic configs can skip that.
    """
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config file {p} is not valid: {e}") from e
    for name in raw:
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section '[{name}]'")
    for text in overrides:
        section, key, value = parse_override(text)
        if section not in _SECTIONS:
            raise ConfigError(f"override addresses unknown section '{section}'")
        raw.setdefault(section, {})[key] = value
    if require_explicit:
        for section, key in _REQUIRED:
            if section not in raw or key not in raw[section]:
                raise ConfigError(f"missing required config key '{section}.{key}'")
    cfg = FrameworkConfig(**{name: _build_section(name, raw.get(name, {})) for name in _SECTIONS})
    validate_config(cfg)
    return cfg


def trunk_descriptor(dcfg: DiscriminatorSection) -> ArchDescriptor:
    if dcfg.arch == "vgg19":
        return vgg19_descriptor()
    if dcfg.arch == "toy":
        return toy_descriptor(tuple(int(w) for w in dcfg.toy_widths))
    return ArchDescriptor.from_json(dcfg.arch)


def validate_config(cfg: FrameworkConfig) -> None:
    """Cross-field checks with field names in every message."""
    if cfg.data.kind not in (DATA_FOLDERS, DATA_TOY):
        raise ConfigError(f"data.kind must be '{DATA_FOLDERS}' or '{DATA_TOY}'")
    if cfg.train.mode not in (MODE_SINGLE, MODE_CYCLE):
        raise ConfigError(f"train.mode must be '{MODE_SINGLE}' or '{MODE_CYCLE}'")
    if cfg.losses.lambda_id < 0 or cfg.losses.lambda_cyc < 0:
        raise ConfigError("losses.lambda_id and losses.lambda_cyc must be >= 0")
    if cfg.generator.normalization != "instance":
        raise ConfigError("generator.normalization: only 'instance' is implemented")
    if cfg.discriminator.trunk_mode not in (TRUNK_PERCEPTUAL, TRUNK_RANDOM, TRUNK_PLAIN):
        raise ConfigError(
            "discriminator.trunk_mode must be 'perceptual', 'random', or 'plain'"
        )
    if cfg.discriminator.trunk_mode == TRUNK_PERCEPTUAL and not cfg.discriminator.weights:
        raise ConfigError(
            "discriminator.trunk_mode='perceptual' needs discriminator.weights "
            "(use trunk_mode='random' for an unpretrained frozen trunk)"
        )
    if cfg.discriminator.blocks < 1:
        raise ConfigError("discriminator.blocks must be >= 1")

    size = cfg.image_size()
    if size is not None:
        g_factor = 2 ** cfg.generator.downsamples
        if size % g_factor:
            raise ConfigError(
                f"image size {size} (from [data]) is not divisible by "
                f"2**generator.downsamples = {g_factor}"
            )
        desc = trunk_descriptor(cfg.discriminator)
        bounds = default_boundaries(desc, cfg.discriminator.blocks)
        d_factor = 2 ** (cfg.discriminator.blocks - 1)
        if size % d_factor:
            raise ConfigError(
                f"image size {size} is not divisible by the trunk pyramid factor "
                f"2**(discriminator.blocks-1) = {d_factor}"
            )
        del bounds


def build_trunk(dcfg: DiscriminatorSection, seed: int = 0):
    """(trunk, partition) per the discriminator section."""
    desc = trunk_descriptor(dcfg)
    if dcfg.weights:
        trunk = load_reference_weights(dcfg.weights, desc)
        if dcfg.surgery and not trunk.surgically_modified:
            trunk = apply_surgery(trunk)
    else:
        desc_eff = surgery_descriptor(desc) if dcfg.surgery else desc
        if dcfg.trunk_mode == TRUNK_PLAIN:
            trunk = trainable_trunk(desc_eff, seed=seed)
        else:
            trunk = random_reference_net(desc_eff, seed=seed)
    part = partition(trunk, default_boundaries(trunk.desc, dcfg.blocks))
    return trunk, part


def build_models(cfg: FrameworkConfig):
    """Deterministically build all generators and discriminators for the run."""

    def _generator() -> GeneratorNet:
        return GeneratorNet(
            in_channels=3, out_channels=3,
            base_width=cfg.generator.width,
            downsamples=cfg.generator.downsamples,
            res_blocks=cfg.generator.res_blocks,
        )

    def _discriminator(seed_shift: int) -> PerceptualDiscriminator:
        trunk, part = build_trunk(cfg.discriminator, seed=cfg.train.seed + seed_shift)
        return PerceptualDiscriminator(
            trunk, part,
            patch_levels=[int(v) for v in cfg.discriminator.patch_levels],
            head_width=cfg.discriminator.head_width,
            trunk_mode=cfg.discriminator.trunk_mode,
        )

    with torch.random.fork_rng():
        torch.manual_seed(cfg.train.seed)
        if cfg.train.mode == MODE_SINGLE:
            generators = {"xy": _generator()}
            discriminators = {"y": _discriminator(0)}
        else:
            generators = {"xy": _generator(), "yx": _generator()}
            discriminators = {"y": _discriminator(0), "x": _discriminator(1)}
    return generators, discriminators


def load_datasets(cfg: FrameworkConfig):
    """(domain X dataset, domain Y dataset) per the data section."""
    spec = cfg.preprocess_spec()
    if cfg.data.kind == DATA_TOY:
        if not cfg.data.root:
            raise ConfigError("data.root is required for toy data (where files are written)")
        return data_mod.synth_toy_domains(
            cfg.data.task, cfg.data.count, cfg.data.resolution,
            cfg.data.seed, cfg.data.root,
        )
    root = Path(cfg.data.root) if cfg.data.root else None
    dir_x = Path(cfg.data.domain_x) if cfg.data.domain_x else (root / "domainX" if root else None)
    dir_y = Path(cfg.data.domain_y) if cfg.data.domain_y else (root / "domainY" if root else None)
    if dir_x is None or dir_y is None:
        raise ConfigError("data.root or both data.domain_x/data.domain_y must be set")
    return (
        data_mod.load_domain(dir_x, spec, label="domainX"),
        data_mod.load_domain(dir_y, spec, label="domainY"),
    )
