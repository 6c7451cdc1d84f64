"""Training orchestration: generator pretraining, alternating adversarial
updates in single-direction and cycle modes, checkpointing, divergence abort.

Determinism contract: a fixed seed plus a fixed config produces bit-identical
loss sequences on one platform. All randomness flows from seeds derived from
the run seed; data order comes from the samplers' own generators.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

import torch

from .errors import CheckpointError, ConfigError, DivergenceError, NumericError, ShapeError
from .generator import GeneratorNet
from .objectives import (
    NON_SATURATING,
    AdversarialFormulation,
    LossReport,
    adv_discriminator_loss,
    adv_generator_loss,
    cycle_loss,
    identity_loss,
    reconstruction_loss,
)
from .percdisc import PerceptualDiscriminator

MODE_SINGLE = "single"
MODE_CYCLE = "cycle"

CHECKPOINT_FORMAT = 1
LATEST_POINTER = "latest.txt"


@dataclass
class TrainingConfig:
    mode: str = MODE_CYCLE
    formulation: str = NON_SATURATING
    lambda_id: Optional[float] = None  # resolved by mode when left unset
    lambda_cyc: float = 10.0
    optimizer: str = "adam"
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    pretrain_steps: int = 2000
    adversarial_steps: int = 5000
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.mode not in (MODE_SINGLE, MODE_CYCLE):
            raise ConfigError(f"unknown training mode '{self.mode}'")
        if self.optimizer != "adam":
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.pretrain_steps < 0 or self.adversarial_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.lambda_id is None:
            self.lambda_id = 5.0 if self.mode == MODE_CYCLE else 10.0

    def adversarial(self) -> AdversarialFormulation:
        return AdversarialFormulation(kind=self.formulation)


def derived_seed(base: int, stream: str) -> int:
    """Stable per-purpose seed so independent streams never share state."""
    offsets = {
        "init": 0,
        "pretrain_xy": 1,
        "pretrain_yx": 2,
        "data_x": 3,
        "data_y": 4,
        "pretrain_data": 5,
    }
    if stream not in offsets:
        raise ConfigError(f"unknown seed stream '{stream}'")
    return base * 10 + offsets[stream]


@dataclass
class TrainState:
    """Everything the step functions mutate."""

    step: int
    mode: str
    generators: Dict[str, GeneratorNet]
    discriminators: Dict[str, PerceptualDiscriminator] = field(default_factory=dict)
    optimizers: Dict[str, torch.optim.Optimizer] = field(default_factory=dict)
    running: Dict[str, float] = field(default_factory=dict)
    history: list = field(default_factory=list)

    def update_running(self, report: LossReport, momentum: float = 0.98) -> None:
        for name, value in report.as_dict().items():
            if name == "step":
                continue
            prev = self.running.get(name)
            self.running[name] = value if prev is None else momentum * prev + (1 - momentum) * value


def _adam(params, cfg: TrainingConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))


def init_state(cfg: TrainingConfig, generators: Dict[str, GeneratorNet],
               discriminators: Dict[str, PerceptualDiscriminator]) -> TrainState:
    """Build the adversarial-phase state with one optimizer per side.

    Frozen trunk parameters never enter an optimizer group; every trainable
    parameter lands in exactly one group.
    """
    expected = {MODE_SINGLE: ({"xy"}, {"y"}), MODE_CYCLE: ({"xy", "yx"}, {"x", "y"})}[cfg.mode]
    if set(generators) != expected[0] or set(discriminators) != expected[1]:
        raise ConfigError(
            f"mode '{cfg.mode}' needs generators {sorted(expected[0])} and "
            f"discriminators {sorted(expected[1])}, got {sorted(generators)} / "
            f"{sorted(discriminators)}"
        )
    g_params = [p for g in generators.values() for p in g.parameters()]
    d_params = [p for d in discriminators.values() for p in d.trainable_parameters()]
    for p in g_params + d_params:
        if not p.requires_grad:
            raise ConfigError("a frozen parameter reached an optimizer group")
    optimizers = {"G": _adam(g_params, cfg), "D": _adam(d_params, cfg)}
    return TrainState(step=0, mode=cfg.mode, generators=dict(generators),
                      discriminators=dict(discriminators), optimizers=optimizers)


def _ensure_finite(term: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise DivergenceError(term)
    return value


@contextmanager
def _params_frozen(params):
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)


def pretrain_generator(gen: GeneratorNet, sampler, cfg: TrainingConfig,
                       log_cb: Optional[Callable[[LossReport], None]] = None) -> TrainState:
    """Autoencoder pretraining on the sampler's stream (the union of domains)."""
    if cfg.pretrain_steps <= 0:
        raise ConfigError("pretraining requires pretrain_steps > 0")
    opt = _adam(gen.parameters(), cfg)
    state = TrainState(step=0, mode="pretrain", generators={"g": gen},
                       optimizers={"G": opt})
    for _ in range(cfg.pretrain_steps):
        batch = sampler.next()
        out = gen(batch)
        loss = _ensure_finite("recon", reconstruction_loss(batch, out))
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.step += 1
        report = LossReport.build(step=state.step, recon=float(loss.detach()))
        state.update_running(report)
        state.history.append(report.as_dict())
        if log_cb is not None and state.step % cfg.log_every == 0:
            log_cb(report)
    return state


def train_step_single(state: TrainState, batch_x: torch.Tensor, batch_y: torch.Tensor,
                      cfg: TrainingConfig) -> tuple[TrainState, LossReport]:
    """One discriminator update, then one generator update (X→Y direction)."""
    gen = state.generators["xy"]
    disc = state.discriminators["y"]
    form = cfg.adversarial()

    fake_y = gen(batch_x).detach()
    d_loss = _ensure_finite("adv_D", adv_discriminator_loss(disc(batch_y), disc(fake_y), form))
    state.optimizers["D"].zero_grad()
    d_loss.backward()
    state.optimizers["D"].step()

    with _params_frozen(disc.trainable_parameters()):
        fake_y = gen(batch_x)
        g_adv = _ensure_finite("adv_G", adv_generator_loss(disc(fake_y), form))
        idt = _ensure_finite("identity", identity_loss(batch_y, gen(batch_y), cfg.lambda_id))
        g_loss = g_adv + idt
        state.optimizers["G"].zero_grad()
        g_loss.backward()
        state.optimizers["G"].step()

    state.step += 1
    report = LossReport.build(
        step=state.step,
        adv_D=float(d_loss.detach()), adv_G=float(g_adv.detach()),
        identity=float(idt.detach()),
        lambda_id=cfg.lambda_id, lambda_cyc=0.0,
    )
    report.validate()
    state.update_running(report)
    return state, report


def train_step_cycle(state: TrainState, batch_x: torch.Tensor, batch_y: torch.Tensor,
                     cfg: TrainingConfig) -> tuple[TrainState, LossReport]:
    """Joint step for both directions: two discriminators, then both generators."""
    g_xy, g_yx = state.generators["xy"], state.generators["yx"]
    d_x, d_y = state.discriminators["x"], state.discriminators["y"]
    form = cfg.adversarial()

    fake_y = g_xy(batch_x).detach()
    fake_x = g_yx(batch_y).detach()
    d_loss = adv_discriminator_loss(d_y(batch_y), d_y(fake_y), form) \
        + adv_discriminator_loss(d_x(batch_x), d_x(fake_x), form)
    _ensure_finite("adv_D", d_loss)
    state.optimizers["D"].zero_grad()
    d_loss.backward()
    state.optimizers["D"].step()

    d_trainable = d_x.trainable_parameters() + d_y.trainable_parameters()
    with _params_frozen(d_trainable):
        fake_y = g_xy(batch_x)
        fake_x = g_yx(batch_y)
        g_adv = adv_generator_loss(d_y(fake_y), form) + adv_generator_loss(d_x(fake_x), form)
        _ensure_finite("adv_G", g_adv)
        cyc_fwd = _ensure_finite("cycle_fwd", cycle_loss(batch_x, g_yx(fake_y), cfg.lambda_cyc))
        cyc_bwd = _ensure_finite("cycle_bwd", cycle_loss(batch_y, g_xy(fake_x), cfg.lambda_cyc))
        idt = identity_loss(batch_y, g_xy(batch_y), cfg.lambda_id) \
            + identity_loss(batch_x, g_yx(batch_x), cfg.lambda_id)
        _ensure_finite("identity", idt)
        g_loss = g_adv + cyc_fwd + cyc_bwd + idt
        state.optimizers["G"].zero_grad()
        g_loss.backward()
        state.optimizers["G"].step()

    state.step += 1
    report = LossReport.build(
        step=state.step,
        adv_D=float(d_loss.detach()), adv_G=float(g_adv.detach()),
        identity=float(idt.detach()),
        cycle_fwd=float(cyc_fwd.detach()), cycle_bwd=float(cyc_bwd.detach()),
        lambda_id=cfg.lambda_id, lambda_cyc=cfg.lambda_cyc,
    )
    report.validate()
    state.update_running(report)
    return state, report


def save_checkpoint(state: TrainState, path, config_hash: str = "",
                    config_snapshot: Optional[dict] = None) -> Path:
    """Serialize all models, optimizer state, and run identity to one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "step": state.step,
        "mode": state.mode,
        "config_hash": config_hash,
        "config": config_snapshot or {},
        "torch_version": torch.__version__,
        "generators": {k: g.state_dict() for k, g in state.generators.items()},
        "discriminators": {k: d.state_dict() for k, d in state.discriminators.items()},
        "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, state: TrainState, expected_hash: Optional[str] = None,
                    override: bool = False) -> TrainState:
    """Restore a checkpoint into freshly built models of the same architecture.

    Refuses a config-hash mismatch unless ``override`` is set; the state then
    keeps the caller's (new) config values.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "generators" not in payload:
        raise CheckpointError(f"checkpoint {path} has an unexpected layout")
    stored_hash = payload.get("config_hash", "")
    if expected_hash is not None and stored_hash and stored_hash != expected_hash:
        if not override:
            raise CheckpointError(
                f"checkpoint {path} was written under config hash {stored_hash}, "
                f"current config hashes to {expected_hash}; pass override to load anyway"
            )
    if payload.get("mode") != state.mode:
        raise CheckpointError(
            f"checkpoint mode '{payload.get('mode')}' does not match state mode '{state.mode}'"
        )
    for group, modules in (("generators", state.generators),
                           ("discriminators", state.discriminators)):
        stored = payload.get(group, {})
        if set(stored) != set(modules):
            raise CheckpointError(
                f"checkpoint {group} {sorted(stored)} do not match state {sorted(modules)}"
            )
        for name, module in modules.items():
            try:
                module.load_state_dict(stored[name])
            except RuntimeError as e:
                raise ShapeError(f"{group[:-1]} '{name}': {e}") from e
    for name, opt in state.optimizers.items():
        if name in payload.get("optimizers", {}):
            try:
                opt.load_state_dict(payload["optimizers"][name])
            except (RuntimeError, ValueError) as e:
                raise CheckpointError(f"optimizer '{name}' state does not fit: {e}") from e
    state.step = int(payload.get("step", 0))
    return state


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"checkpoint_{step:07d}.pt"


def _write_latest(out_dir: Path, ckpt: Path) -> None:
    (out_dir / LATEST_POINTER).write_text(ckpt.name + "\n")


def latest_checkpoint(out_dir) -> Optional[Path]:
    pointer = Path(out_dir) / LATEST_POINTER
    if not pointer.exists():
        return None
    name = pointer.read_text().strip()
    candidate = Path(out_dir) / name
    return candidate if candidate.exists() else None


def run_training(state: TrainState, sampler_x, sampler_y, cfg: TrainingConfig,
                 out_dir=None, config_hash: str = "",
                 config_snapshot: Optional[dict] = None,
                 log_cb: Optional[Callable[[LossReport], None]] = None) -> TrainState:
    """Drive alternating updates for ``cfg.adversarial_steps`` steps.

    Writes step-numbered checkpoints plus a "latest" pointer when ``out_dir``
    is given. A non-finite loss aborts with the last checkpoint's path.
    """
    step_fn = train_step_single if cfg.mode == MODE_SINGLE else train_step_cycle
    out_dir = Path(out_dir) if out_dir is not None else None
    last_ckpt: Optional[Path] = None

    def _checkpoint() -> None:
        nonlocal last_ckpt
        if out_dir is None:
            return
        last_ckpt = save_checkpoint(state, checkpoint_path(out_dir, state.step),
                                    config_hash, config_snapshot)
        _write_latest(out_dir, last_ckpt)

    while state.step < cfg.adversarial_steps:
        batch_x = sampler_x.next()
        batch_y = sampler_y.next()
        try:
            state, report = step_fn(state, batch_x, batch_y, cfg)
        except NumericError as e:
            raise DivergenceError(str(e), last_checkpoint=last_ckpt) from e
        except DivergenceError as e:
            raise DivergenceError(e.term, last_checkpoint=last_ckpt) from e
        state.history.append(report.as_dict())
        if log_cb is not None and state.step % cfg.log_every == 0:
            log_cb(report)
        if cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
            _checkpoint()
    if out_dir is not None and (cfg.checkpoint_every <= 0
                                or state.step % cfg.checkpoint_every != 0
                                or last_ckpt is None):
        _checkpoint()
    return state


def parameter_checksum(module: torch.nn.Module) -> str:
    """Order-stable digest of all parameters, for freezing contracts."""
    import hashlib

    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
