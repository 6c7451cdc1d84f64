"""Scalar training objectives.

Adversarial losses come in two formulations: non-saturating log-likelihood
over head probabilities, and least-squares penalties on raw head scores
(targets: real 1, fake 0, generator 1). Patch-location terms are averaged
within each head and then summed (non-saturating) or averaged (least
squares) across heads, so loss magnitudes do not grow with resolution.
The remaining terms are weighted mean-L1 penalties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, NumericError, ShapeError
from .percdisc import PROB_EPS, DiscriminatorOutput, _safe_log_sigmoid

NON_SATURATING = "non-saturating"
LEAST_SQUARES = "least-squares"


@dataclass(frozen=True)
class AdversarialFormulation:
    """Which adversarial objective to optimize, with its target constants."""

    kind: str = NON_SATURATING
    fake_target: float = 0.0
    real_target: float = 1.0
    generator_target: float = 1.0

    def __post_init__(self):
        if self.kind not in (NON_SATURATING, LEAST_SQUARES):
            raise ConfigError(f"unknown adversarial formulation '{self.kind}'")


def _check_finite(out: DiscriminatorOutput, who: str) -> None:
    if not torch.isfinite(out.main_score).all():
        raise NumericError(f"non-finite main-head score in {who} output")
    for j, s in enumerate(out.patch_scores):
        if not torch.isfinite(s).all():
            raise NumericError(f"non-finite patch-head {j} score in {who} output")


def _mean_log_prob(out: DiscriminatorOutput, complement: bool, eps: float) -> torch.Tensor:
    """Per-sample log-probability with patch locations averaged per head."""
    sign = -1.0 if complement else 1.0
    total = _safe_log_sigmoid(sign * out.main_score, eps)
    for scores in out.patch_scores:
        total = total + _safe_log_sigmoid(sign * scores, eps).mean(dim=(1, 2, 3))
    return total


def _head_square_error(out: DiscriminatorOutput, target: float) -> torch.Tensor:
    """Squared distance to target, averaged within each head then across heads."""
    per_head = [((out.main_score - target) ** 2).mean()]
    per_head += [((s - target) ** 2).mean() for s in out.patch_scores]
    return torch.stack(per_head).mean()


def adv_discriminator_loss(
    out_real: DiscriminatorOutput,
    out_fake: DiscriminatorOutput,
    f: AdversarialFormulation,
    eps: float = PROB_EPS,
) -> torch.Tensor:
    """Discriminator's minimization objective.

    The fake outputs must come from a detached generator result; this
    function cannot verify that, the trainer owns it.
    """
    _check_finite(out_real, "real")
    _check_finite(out_fake, "fake")
    if f.kind == NON_SATURATING:
        real_term = _mean_log_prob(out_real, complement=False, eps=eps)
        fake_term = _mean_log_prob(out_fake, complement=True, eps=eps)
        return -(real_term + fake_term).mean()
    real_sq = _head_square_error(out_real, f.real_target)
    fake_sq = _head_square_error(out_fake, f.fake_target)
    return 0.5 * (real_sq + fake_sq)


def adv_generator_loss(
    out_fake: DiscriminatorOutput,
    f: AdversarialFormulation,
    eps: float = PROB_EPS,
) -> torch.Tensor:
    """Generator's minimization objective against the discriminator's verdict."""
    _check_finite(out_fake, "fake")
    if f.kind == NON_SATURATING:
        return -_mean_log_prob(out_fake, complement=False, eps=eps).mean()
    return 0.5 * _head_square_error(out_fake, f.generator_target)


def _mean_l1(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def identity_loss(y: torch.Tensor, gy: torch.Tensor, lambda_id: float) -> torch.Tensor:
    """Penalty for changing images already in the target domain."""
    return lambda_id * _mean_l1(y, gy, "identity_loss")


def cycle_loss(x: torch.Tensor, x_cycled: torch.Tensor, lambda_cyc: float) -> torch.Tensor:
    """Penalty for the two-generator round trip straying from the input."""
    return lambda_cyc * _mean_l1(x, x_cycled, "cycle_loss")


def reconstruction_loss(x: torch.Tensor, gx: torch.Tensor) -> torch.Tensor:
    """Unweighted autoencoding penalty used during generator pretraining."""
    return _mean_l1(x, gx, "reconstruction_loss")


@dataclass
class LossReport:
    """Scalar loss terms of one step, already weighted, plus their totals."""

    step: int
    adv_D: float = 0.0
    adv_G: float = 0.0
    identity: float = 0.0
    cycle_fwd: float = 0.0
    cycle_bwd: float = 0.0
    recon: float = 0.0
    lambda_id: float = 0.0
    lambda_cyc: float = 0.0
    total_G: float = field(default=0.0)
    total_D: float = field(default=0.0)

    @classmethod
    def build(cls, step: int, lambda_id: float = 0.0, lambda_cyc: float = 0.0, **terms) -> "LossReport":
        report = cls(step=step, lambda_id=lambda_id, lambda_cyc=lambda_cyc, **terms)
        report.total_G = report.adv_G + report.identity + report.cycle_fwd + report.cycle_bwd + report.recon
        report.total_D = report.adv_D
        return report

    def validate(self) -> None:
        values = (
            self.adv_D, self.adv_G, self.identity, self.cycle_fwd,
            self.cycle_bwd, self.recon, self.total_G, self.total_D,
        )
        for name, v in zip(
            ("adv_D", "adv_G", "identity", "cycle_fwd", "cycle_bwd", "recon", "total_G", "total_D"),
            values,
        ):
            if not math.isfinite(v):
                raise NumericError(f"non-finite loss term '{name}'")
        want_g = self.adv_G + self.identity + self.cycle_fwd + self.cycle_bwd + self.recon
        if abs(self.total_G - want_g) > 1e-6 or abs(self.total_D - self.adv_D) > 1e-6:
            raise NumericError("loss totals do not match their components")

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "adv_D": self.adv_D,
            "adv_G": self.adv_G,
            "identity": self.identity,
            "cycle_fwd": self.cycle_fwd,
            "cycle_bwd": self.cycle_bwd,
            "recon": self.recon,
            "lambda_id": self.lambda_id,
            "lambda_cyc": self.lambda_cyc,
            "total_G": self.total_G,
            "total_D": self.total_D,
        }
