"""Closed-form checks of the scalar training objectives."""

import math

import numpy as np
import pytest
import torch

from percgan import (
    LEAST_SQUARES,
    NON_SATURATING,
    AdversarialFormulation,
    ConfigError,
    DiscriminatorOutput,
    LossReport,
    NumericError,
    ShapeError,
    adv_discriminator_loss,
    adv_generator_loss,
    cycle_loss,
    identity_loss,
    reconstruction_loss,
)

NS = AdversarialFormulation(NON_SATURATING)
LS = AdversarialFormulation(LEAST_SQUARES)
LN2 = math.log(2.0)


def out(main, patches=()):
    return DiscriminatorOutput(
        main_score=torch.as_tensor(main, dtype=torch.float32),
        patch_scores=tuple(torch.as_tensor(p, dtype=torch.float32) for p in patches),
    )


def test_unknown_formulation_rejected():
    with pytest.raises(ConfigError):
        AdversarialFormulation("wasserstein")


def test_ns_generator_loss_at_even_odds_is_ln2():
    # main score 0 -> probability 0.5 -> -log 0.5
    loss = adv_generator_loss(out([0.0, 0.0]), NS)
    assert abs(loss.item() - LN2) <= 1e-6


def test_ns_discriminator_loss_at_chance_is_two_ln2():
    chance = out([0.0, 0.0, 0.0])
    loss = adv_discriminator_loss(chance, chance, NS)
    assert abs(loss.item() - 2 * LN2) <= 1e-6


def test_ns_patch_heads_add_ln2_each_at_even_odds():
    # patch locations are averaged within a head, heads are summed
    one_head = out([0.0], [torch.zeros(1, 1, 4, 4)])
    two_heads = out([0.0], [torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2)])
    assert abs(adv_generator_loss(one_head, NS).item() - 2 * LN2) <= 1e-6
    assert abs(adv_generator_loss(two_heads, NS).item() - 3 * LN2) <= 1e-6


def test_ns_matches_independent_probability_arithmetic():
    def np_log_sig(s, eps=1e-7):
        p = 1.0 / (1.0 + np.exp(-np.asarray(s, dtype=np.float64)))
        return np.log(np.clip(p, eps, 1.0 - eps))

    rng = np.random.default_rng(7)
    main_r = rng.normal(size=4)
    main_f = rng.normal(size=4)
    patch_r = rng.normal(size=(4, 1, 3, 3))
    patch_f = rng.normal(size=(4, 1, 3, 3))

    real = out(main_r, [patch_r])
    fake = out(main_f, [patch_f])

    want_real = np_log_sig(main_r) + np_log_sig(patch_r).mean(axis=(1, 2, 3))
    want_fake = np_log_sig(-main_f) + np_log_sig(-patch_f).mean(axis=(1, 2, 3))
    want_d = -(want_real + want_fake).mean()
    want_g = -(np_log_sig(main_f) + np_log_sig(patch_f).mean(axis=(1, 2, 3))).mean()

    assert abs(adv_discriminator_loss(real, fake, NS).item() - want_d) <= 1e-5
    assert abs(adv_generator_loss(fake, NS).item() - want_g) <= 1e-5


def test_ns_probability_clamp_bounds_the_loss():
    # a wildly confident wrong verdict costs -log(eps), never infinity
    loss = adv_generator_loss(out([-1e6]), NS)
    assert math.isfinite(loss.item())
    assert abs(loss.item() - (-math.log(1e-7))) <= 1e-3


def test_ns_generator_loss_monotone_in_verdict():
    scores = [-3.0, -1.0, 0.0, 1.0, 3.0]
    losses = [adv_generator_loss(out([s]), NS).item() for s in scores]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_ls_zero_at_targets():
    real = out([1.0, 1.0], [torch.ones(2, 1, 2, 2)])
    fake = out([0.0, 0.0], [torch.zeros(2, 1, 2, 2)])
    gen = out([1.0, 1.0], [torch.ones(2, 1, 2, 2)])
    assert adv_discriminator_loss(real, fake, LS).item() == 0.0
    assert adv_generator_loss(gen, LS).item() == 0.0


def test_ls_head_average_arithmetic():
    # real: main err (0-1)^2=1, patch err (0.5-1)^2=0.25 -> head mean 0.625
    # fake: main err (1-0)^2=1, patch err (0.5)^2=0.25 -> head mean 0.625
    real = out([0.0], [torch.full((1, 1, 2, 2), 0.5)])
    fake = out([1.0], [torch.full((1, 1, 2, 2), 0.5)])
    assert abs(adv_discriminator_loss(real, fake, LS).item() - 0.625) <= 1e-6
    assert abs(adv_generator_loss(real, LS).item() - 0.5 * 0.625) <= 1e-6


def test_ls_generator_gradient_pushes_scores_up():
    s = torch.tensor([-2.0, 0.0, 0.5], requires_grad=True)
    adv_generator_loss(DiscriminatorOutput(main_score=s), LS).backward()
    assert (s.grad < 0).all()  # below target 1, loss decreases as score rises


def test_adversarial_losses_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = out(rng.normal(size=3) * 4, [rng.normal(size=(3, 1, 2, 2)) * 4])
        b = out(rng.normal(size=3) * 4, [rng.normal(size=(3, 1, 2, 2)) * 4])
        for f in (NS, LS):
            assert adv_discriminator_loss(a, b, f).item() >= 0.0
            assert adv_generator_loss(a, f).item() >= 0.0


def test_non_finite_scores_raise():
    bad_main = out([float("nan")])
    bad_patch = out([0.0], [torch.full((1, 1, 2, 2), float("inf"))])
    good = out([0.0])
    with pytest.raises(NumericError):
        adv_generator_loss(bad_main, NS)
    with pytest.raises(NumericError):
        adv_discriminator_loss(good, bad_patch, LS)


def test_identity_and_cycle_arithmetic():
    y = torch.zeros(2, 3, 4, 4)
    gy = torch.full((2, 3, 4, 4), 0.5)
    assert abs(identity_loss(y, gy, 5.0).item() - 2.5) <= 1e-6
    assert abs(cycle_loss(y, gy * 4, 10.0).item() - 20.0) <= 1e-6


def test_zero_weight_annihilates_term():
    y = torch.zeros(1, 3, 2, 2)
    gy = torch.ones(1, 3, 2, 2)
    assert identity_loss(y, gy, 0.0).item() == 0.0
    assert cycle_loss(y, gy, 0.0).item() == 0.0


def test_l1_terms_scale_linearly():
    rng = torch.Generator().manual_seed(5)
    a = torch.rand(2, 3, 4, 4, generator=rng)
    b = torch.rand(2, 3, 4, 4, generator=rng)
    base = cycle_loss(a, b, 10.0).item()
    scaled = cycle_loss(3 * a, 3 * b, 10.0).item()
    assert abs(scaled - 3 * base) <= 1e-5


def test_reconstruction_of_zero_target_is_mean_abs():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    got = reconstruction_loss(torch.from_numpy(x), torch.zeros(2, 3, 5, 5)).item()
    assert abs(got - np.abs(x).mean()) <= 1e-6


def test_mismatched_shapes_raise():
    with pytest.raises(ShapeError, match="identity_loss"):
        identity_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 2, 2), 1.0)
    with pytest.raises(ShapeError, match="cycle_loss"):
        cycle_loss(torch.zeros(1, 3, 4, 4), torch.zeros(2, 3, 4, 4), 1.0)


def test_loss_report_totals_and_dict():
    r = LossReport.build(
        step=3, lambda_id=5.0, lambda_cyc=10.0,
        adv_D=1.5, adv_G=0.7, identity=0.2, cycle_fwd=0.3, cycle_bwd=0.4,
    )
    assert abs(r.total_G - (0.7 + 0.2 + 0.3 + 0.4)) <= 1e-9
    assert r.total_D == 1.5
    r.validate()
    d = r.as_dict()
    assert d["step"] == 3 and d["total_D"] == 1.5 and d["lambda_cyc"] == 10.0


def test_loss_report_validate_rejects_tampering_and_nan():
    r = LossReport.build(step=0, adv_G=1.0)
    r.total_G = 2.0
    with pytest.raises(NumericError):
        r.validate()
    bad = LossReport.build(step=0, adv_D=float("nan"))
    with pytest.raises(NumericError, match="adv_D"):
        bad.validate()
