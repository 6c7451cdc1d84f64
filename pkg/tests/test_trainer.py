"""Training loop contracts: freezing, alternation, checkpoints, determinism."""

import copy

import numpy as np
import pytest
import torch

from percgan import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    GeneratorNet,
    PerceptualDiscriminator,
    ShapeError,
    TrainingConfig,
    TrainState,
    init_state,
    load_checkpoint,
    pretrain_generator,
    run_training,
    save_checkpoint,
    train_step_cycle,
    train_step_single,
    translate,
)
from percgan.refnet import (
    default_boundaries,
    partition,
    random_reference_net,
    surgery_descriptor,
    toy_descriptor,
)
from percgan.trainer import (
    MODE_CYCLE,
    MODE_SINGLE,
    checkpoint_path,
    derived_seed,
    latest_checkpoint,
    parameter_checksum,
)


def tiny_disc(seed=0):
    desc = surgery_descriptor(toy_descriptor((8, 8)))
    trunk = random_reference_net(desc, seed=seed)
    part = partition(trunk, default_boundaries(desc, 2))
    with torch.random.fork_rng():
        torch.manual_seed(seed + 100)
        return PerceptualDiscriminator(trunk, part, patch_levels=(1,),
                                       head_width=8, trunk_mode="random")


def tiny_gen(seed=0, width=4):
    with torch.random.fork_rng():
        torch.manual_seed(seed + 200)
        return GeneratorNet(base_width=width, downsamples=1, res_blocks=1)


def make_state(mode=MODE_SINGLE, cfg=None, seed=0, width=4):
    cfg = cfg or TrainingConfig(mode=mode, batch_size=2)
    if mode == MODE_SINGLE:
        gens = {"xy": tiny_gen(seed, width)}
        discs = {"y": tiny_disc(seed)}
    else:
        gens = {"xy": tiny_gen(seed, width), "yx": tiny_gen(seed + 1, width)}
        discs = {"x": tiny_disc(seed), "y": tiny_disc(seed + 1)}
    return init_state(cfg, gens, discs), cfg


class TensorSampler:
    """Deterministic stream of synthetic [-1,1] batches."""

    def __init__(self, seed, batch=2, size=16, nan_after=None):
        self.rng = np.random.default_rng(seed)
        self.batch, self.size = batch, size
        self.nan_after = nan_after
        self.calls = 0

    def next(self):
        self.calls += 1
        arr = self.rng.uniform(-1, 1, size=(self.batch, 3, self.size, self.size))
        t = torch.from_numpy(arr.astype(np.float32))
        if self.nan_after is not None and self.calls > self.nan_after:
            t[0, 0, 0, 0] = float("nan")
        return t


# ------------------------------------------------------------- configuration


def test_derived_seed_streams_are_distinct():
    seeds = {derived_seed(7, s) for s in
             ("init", "pretrain_xy", "pretrain_yx", "data_x", "data_y", "pretrain_data")}
    assert len(seeds) == 6
    with pytest.raises(ConfigError):
        derived_seed(7, "mystery")


def test_lambda_id_default_depends_on_mode():
    assert TrainingConfig(mode=MODE_CYCLE).lambda_id == 5.0
    assert TrainingConfig(mode=MODE_SINGLE).lambda_id == 10.0
    assert TrainingConfig(mode=MODE_CYCLE, lambda_id=2.5).lambda_id == 2.5


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(mode="triple")
    with pytest.raises(ConfigError):
        TrainingConfig(optimizer="sgd")
    with pytest.raises(ConfigError):
        TrainingConfig(batch_size=0)


def test_init_state_requires_exact_model_names():
    cfg = TrainingConfig(mode=MODE_SINGLE)
    with pytest.raises(ConfigError, match="needs generators"):
        init_state(cfg, {"ab": tiny_gen()}, {"y": tiny_disc()})
    with pytest.raises(ConfigError, match="needs generators"):
        init_state(cfg, {"xy": tiny_gen()}, {"x": tiny_disc(), "y": tiny_disc(1)})


def test_optimizers_cover_exactly_the_trainable_parameters():
    state, _ = make_state(MODE_SINGLE)
    d = state.discriminators["y"]
    g_ids = {id(p) for group in state.optimizers["G"].param_groups for p in group["params"]}
    d_ids = {id(p) for group in state.optimizers["D"].param_groups for p in group["params"]}
    assert g_ids == {id(p) for p in state.generators["xy"].parameters()}
    assert d_ids == {id(p) for p in d.trainable_parameters()}
    trunk_ids = {id(p) for p in d.trunk.parameters()}
    assert not (g_ids | d_ids) & trunk_ids


# ------------------------------------------------------------- stepping


def test_single_step_updates_everything_but_the_trunk():
    state, cfg = make_state(MODE_SINGLE)
    disc = state.discriminators["y"]
    trunk_before = parameter_checksum(disc.trunk)
    head_before = parameter_checksum(disc.main_head)
    gen_before = parameter_checksum(state.generators["xy"])
    sampler = TensorSampler(0)
    for _ in range(2):
        state, report = train_step_single(state, sampler.next(), sampler.next(), cfg)
    assert parameter_checksum(disc.trunk) == trunk_before
    assert parameter_checksum(disc.main_head) != head_before
    assert parameter_checksum(state.generators["xy"]) != gen_before
    assert report.step == 2
    assert report.cycle_fwd == 0.0 and report.cycle_bwd == 0.0
    report.validate()


def test_single_step_populates_gradients_on_both_sides():
    state, cfg = make_state(MODE_SINGLE)
    sampler = TensorSampler(1)
    state, _ = train_step_single(state, sampler.next(), sampler.next(), cfg)
    disc = state.discriminators["y"]
    assert all(p.grad is not None for p in disc.trainable_parameters())
    assert all(p.grad is not None for p in state.generators["xy"].parameters())
    assert all(p.grad is None for p in disc.trunk.parameters())
    assert all(not p.requires_grad for p in disc.trunk.parameters())
    # the generator-step freeze is temporary
    assert all(p.requires_grad for p in disc.trainable_parameters())


def test_cycle_step_reports_all_terms():
    state, cfg = make_state(MODE_CYCLE, TrainingConfig(mode=MODE_CYCLE, batch_size=2))
    sampler = TensorSampler(2)
    state, report = train_step_cycle(state, sampler.next(), sampler.next(), cfg)
    assert report.cycle_fwd > 0 and report.cycle_bwd > 0
    assert report.identity > 0 and report.adv_D > 0 and report.adv_G > 0
    assert report.lambda_id == 5.0 and report.lambda_cyc == 10.0
    report.validate()


def test_zero_cycle_weight_yields_zero_cycle_terms():
    cfg = TrainingConfig(mode=MODE_CYCLE, batch_size=2, lambda_cyc=0.0)
    state, _ = make_state(MODE_CYCLE, cfg)
    sampler = TensorSampler(3)
    _, report = train_step_cycle(state, sampler.next(), sampler.next(), cfg)
    assert report.cycle_fwd == 0.0 and report.cycle_bwd == 0.0
    assert report.total_G == pytest.approx(report.adv_G + report.identity, abs=1e-6)


def test_running_averages_follow_ema():
    state, cfg = make_state(MODE_SINGLE)
    sampler = TensorSampler(4)
    state, r1 = train_step_single(state, sampler.next(), sampler.next(), cfg)
    after_one = state.running["adv_D"]
    assert after_one == pytest.approx(r1.adv_D)
    state, r2 = train_step_single(state, sampler.next(), sampler.next(), cfg)
    assert state.running["adv_D"] == pytest.approx(0.98 * r1.adv_D + 0.02 * r2.adv_D)


# ------------------------------------------------------------- pretraining


def test_pretraining_runs_and_reports():
    gen = tiny_gen()
    before = parameter_checksum(gen)
    cfg = TrainingConfig(mode=MODE_SINGLE, batch_size=2, pretrain_steps=5, log_every=2)
    seen = []
    state = pretrain_generator(gen, TensorSampler(5), cfg, log_cb=seen.append)
    assert state.step == 5
    assert len(state.history) == 5
    assert all(np.isfinite(h["recon"]) for h in state.history)
    assert parameter_checksum(gen) != before
    assert [r.step for r in seen] == [2, 4]


def test_pretraining_requires_positive_steps():
    cfg = TrainingConfig(mode=MODE_SINGLE, pretrain_steps=0)
    with pytest.raises(ConfigError, match="pretrain"):
        pretrain_generator(tiny_gen(), TensorSampler(0), cfg)


# ------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_restores_behavior_and_step(tmp_path):
    state, cfg = make_state(MODE_SINGLE)
    sampler = TensorSampler(6)
    for _ in range(3):
        state, _ = train_step_single(state, sampler.next(), sampler.next(), cfg)
    path = save_checkpoint(state, tmp_path / "ck.pt", config_hash="h1")
    probe = TensorSampler(7).next()
    want = translate(state.generators["xy"], probe)

    fresh, _ = make_state(MODE_SINGLE, cfg, seed=9)
    assert not torch.equal(translate(fresh.generators["xy"], probe), want)
    fresh = load_checkpoint(path, fresh, expected_hash="h1")
    assert fresh.step == 3
    assert torch.equal(translate(fresh.generators["xy"], probe), want)
    # optimizer moments came along
    old_moments = state.optimizers["G"].state_dict()["state"]
    new_moments = fresh.optimizers["G"].state_dict()["state"]
    assert set(old_moments) == set(new_moments)
    k = next(iter(old_moments))
    assert torch.equal(old_moments[k]["exp_avg"], new_moments[k]["exp_avg"])


def test_checkpoint_hash_mismatch_refused_unless_overridden(tmp_path):
    state, cfg = make_state(MODE_SINGLE)
    path = save_checkpoint(state, tmp_path / "ck.pt", config_hash="old")
    fresh, _ = make_state(MODE_SINGLE, cfg, seed=1)
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(path, fresh, expected_hash="new")
    load_checkpoint(path, fresh, expected_hash="new", override=True)


def test_checkpoint_mode_and_names_must_match(tmp_path):
    state, cfg = make_state(MODE_SINGLE)
    path = save_checkpoint(state, tmp_path / "ck.pt")
    cycle_state, _ = make_state(MODE_CYCLE, TrainingConfig(mode=MODE_CYCLE, batch_size=2))
    with pytest.raises(CheckpointError, match="mode"):
        load_checkpoint(path, cycle_state)
    renamed = TrainState(step=0, mode=MODE_SINGLE,
                         generators={"ab": tiny_gen()},
                         discriminators={"y": tiny_disc()})
    with pytest.raises(CheckpointError, match="generators"):
        load_checkpoint(path, renamed)


def test_checkpoint_shape_mismatch_names_the_module(tmp_path):
    state, cfg = make_state(MODE_SINGLE, width=4)
    path = save_checkpoint(state, tmp_path / "ck.pt")
    wider, _ = make_state(MODE_SINGLE, cfg, width=8)
    with pytest.raises(ShapeError, match="generator 'xy'"):
        load_checkpoint(path, wider)


def test_unreadable_checkpoint(tmp_path):
    bad = tmp_path / "junk.pt"
    bad.write_bytes(b"not a checkpoint")
    state, _ = make_state(MODE_SINGLE)
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(bad, state)


# ------------------------------------------------------------- full loop


def test_run_training_writes_checkpoints_and_latest_pointer(tmp_path):
    cfg = TrainingConfig(mode=MODE_SINGLE, batch_size=2, adversarial_steps=5,
                         checkpoint_every=2, log_every=2)
    state, _ = make_state(MODE_SINGLE, cfg)
    seen = []
    state = run_training(state, TensorSampler(8), TensorSampler(9), cfg,
                         out_dir=tmp_path, log_cb=seen.append)
    assert state.step == 5
    assert checkpoint_path(tmp_path, 2).exists()
    assert checkpoint_path(tmp_path, 4).exists()
    assert checkpoint_path(tmp_path, 5).exists()  # final step checkpoint
    assert latest_checkpoint(tmp_path) == checkpoint_path(tmp_path, 5)
    assert [r.step for r in seen] == [2, 4]
    assert len(state.history) == 5


def test_run_training_resumes_from_checkpoint(tmp_path):
    cfg = TrainingConfig(mode=MODE_SINGLE, batch_size=2, adversarial_steps=4,
                         checkpoint_every=2)
    state, _ = make_state(MODE_SINGLE, cfg)
    run_training(state, TensorSampler(10), TensorSampler(11), cfg, out_dir=tmp_path)

    fresh, _ = make_state(MODE_SINGLE, cfg, seed=3)
    fresh = load_checkpoint(latest_checkpoint(tmp_path), fresh)
    assert fresh.step == 4
    longer = TrainingConfig(mode=MODE_SINGLE, batch_size=2, adversarial_steps=7,
                            checkpoint_every=2)
    fresh = run_training(fresh, TensorSampler(12), TensorSampler(13), longer,
                         out_dir=tmp_path)
    assert fresh.step == 7
    assert checkpoint_path(tmp_path, 6).exists()


def test_divergence_abort_names_term_and_keeps_last_checkpoint(tmp_path):
    cfg = TrainingConfig(mode=MODE_SINGLE, batch_size=2, adversarial_steps=10,
                         checkpoint_every=2)
    state, _ = make_state(MODE_SINGLE, cfg)
    bad_x = TensorSampler(14, nan_after=4)
    with pytest.raises(DivergenceError) as err:
        run_training(state, bad_x, TensorSampler(15), cfg, out_dir=tmp_path)
    assert err.value.last_checkpoint == checkpoint_path(tmp_path, 4)
    assert err.value.last_checkpoint.exists()


def test_equal_seed_runs_produce_identical_loss_logs():
    logs = []
    for _ in range(2):
        cfg = TrainingConfig(mode=MODE_CYCLE, batch_size=2, adversarial_steps=4,
                             checkpoint_every=0)
        state, _ = make_state(MODE_CYCLE, cfg, seed=0)
        state = run_training(state, TensorSampler(16), TensorSampler(17), cfg)
        logs.append(state.history)
    assert logs[0] == logs[1]  # bit-identical floats, not just approximately


def test_parameter_checksum_tracks_values():
    gen_a = tiny_gen(0)
    gen_b = tiny_gen(1)
    gen_b.load_state_dict(copy.deepcopy(gen_a.state_dict()))
    assert parameter_checksum(gen_a) == parameter_checksum(gen_b)
    with torch.no_grad():
        next(gen_b.parameters()).add_(1e-3)
    assert parameter_checksum(gen_a) != parameter_checksum(gen_b)
