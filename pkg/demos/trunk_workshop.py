"""The frozen perceptual trunk, start to finish.

Trains a small shape classifier, exports its conv stack as a reference
trunk, applies layer surgery (max pools become mean pools, rectifiers
become leaky) so gradients flow through every input pixel, and then proves
the freezing contract: a burst of adversarial training changes combiners,
heads, and generators while the trunk stays bit-identical.

Also writes runs/shapes-trunk.{npz,arch.json}, the files
configs/toy-shapes-cycle.toml expects. Takes a couple of CPU minutes.
Run from the repository root:

    python3 demos/trunk_workshop.py
"""

import sys
from pathlib import Path

import torch

from percgan.config import (DataSection, DiscriminatorSection, FrameworkConfig,
                            GeneratorSection, LossSection, TrainSection,
                            build_models, load_datasets)
from percgan.data import BatchSampler
from percgan.evalkit import EvalConfig, export_classifier_trunk, train_attribute_classifier
from percgan.refnet import ArchDescriptor, load_reference_weights, apply_surgery
from percgan.trainer import derived_seed, init_state, parameter_checksum, run_training


def step(title: str) -> None:
    print(f"\n=== {title} " + "=" * max(0, 60 - len(title)))


if __name__ == "__main__":
    if not Path("configs").exists():
        sys.exit("run this from the repository root (configs/ not found)")
    root = "runs/toydata-shapes32"

    step("1. two unaligned domains: squares vs. circles")
    cfg = FrameworkConfig(
        data=DataSection(kind="toy", task="shapes", count=2000, resolution=32,
                         root=root, seed=0),
        generator=GeneratorSection(width=8, downsamples=2, res_blocks=1),
        discriminator=DiscriminatorSection(trunk_mode="perceptual", blocks=3,
                                           surgery=True, patch_levels=[1],
                                           head_width=16),
        losses=LossSection(lambda_id=5.0, lambda_cyc=10.0),
        train=TrainSection(mode="cycle", batch_size=8, pretrain_steps=0,
                           adversarial_steps=120, seed=0, log_every=40,
                           checkpoint_every=0),
    )
    ds_x, ds_y = load_datasets(cfg)
    print(f"{len(ds_x)} squares under {root}/domainX, "
          f"{len(ds_y)} circles under domainY")

    step("2. train a classifier whose features tell the domains apart")
    clf, stats = train_attribute_classifier(ds_x, ds_y, EvalConfig(seed=1))
    print(f"hold-out accuracy {stats['holdout_accuracy']:.4f}")

    step("3. export its conv stack as a frozen reference trunk")
    container, arch_json = export_classifier_trunk(clf, "runs/shapes-trunk.npz")
    print(f"container:  {container}")
    print(f"descriptor: {arch_json}")
    desc = ArchDescriptor.from_json(arch_json)
    print("layers as exported:", ", ".join(s.kind for s in desc.layers))

    step("4. layer surgery: dense gradients for the generator")
    trunk = load_reference_weights(container, desc)
    modified = apply_surgery(trunk)
    print("layers after surgery:", ", ".join(s.kind for s in modified.desc.layers))
    print("conv weights are copied untouched; only pooling and rectifiers change,")
    print("so every input pixel keeps a gradient path to every feature.")

    step("5. the freezing contract under adversarial training")
    cfg.discriminator.arch = str(arch_json)
    cfg.discriminator.weights = str(container)
    generators, discriminators = build_models(cfg)
    tcfg = cfg.training_config()
    before = {
        "trunk (frozen)": parameter_checksum(discriminators["x"].trunk),
        "combiners": parameter_checksum(discriminators["x"].combiners),
        "main head": parameter_checksum(discriminators["x"].main_head),
        "generator xy": parameter_checksum(generators["xy"]),
    }
    state = init_state(tcfg, generators, discriminators)
    sx = BatchSampler([ds_x], tcfg.batch_size, seed=derived_seed(0, "data_x"))
    sy = BatchSampler([ds_y], tcfg.batch_size, seed=derived_seed(0, "data_y"))
    run_training(state, sx, sy, tcfg)
    print(f"{tcfg.adversarial_steps} adversarial steps later:")
    after = {
        "trunk (frozen)": parameter_checksum(state.discriminators["x"].trunk),
        "combiners": parameter_checksum(state.discriminators["x"].combiners),
        "main head": parameter_checksum(state.discriminators["x"].main_head),
        "generator xy": parameter_checksum(state.generators["xy"]),
    }
    for name in before:
        changed = "unchanged" if before[name] == after[name] else "updated"
        print(f"  {name:16s} {changed}")
    assert before["trunk (frozen)"] == after["trunk (frozen)"]
    assert all(before[k] != after[k] for k in before if k != "trunk (frozen)")
    print("\nthe trunk is a fixed feature space; everything around it learned.")
    print("next: percgan train --config configs/toy-shapes-cycle.toml --out runs/shapes-cycle")
