"""Command-line surface: prepare-refnet, train, translate, evaluate.

Exit codes: 0 success, 2 configuration problems, 3 runtime/IO problems,
4 numeric divergence during training. The PERCGAN_DEVICE environment
variable selects the default compute device (cpu unless set).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import config as config_mod
from .data import BatchSampler, load_domain
from .errors import (
    ConfigError,
    DivergenceError,
    NumericError,
    PercganError,
)
from .evalkit import (
    attribute_logloss,
    c2st,
    export_metrics,
    load_attribute_classifier,
    save_montage,
)
from .generator import translate
from .refnet import (
    ArchDescriptor,
    apply_surgery,
    IMAGENET_MEAN,
    IMAGENET_SCALE,
    load_reference_weights,
    ReferenceNet,
    save_reference_weights,
    surgery_replacements,
    torchvision_vgg19_arrays,
    toy_descriptor,
    vgg19_descriptor,
)
from .trainer import (
    derived_seed,
    init_state,
    latest_checkpoint,
    load_checkpoint,
    pretrain_generator,
    run_training,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_DIVERGENCE = 4

MANIFEST_NAME = "run_manifest.json"


def default_device() -> torch.device:
    return torch.device(os.environ.get("PERCGAN_DEVICE", "cpu"))


@dataclass
class RunManifest:
    """Run identity written to disk before any long computation starts."""

    command: str
    config_hash: str
    resolved_config: dict
    output_dir: str
    started_at: float = field(default_factory=time.time)

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({
            "command": self.command,
            "config_hash": self.config_hash,
            "resolved_config": self.resolved_config,
            "output_dir": self.output_dir,
            "started_at": self.started_at,
        }, indent=2, sort_keys=True))
        return path


class _DeviceSampler:
    def __init__(self, sampler, device):
        self.sampler = sampler
        self.device = device

    def next(self):
        return self.sampler.next().to(self.device)


def _ensure_fresh_dir(path: Path, force: bool, what: str) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{what} {path} already exists and is not empty; pass --force")
    path.mkdir(parents=True, exist_ok=True)


def _arch_from_arg(arch: str) -> ArchDescriptor:
    if arch == "vgg19":
        return vgg19_descriptor()
    if arch == "toy":
        return toy_descriptor()
    return ArchDescriptor.from_json(arch)


def cmd_prepare_refnet(args) -> int:
    desc = _arch_from_arg(args.arch)
    weights = Path(args.weights)
    if weights.suffix == ".npz":
        net = load_reference_weights(weights, desc)
    else:
        payload = torch.load(weights, map_location="cpu", weights_only=False)
        state = payload.get("state_dict", payload) if isinstance(payload, dict) else payload
        if not isinstance(state, dict):
            raise ConfigError(f"{weights} does not contain a state dict")
        if any(k.startswith("features.") for k in state):
            if args.arch != "vgg19":
                raise ConfigError(
                    "feature-indexed state dicts are only supported for --arch vgg19"
                )
            arrays = torchvision_vgg19_arrays(state)
            net = ReferenceNet(desc, mean=IMAGENET_MEAN, scale=IMAGENET_SCALE)
            with torch.no_grad():
                for name, conv in net.conv_modules():
                    conv.weight.copy_(torch.from_numpy(arrays[f"{name}.weight"]))
                    conv.bias.copy_(torch.from_numpy(arrays[f"{name}.bias"]))
        else:
            raise ConfigError(
                f"{weights}: unrecognized key scheme; expected a .npz container "
                f"or a torchvision-style state dict"
            )

    replacements = None
    if args.surgery == "on":
        raw_desc = net.desc
        net = apply_surgery(net)
        replacements = surgery_replacements(raw_desc)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    container = save_reference_weights(net, out, replacements=replacements)
    arch_out = out.with_name(out.stem + ".arch.json")
    net.desc.to_json(arch_out)
    print(f"wrote {container} and {arch_out} (surgery={args.surgery})")
    return EXIT_OK


def _build_run(cfg: config_mod.FrameworkConfig, device: torch.device):
    """Datasets, models, and the adversarial-phase samplers for one run."""
    ds_x, ds_y = config_mod.load_datasets(cfg)
    generators, discriminators = config_mod.build_models(cfg)
    for g in generators.values():
        g.to(device)
    for d in discriminators.values():
        d.to(device)
    tcfg = cfg.training_config()
    sampler_x = _DeviceSampler(
        BatchSampler([ds_x], tcfg.batch_size, seed=derived_seed(tcfg.seed, "data_x")), device)
    sampler_y = _DeviceSampler(
        BatchSampler([ds_y], tcfg.batch_size, seed=derived_seed(tcfg.seed, "data_y")), device)
    return ds_x, ds_y, generators, discriminators, tcfg, sampler_x, sampler_y


def _log_writer(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = path.open("a")

    def write(report):
        handle.write(json.dumps(report.as_dict(), sort_keys=True) + "\n")
        handle.flush()

    write.close = handle.close
    return write


def cmd_train(args) -> int:
    cfg = config_mod.load_config(args.config, overrides=args.set or ())
    device = default_device()
    out_dir = Path(args.out or cfg.train.out_dir)
    if args.resume is None:
        _ensure_fresh_dir(out_dir, args.force, "output directory")
    else:
        out_dir.mkdir(parents=True, exist_ok=True)

    manifest = RunManifest(
        command="train",
        config_hash=cfg.config_hash(),
        resolved_config=cfg.resolved(),
        output_dir=str(out_dir),
    )
    manifest.write(out_dir)

    ds_x, ds_y, generators, discriminators, tcfg, sampler_x, sampler_y = _build_run(cfg, device)
    snapshot = cfg.resolved()

    resume_from = None
    if args.resume is not None:
        resume_from = latest_checkpoint(out_dir) if args.resume == "latest" else Path(args.resume)
        if resume_from is None or not resume_from.exists():
            raise ConfigError(f"cannot resume: checkpoint '{args.resume}' not found")

    if resume_from is None and tcfg.pretrain_steps > 0:
        pre_log = _log_writer(out_dir / "pretrain.jsonl")
        try:
            for name, gen in sorted(generators.items()):
                sampler = _DeviceSampler(BatchSampler(
                    [ds_x, ds_y], tcfg.batch_size,
                    seed=derived_seed(tcfg.seed, f"pretrain_{name}"),
                ), device)
                pre_state = pretrain_generator(gen, sampler, tcfg, log_cb=pre_log)
                print(f"pretrained generator {name}: {pre_state.step} steps, "
                      f"running recon {pre_state.running.get('recon', 0.0):.4f}")
        finally:
            pre_log.close()

    state = init_state(tcfg, generators, discriminators)
    if resume_from is not None:
        load_checkpoint(resume_from, state, expected_hash=cfg.config_hash(),
                        override=args.override_config)
        print(f"resumed from {resume_from} at step {state.step}")

    loss_log = _log_writer(out_dir / "losses.jsonl")
    try:
        state = run_training(
            state, sampler_x, sampler_y, tcfg,
            out_dir=out_dir, config_hash=cfg.config_hash(),
            config_snapshot=snapshot, log_cb=loss_log,
        )
    finally:
        loss_log.close()
    final = latest_checkpoint(out_dir)
    print(f"training complete at step {state.step}; latest checkpoint: {final}")
    return EXIT_OK


def _load_run_from_checkpoint(path: Path, device: torch.device, overrides=()):
    """Rebuild models from a checkpoint's stored config and load the weights."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise PercganError(f"cannot read checkpoint {path}: {e}") from e
    snapshot = payload.get("config") or {}
    if not snapshot:
        raise PercganError(f"checkpoint {path} carries no config snapshot")
    for text in overrides:
        section, key, value = config_mod.parse_override(text)
        snapshot.setdefault(section, {})[key] = value
    cfg = config_mod.from_resolved(snapshot)
    config_mod.validate_config(cfg)
    generators, discriminators = config_mod.build_models(cfg)
    tcfg = cfg.training_config()
    state = init_state(tcfg, generators, discriminators)
    load_checkpoint(path, state, expected_hash=None)
    for g in state.generators.values():
        g.to(device)
    for d in state.discriminators.values():
        d.to(device)
    return cfg, state


def cmd_translate(args) -> int:
    device = default_device()
    cfg, state = _load_run_from_checkpoint(Path(args.checkpoint), device)
    if args.direction not in state.generators:
        raise ConfigError(
            f"checkpoint has no '{args.direction}' generator "
            f"(mode '{state.mode}' provides {sorted(state.generators)})"
        )
    gen = state.generators[args.direction]

    in_dir = Path(args.input)
    out_dir = Path(args.output)
    _ensure_fresh_dir(out_dir, args.force, "output directory")
    spec = cfg.preprocess_spec()
    ds = load_domain(in_dir, spec, label="input")

    from PIL import Image
    import numpy as np

    for i, src_path in enumerate(ds.files):
        tensor = ds.image(i).unsqueeze(0).to(device)
        out = translate(gen, tensor)[0].cpu()
        arr = ((out.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
        img = Image.fromarray(arr.permute(1, 2, 0).numpy(), "RGB")
        img.save(out_dir / src_path.name)
    print(f"translated {len(ds.files)} images from {in_dir} to {out_dir}")
    return EXIT_OK


def _translate_set(gen, ds, device, batch: int = 32) -> torch.Tensor:
    outs = []
    for lo in range(0, len(ds), batch):
        chunk = torch.stack([ds.image(i) for i in range(lo, min(lo + batch, len(ds)))])
        outs.append(translate(gen, chunk.to(device)).cpu())
    return torch.cat(outs)


def cmd_evaluate(args) -> int:
    device = default_device()
    cfg, state = _load_run_from_checkpoint(
        Path(args.checkpoint), device, overrides=args.set or ())
    if args.direction not in state.generators:
        raise ConfigError(
            f"checkpoint has no '{args.direction}' generator "
            f"(mode '{state.mode}' provides {sorted(state.generators)})"
        )
    gen = state.generators[args.direction]
    spec = cfg.preprocess_spec()
    real_ds = load_domain(Path(args.real), spec, label="real")
    source_ds = load_domain(Path(args.source), spec, label="source")

    out_path = Path(args.out)
    if out_path.exists() and not args.force:
        raise ConfigError(f"metrics file {out_path} already exists; pass --force")
    out_path.parent.mkdir(parents=True, exist_ok=True)

    metrics = [m.strip() for part in args.metric for m in part.split(",") if m.strip()]
    if not metrics:
        raise ConfigError("no metric requested")
    for m in metrics:
        if m not in ("c2st", "attr"):
            raise ConfigError(f"unknown metric '{m}' (expected c2st and/or attr)")
    clf = None
    if "attr" in metrics:
        if not args.attr_classifier:
            raise ConfigError(
                "the attr metric needs --attr-classifier pointing to a saved "
                "attribute classifier; train one with "
                "percgan.evalkit.train_attribute_classifier and "
                "save_attribute_classifier"
            )
        clf = load_attribute_classifier(Path(args.attr_classifier)).to(device)

    translated = _translate_set(gen, source_ds, device)
    real = torch.stack([real_ds.image(i) for i in range(len(real_ds))])

    records = []
    ecfg = cfg.eval_config()
    if "c2st" in metrics:
        result = c2st(real, translated, ecfg)
        records.append(result.record("c2st_translated_vs_real"))
        print(f"c2st log-loss {result.log_loss:.4f} accuracy {result.accuracy:.3f}")
    if "attr" in metrics:
        score = attribute_logloss(clf, translated.to(device), args.target)
        records.append(score.record("attr_logloss", config_hash=ecfg.config_hash()))
        print(f"attribute log-loss {score.mean_nll:.4f} over {score.count} images")

    export_metrics(records, out_path)
    if args.montage:
        n = min(8, len(source_ds))
        pairs = [(source_ds.image(i), translated[i]) for i in range(n)]
        save_montage(pairs, Path(args.montage))
    print(f"wrote {len(records)} metric records to {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="percgan",
        description="Unaligned image translation with frozen perceptual trunks "
                    "inside the discriminator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-refnet", help="convert/surgically modify a trunk container")
    p.add_argument("--weights", required=True, help=".npz container or torch state dict")
    p.add_argument("--arch", required=True, help="vgg19, toy, or a descriptor JSON path")
    p.add_argument("--surgery", choices=("on", "off"), required=True)
    p.add_argument("--out", required=True, help="output .npz container path")
    p.set_defaults(func=cmd_prepare_refnet)

    p = sub.add_parser("train", help="pretrain and adversarially train per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None,
                   help="checkpoint path, or 'latest' for the output dir's pointer")
    p.add_argument("--out", default=None, help="override train.out_dir")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--force", action="store_true")
    p.add_argument("--override-config", action="store_true",
                   help="resume even if the config hash changed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="run a checkpoint's generator over a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--direction", choices=("xy", "yx"), default="xy")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="translate a source dir and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--real", required=True, help="directory of real target-domain images")
    p.add_argument("--source", required=True, help="directory of source-domain images")
    p.add_argument("--metric", action="append", required=True,
                   help="c2st, attr, or a comma-separated list")
    p.add_argument("--out", required=True, help="metrics file to write")
    p.add_argument("--direction", choices=("xy", "yx"), default="xy")
    p.add_argument("--attr-classifier", default=None,
                   help="saved attribute classifier for the attr metric")
    p.add_argument("--target", type=int, default=1,
                   help="attribute class id the translation should reach")
    p.add_argument("--montage", default=None, help="optional montage image path")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (PercganError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
