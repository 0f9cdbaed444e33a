"""Command-line entry point: synthetic data generation, training stages,
single-pair registration, and stack evaluation as reproducible runs.

Every command resolves its configuration (INI file plus flag overrides),
executes, and writes a ``run_manifest.json`` into its output directory with
the resolved values, seeds, an input content hash, and timestamps. Exit
codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import core, data, evaluate, models, train
from .core import CoreError, PairedSample
from .data import AugmentationConfig, SyntheticConfig
from .losses import LossWeights
from .train import TrainConfig, TrainingDiverged

_SYNTH_CASTS = {"num_slices": int, "height": int, "width": int,
                "warp_magnitude": float, "warp_smoothness": float,
                "contrast_mode": str, "artifact_level": float, "seed": int,
                "num_landmarks": int}
_TRAIN_CASTS = {"stage": str, "epochs": int, "batch_size": int,
                "learning_rate": float, "patches_per_layer": int, "seed": int,
                "checkpoint_every": int}
_WEIGHT_CASTS = {"lambda_geo": float, "lambda_r": float, "tau": float,
                 "lambda_gan": float}
_AUG_CASTS = {"max_rotation": float, "max_scale_dev": float, "max_shift": float,
              "nonlinear_sigma": float}


def _read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.is_file():
            raise CoreError(f"config file not found: {cfg_path}")
        parser.read(cfg_path)
    return parser


def _coerce_section(parser: configparser.ConfigParser, section: str,
                    casts: dict) -> dict:
    if not parser.has_section(section):
        return {}
    out = {}
    for key, raw in parser.items(section):
        if key not in casts:
            raise CoreError(f"config [{section}]: unknown key '{key}'")
        try:
            out[key] = casts[key](raw)
        except ValueError:
            raise CoreError(f"config [{section}] {key}: cannot parse '{raw}'")
    return out


def _hash_inputs(paths) -> str:
    digest = hashlib.sha256()
    for entry in sorted(str(p) for p in paths if p is not None):
        path = Path(entry)
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
        elif path.is_dir():
            for f in sorted(path.rglob("*")):
                # Run manifests record provenance (with wall-clock stamps),
                # not content; hashing them would make the input hash of a
                # generated directory depend on when it was generated.
                if f.is_file() and f.name != "run_manifest.json":
                    digest.update(str(f.relative_to(path)).encode())
                    digest.update(f.read_bytes())
    return digest.hexdigest()[:16]


def _write_run_manifest(out_dir, command: str, config_path, resolved: dict,
                        seed, inputs, started: str) -> None:
    out = Path(out_dir)
    outputs = sorted(p.name for p in out.iterdir()
                     if p.name != "run_manifest.json")
    manifest = {"command": command,
                "config": None if config_path is None else str(config_path),
                "resolved_config": resolved,
                "seeds": {"seed": seed},
                "input_hash": _hash_inputs(inputs),
                "started": started,
                "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
                "outputs": outputs}
    (out / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_synth_data(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    parser = _read_config(args.config)
    kwargs = _coerce_section(parser, "synth", _SYNTH_CASTS)
    if args.seed is not None:
        kwargs["seed"] = args.seed
    cfg = SyntheticConfig(**kwargs)
    samples = data.generate_synthetic_stack(cfg)
    data.save_stack(samples, args.out, manifest_entries=asdict(cfg))
    _write_run_manifest(args.out, "synth-data", args.config, asdict(cfg),
                        cfg.seed, [args.config], started)
    return 0


def _train_configs(args) -> tuple[TrainConfig, AugmentationConfig | None]:
    parser = _read_config(args.config)
    kwargs = _coerce_section(parser, "train", _TRAIN_CASTS)
    kwargs["stage"] = args.stage
    if args.seed is not None:
        kwargs["seed"] = args.seed
    weight_kwargs = _coerce_section(parser, "weights", _WEIGHT_CASTS)
    if weight_kwargs:
        kwargs["weights"] = LossWeights(**weight_kwargs)
    aug_kwargs = _coerce_section(parser, "augment", _AUG_CASTS)
    augment = AugmentationConfig(**aug_kwargs) if aug_kwargs else None
    return TrainConfig(**kwargs), augment


def cmd_train(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    cfg, augment = _train_configs(args)
    stack = data.load_stack(args.data)
    train.run_stage(stack, cfg, args.out, checkpoint=args.reg_checkpoint,
                    resume=args.resume, augment=augment)
    _write_run_manifest(
        args.out, f"train {cfg.stage}", args.config, train.config_to_dict(cfg),
        cfg.seed, [args.config, args.data, args.reg_checkpoint, args.resume],
        started)
    return 0


def cmd_register(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    reg_payload = train.load_checkpoint(args.reg_checkpoint)
    reg = models.build_registration_net(reg_payload)
    gen = None
    if args.gen_checkpoint is not None:
        gen, _ = models.build_generator(train.load_checkpoint(args.gen_checkpoint))
    elif reg_payload.get("kind") == "sbr":
        gen, _ = models.build_generator(reg_payload)
    sample = PairedSample(source=core.load_image(args.source).float(),
                          target=core.load_image(args.target).float())
    translated, phi, warped = evaluate.register_pair(gen, reg, sample)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    core.save_image(out / "S_T.png", translated)
    core.save_image(out / "warped_source.png", warped)
    core.save_field(out / "field.sbrf", phi)
    _write_run_manifest(
        args.out, "register", None, {"translated": gen is not None},
        args.seed, [args.reg_checkpoint, args.gen_checkpoint, args.source,
                    args.target], started)
    return 0


def cmd_evaluate(args) -> int:
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    stack = data.load_stack(args.data)
    evaluate.evaluate_stack(stack, args.checkpoint, args.out)
    _write_run_manifest(args.out, "evaluate", None, {},
                        args.seed, [args.data, args.checkpoint], started)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sbr",
        description="Inter-modality registration by translation trained "
                    "through a frozen registration network.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth-data",
                             help="generate a synthetic paired stack")
    p_synth.add_argument("--config", default=None)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth_data)

    p_train = sub.add_parser("train", help="run one training stage")
    p_train.add_argument("stage", choices=train.STAGES)
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--reg-checkpoint", default=None,
                         help="input checkpoint (stage-reg for sbr/sbr_n/"
                              "sbr_g, a finished SbR checkpoint for sbr_r)")
    p_train.add_argument("--resume", default=None,
                         help="checkpoint of the same run to continue from")
    p_train.set_defaults(func=cmd_train)

    p_reg = sub.add_parser("register", help="register one image pair")
    p_reg.add_argument("--reg-checkpoint", required=True)
    p_reg.add_argument("--gen-checkpoint", default=None,
                       help="translation checkpoint; defaults to the one "
                            "bundled with --reg-checkpoint when present")
    p_reg.add_argument("--source", required=True)
    p_reg.add_argument("--target", required=True)
    p_reg.add_argument("--out", required=True)
    p_reg.add_argument("--seed", type=int, default=None)
    p_reg.set_defaults(func=cmd_register)

    p_eval = sub.add_parser("evaluate", help="metric report for a stack")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (CoreError, OSError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
