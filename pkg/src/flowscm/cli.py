"""Command line interface: gen-data, train, eval, intervene.

Exit codes: 0 on success, 2 for configuration or input errors, 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .intervene import InterventionSpec, apply_intervention
from .metrics import evaluate_model, export_latents
from .numerics import Tensor, no_grad
from .synthdata import PRESETS, DatasetError, generate, preset_scm, read_dataset, write_dataset
from .trainer import CheckpointError, load_checkpoint, restore_training_state, train

logger = logging.getLogger("flowscm")


DATA_CONFIG_KEYS = ("preset", "n", "seed", "skip", "out", "obs_dim", "noise_sigma")


def _load_data_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON in {path}: {err}") from None
    unknown = set(raw) - set(DATA_CONFIG_KEYS)
    if unknown:
        raise ConfigError(
            f"unknown dataset config keys {sorted(unknown)}; known keys: {list(DATA_CONFIG_KEYS)}"
        )
    return raw


def _cmd_gen_data(args) -> int:
    settings = {
        "preset": "filter_lite", "n": None, "seed": 0, "skip": 0, "out": None,
        "obs_dim": None, "noise_sigma": None,
    }
    if args.config is not None:
        settings.update(_load_data_config(args.config))
    for key in DATA_CONFIG_KEYS:
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    if settings["n"] is None:
        raise ConfigError('record count required: pass --n or put "n" in the config')
    if settings["out"] is None:
        raise ConfigError('output path required: pass --out or put "out" in the config')
    try:
        n, seed, skip = (int(settings[k]) for k in ("n", "seed", "skip"))
    except (TypeError, ValueError):
        raise ConfigError(
            f"n, seed, skip must be integers, got {settings['n']!r}, "
            f"{settings['seed']!r}, {settings['skip']!r}"
        ) from None
    spec = preset_scm(
        settings["preset"], observation_dim=settings["obs_dim"], noise_sigma=settings["noise_sigma"]
    )
    x, u = generate(spec, n, seed, skip=skip)
    write_dataset(settings["out"], x, u, spec, seed)
    logger.info(
        "wrote %d records to %s (preset %s, seed %d, rows %d..%d)",
        x.shape[0], settings["out"], settings["preset"], seed, skip, skip + n,
    )
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config)
    if args.out is not None:
        config.out_dir = args.out
    model, history = train(config, resume_from=args.resume)
    logger.info("final total loss %.4f; checkpoints in %s", history[-1]["total"], config.out_dir)
    return 0


def _cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model, _, _ = restore_training_state(ck)
    x, u, manifest = read_dataset(args.data)
    report = evaluate_model(model, x, u, manifest["factors"])
    report.to_csv(args.out)
    logger.info(
        "matched means: mic %.4f tic %.4f wd %.4f r2 %.4f -> %s",
        report.mean_mic, report.mean_tic, report.mean_wd, report.mean_r2, args.out,
    )
    if args.latents:
        z_blocks = model.posterior_mean_np(x)
        export_latents(args.latents, u, z_blocks, model.readouts_np(z_blocks))
        logger.info("wrote latents to %s", args.latents)
    return 0


def _cmd_intervene(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model, _, _ = restore_training_state(ck)
    x, _, _ = read_dataset(args.data)
    if args.count is not None:
        if args.count < 1:
            raise ConfigError(f"--count must be >= 1, got {args.count}")
        x = x[: args.count]
    names = model.graph.names
    if args.concept not in names:
        raise ConfigError(f"unknown concept {args.concept!r}; model has {names}")
    target = names.index(args.concept)
    z_before = model.posterior_mean_np(x)
    before = model.readouts_np(z_before)
    with no_grad():
        z_tensors = [Tensor(b) for b in z_before]
        z_tilde = apply_intervention(
            z_tensors, InterventionSpec(target, args.tau), model.tracker, model.funcs, model.graph
        )
    z_after = [t.data for t in z_tilde]
    after = model.readouts_np(z_after)
    shift = np.abs(after - before).mean(axis=0)
    payload = {
        "target": args.concept,
        "tau": float(args.tau),
        "descendants": [names[j] for j in model.graph.descendants(target)],
        "readout_shift": {name: float(shift[j]) for j, name in enumerate(names)},
        "block_bitwise_unchanged": {
            name: bool(np.array_equal(z_after[j], z_before[j])) for j, name in enumerate(names)
        },
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
        logger.info("wrote intervention report to %s", args.out)
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowscm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a synthetic dataset with known ground truth")
    p.add_argument("--config", default=None, help="JSON with any of " + ", ".join(DATA_CONFIG_KEYS))
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--n", type=int, default=None, help="number of records")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--skip", type=int, default=None, help="skip this many leading rows (held-out split)")
    p.add_argument("--out", default=None, help="output .jsonl path")
    p.add_argument("--obs-dim", dest="obs_dim", type=int, default=None, help="override observation width")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None, help="override observation noise")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's output directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--latents", default=None, help="optional latent export JSONL path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("intervene", help="shift one concept and report readout changes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--concept", required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--count", type=int, default=None, help="intervene on the first N records only")
    p.add_argument("--out", default=None, help="report JSON path (default: stdout)")
    p.set_defaults(func=_cmd_intervene)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", datefmt="%H:%M:%S")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RuntimeError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
