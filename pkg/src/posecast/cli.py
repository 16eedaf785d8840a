"""Command-line entry point: synth | train | rollout | eval.

Exit codes: 0 ok, 2 input error (missing/invalid files, bad labels),
3 version or contract mismatch between artifacts, 4 numerical abort (NaN).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .critic import CriticConfig
from .data import Dataset, default_puppet_grammar, generate_puppet_dataset, load_grammar
from .errors import (ContractError, DataValidationError, LossUndefinedError,
                     PosecastError, ProjectionError, ShapeError, TrainingAbort,
                     TrainingError, VersionError, VocabularyError)
from .evalsuite import accuracy_curve_csv, evaluate_rollouts
from .forecaster import Forecaster
from .rollout import RESAMPLE_NOISE, ZERO_NOISE, rollout, rollout_record
from .training import TrainConfig, train

ROLLOUT_FORMAT_VERSION = 1


def _load_preset(name):
    path = resources.files("posecast.presets").joinpath(f"{name}.json")
    if not path.is_file():
        raise DataValidationError(f"unknown preset {name!r}")
    return json.loads(path.read_text(encoding="utf-8"))


def _deep_update(base, extra):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _resolve_config(args, flag_sections):
    """defaults < preset < --config file < command-line flags."""
    cfg = {"model": {}, "train": {}, "critic": {}, "rollout": {}}
    if getattr(args, "preset", None):
        _deep_update(cfg, _load_preset(args.preset))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataValidationError(f"config file not found: {path}")
        _deep_update(cfg, json.loads(path.read_text(encoding="utf-8")))
    for section, mapping in flag_sections.items():
        for flag, key in mapping.items():
            value = getattr(args, flag, None)
            if value is not None:
                cfg.setdefault(section, {})[key] = value
    return cfg


def _apply_data_root(args):
    if getattr(args, "data_root", None):
        os.environ["DATA_ROOT"] = args.data_root


def cmd_synth(args):
    _apply_data_root(args)
    if args.spec:
        grammar = load_grammar(args.spec)
    else:
        grammar = default_puppet_grammar(args.actions, args.objects)
    manifest = generate_puppet_dataset(
        grammar, num_sequences=args.sequences, seed=args.seed, out_dir=args.out,
        length_range=(args.min_length, args.max_length), noise_mm=args.noise_mm,
        db_size=args.db_size, occlusion_rate=args.occlusion_rate)
    print(manifest)
    return 0


def cmd_train(args):
    _apply_data_root(args)
    cfg = _resolve_config(args, {
        "train": {
            "seed": "seed", "epochs": "epochs", "batch_size": "batch_size",
            "accum_steps": "accum_steps", "lr": "lr",
            "lambda_action": "lambda_action", "lambda_pose2d": "lambda_pose2d",
            "lambda_adv3d": "lambda_adv3d", "projection": "projection",
            "lipschitz": "lipschitz", "n_critic": "n_critic",
            "patience": "patience", "checkpoint_every": "checkpoint_every",
        },
        "model": {
            "hidden_dim": "hidden_dim", "latent_dim": "latent_dim",
            "noise_dim": "noise_dim", "n_history": "n_history",
        },
    })
    if args.no_early_stop:
        cfg["train"]["early_stop"] = False
    manifest = cfg.get("data", {}).get("manifest", args.manifest)
    if not manifest:
        raise DataValidationError("no dataset manifest given (--manifest or config data.manifest)")
    dataset = Dataset(manifest)
    train_cfg = TrainConfig.from_dict(cfg["train"])
    critic_cfg = CriticConfig.from_dict(cfg["critic"]) if cfg.get("critic") else None
    result = train(dataset, train_cfg, model_overrides=cfg.get("model") or {},
                   critic_cfg=critic_cfg, out_dir=args.out)
    print(result.best_checkpoint)
    print(result.last_checkpoint)
    print(result.metrics_path)
    return 0


def _check_compatible(model, meta, dataset):
    layout = dataset.layout.to_dict()
    if meta.get("layout") and meta["layout"] != layout:
        raise VersionError("checkpoint and manifest disagree on the joint layout")
    if model.config.n_actions != dataset.n_actions:
        raise VersionError(
            f"checkpoint was trained with {model.config.n_actions} actions, "
            f"manifest declares {dataset.n_actions}")


def cmd_rollout(args):
    _apply_data_root(args)
    model, meta = Forecaster.from_checkpoint(args.checkpoint)
    dataset = Dataset(args.manifest)
    _check_compatible(model, meta, dataset)
    n = model.config.n_history
    noise = ZERO_NOISE if args.noise == "zero" else RESAMPLE_NOISE
    records = []
    skipped = 0
    ids = dataset.manifest.splits.get(args.split)
    if ids is None:
        raise DataValidationError(f"unknown split {args.split!r}")
    from .skeleton import HistoryStep

    for i, sid in enumerate(ids):
        steps = dataset.load_sequence(sid)
        if len(steps) < n:
            skipped += 1
            continue
        window = [HistoryStep(pose2d=s.pose2d, action=s.action, objects=s.objects)
                  for s in steps[:n]]
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, i]))
        result = rollout(model, window, dataset.camera(sid), steps=args.steps,
                         noise=noise, rng=rng, sample_actions=args.sample_actions,
                         temperature=args.temperature, projection=args.projection)
        records.append(rollout_record(sid, result, dataset.manifest.actions))
    doc = {
        "format_version": ROLLOUT_FORMAT_VERSION,
        "checkpoint": str(args.checkpoint),
        "dataset": dataset.manifest.name,
        "n_actions": dataset.n_actions,
        "split": args.split,
        "steps": args.steps,
        "skipped_sequences": skipped,
        "rollouts": records,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(out)
    return 0


def cmd_eval(args):
    _apply_data_root(args)
    doc = json.loads(Path(args.rollouts).read_text(encoding="utf-8"))
    if doc.get("format_version") != ROLLOUT_FORMAT_VERSION:
        raise VersionError(f"rollout file format_version {doc.get('format_version')}, "
                           f"expected {ROLLOUT_FORMAT_VERSION}")
    dataset = Dataset(args.manifest)
    if doc.get("n_actions") != dataset.n_actions:
        raise VersionError("rollout file and manifest disagree on the action vocabulary")
    split = args.split or doc.get("split", "test")
    n_history = args.n_history
    report = evaluate_rollouts(doc["rollouts"], dataset, split, n_history,
                               seed=args.seed, quality_pool=args.quality_pool)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    curve_path = Path(args.curve) if args.curve else out.with_suffix(".curve.csv")
    curve_path.write_text(accuracy_curve_csv(report["per_step_accuracy"]), encoding="utf-8")
    print(out)
    print(curve_path)
    return 0


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--data-root", help="base directory for dataset files (DATA_ROOT)")


def build_parser():
    parser = argparse.ArgumentParser(prog="posecast", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="generate a synthetic puppet dataset")
    synth.add_argument("--spec", help="grammar spec JSON (defaults to the built-in cycle grammar)")
    synth.add_argument("--out", required=True)
    synth.add_argument("--sequences", type=int, default=500)
    synth.add_argument("--actions", type=int, default=8)
    synth.add_argument("--objects", type=int, default=4)
    synth.add_argument("--min-length", type=int, default=8)
    synth.add_argument("--max-length", type=int, default=12)
    synth.add_argument("--noise-mm", type=float, default=20.0)
    synth.add_argument("--db-size", type=int, default=5000)
    synth.add_argument("--occlusion-rate", type=float, default=0.0)
    _add_common(synth)
    synth.set_defaults(func=cmd_synth)

    tr = subs.add_parser("train", help="train generator and critic")
    tr.add_argument("--manifest")
    tr.add_argument("--config", help="JSON config file (sections: model/train/critic/data)")
    tr.add_argument("--preset", help="bundled preset name (paper-cooking, paper-ikea, synth-default)")
    tr.add_argument("--out", default="runs/run")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--accum-steps", dest="accum_steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--lambda-action", dest="lambda_action", type=float)
    tr.add_argument("--lambda-pose2d", dest="lambda_pose2d", type=float)
    tr.add_argument("--lambda-adv3d", dest="lambda_adv3d", type=float)
    tr.add_argument("--projection", choices=["perspective", "affine"])
    tr.add_argument("--lipschitz", help="'gp' or 'clip:<limit>'")
    tr.add_argument("--n-critic", dest="n_critic", type=int)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    tr.add_argument("--no-early-stop", action="store_true")
    tr.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    tr.add_argument("--latent-dim", dest="latent_dim", type=int)
    tr.add_argument("--noise-dim", dest="noise_dim", type=int)
    tr.add_argument("--n-history", dest="n_history", type=int)
    _add_common(tr)
    tr.set_defaults(func=cmd_train, seed=None)

    ro = subs.add_parser("rollout", help="autoregressive forecasting for a split")
    ro.add_argument("--checkpoint", required=True)
    ro.add_argument("--manifest", required=True)
    ro.add_argument("--split", default="test")
    ro.add_argument("--steps", type=int, default=5)
    ro.add_argument("--out", required=True)
    ro.add_argument("--noise", choices=["zero", "resample"], default="resample")
    ro.add_argument("--sample-actions", action="store_true")
    ro.add_argument("--temperature", type=float, default=1.0)
    ro.add_argument("--projection", choices=["perspective", "affine"], default="perspective")
    _add_common(ro)
    ro.set_defaults(func=cmd_rollout)

    ev = subs.add_parser("eval", help="score rollouts against ground truth")
    ev.add_argument("--rollouts", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--split")
    ev.add_argument("--out", required=True)
    ev.add_argument("--curve", help="per-step accuracy CSV path")
    ev.add_argument("--n-history", dest="n_history", type=int, default=3)
    ev.add_argument("--quality-pool", dest="quality_pool", type=int, default=5000)
    _add_common(ev)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        if exc.last_checkpoint:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return 4
    except (VersionError, ContractError, ShapeError, LossUndefinedError,
            TrainingError, ProjectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataValidationError, VocabularyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
