"""Command-line front end.

Subcommands: track, train, eval, gradcheck, synth.  Config values come from
(in rising priority) built-in defaults, a JSON config file (--config flag,
or the DSTRACK_CONFIG environment variable when the flag is absent), and
individual flags.  Usage and config-validation problems exit 2; runtime
failures exit 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import nn
from .config import EngineConfig, validate_config
from .evaluate import evaluate
from .gradsuite import format_outcomes, run_suite, suite_passed
from .heuristics import build_heuristic_model
from .sequence_io import (
    load_sequence,
    read_results_jsonl,
    result_to_dict,
    save_sequence,
    write_loss_csv,
    write_results_jsonl,
)
from .synth import SCENARIOS, synth_sequence
from .tracker import run_sequence
from .training import LrSchedule, labeled_frames, train_toy
from .transformer import TrackingModel

CONFIG_ENV_VAR = "DSTRACK_CONFIG"


class UsageError(Exception):
    pass


def _config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of engine config overrides")
    p.add_argument("--alpha", type=float, help="appearance/geometry blend")
    p.add_argument("--tau-dup", type=float, dest="tau_dup",
                   help="duplicate suppression threshold")
    p.add_argument("--tau-age", type=int, dest="tau_age",
                   help="frames a track may go unmatched")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dstrack", description="Pose-tracking association engine.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="associate detections over a sequence")
    p.add_argument("sequence", help="input sequence JSON")
    p.add_argument("--weights", help="checkpoint; omitted = untrained baseline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSONL output path (default stdout)")
    _config_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train", help="toy-scale training on labeled sequences")
    p.add_argument("sequences", nargs="+", help="labeled sequence JSON files")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, help="override the toy learning rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.ckpt", help="checkpoint output path")
    p.add_argument("--curve", help="loss curve CSV output path")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score tracking results against labels")
    p.add_argument("results", help="JSONL from the track subcommand")
    p.add_argument("gt", help="labeled sequence JSON")
    p.add_argument("--out", help="report JSON path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference the whole model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5, help="instances per check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic labeled sequence")
    p.add_argument("--scenario", required=True, choices=SCENARIOS)
    p.add_argument("--frames", type=int, help="sequence length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--separation", type=float, default=6.0,
                   help="appearance cluster separation")
    p.add_argument("--gap", type=int, default=10, help="occlusion length")
    p.add_argument("--duplicate-prob", type=float, default=0.5, dest="duplicate_prob")
    p.add_argument("--crops", action="store_true",
                   help="emit image crops instead of appearance vectors, "
                        "routing the tracker through the backbone")
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(func=cmd_synth)
    return parser


def _load_config(args) -> EngineConfig:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    fields = {}
    if path:
        try:
            with open(path) as fh:
                fields = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}")
        unknown = set(fields) - {f.name for f in dataclasses.fields(EngineConfig)}
        if unknown:
            raise UsageError(f"unknown config fields {sorted(unknown)}")
        if "oks_kappas" in fields:
            fields["oks_kappas"] = tuple(fields["oks_kappas"])
    for flag in ("alpha", "tau_dup", "tau_age"):
        value = getattr(args, flag, None)
        if value is not None:
            fields[flag] = value
    try:
        cfg = EngineConfig(**fields)
        validate_config(cfg)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))
    return cfg


def _load_model(cfg: EngineConfig, weights: Optional[str], seed: int,
                with_backbone: bool = False) -> TrackingModel:
    if weights is None:
        model = build_heuristic_model(cfg, seed=seed)
        if with_backbone:
            from .spapde import init_backbone_params
            init_backbone_params(model.store, cfg, np.random.default_rng(seed))
        return model
    state = nn.load_checkpoint(weights)
    has_backbone = any(k.startswith("backbone.") for k in state)
    model = TrackingModel(cfg, seed=seed, with_backbone=has_backbone)
    model.store.load_state(state)
    return model


def cmd_track(args) -> int:
    cfg = _load_config(args)
    seq = load_sequence(args.sequence)
    frames = seq.detection_frames()
    crops_only = any(d.appearance is None for dets in frames for d in dets)
    model = _load_model(cfg, args.weights, args.seed, with_backbone=crops_only)
    rows = [(idx, res) for idx, res, _ in run_sequence(frames, model)]
    if args.out:
        write_results_jsonl(rows, args.out)
    else:
        for idx, res in rows:
            print(json.dumps(result_to_dict(idx, res), sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    seqs = [labeled_frames(load_sequence(p)) for p in args.sequences]
    schedule = LrSchedule(lr=args.lr) if args.lr is not None else None
    model, curve = train_toy(seqs, cfg, seed=args.seed, n_iters=args.iters,
                             schedule=schedule)
    nn.save_checkpoint(args.out, model.store.state_dict())
    if args.curve:
        write_loss_csv(curve, args.curve)
    last = curve[-1].total if curve else float("nan")
    print(f"trained {args.iters} iterations, final loss {last:.6f}, "
          f"checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    results = read_results_jsonl(args.results)
    gt = load_sequence(args.gt)
    report = evaluate(results, gt)
    text = json.dumps(report.to_dict(), sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_gradcheck(args) -> int:
    outcomes = run_suite(seeds=args.seeds, base_seed=args.seed)
    for line in format_outcomes(outcomes):
        print(line)
    if suite_passed(outcomes):
        print("gradient suite passed")
        return 0
    print("gradient suite FAILED", file=sys.stderr)
    return 1


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    seq = synth_sequence(args.scenario, n_frames=args.frames, seed=args.seed,
                         cfg=cfg, separation=args.separation, gap=args.gap,
                         duplicate_prob=args.duplicate_prob, crops=args.crops)
    save_sequence(seq, args.out)
    print(f"wrote {args.out}: {len(seq.frames)} frames")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
