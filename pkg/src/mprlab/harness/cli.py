"""Command-line entry point: ``mprlab <subcommand> [--config FILE] [--set k=v ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from mprlab.errors import ConfigError, MPRError, NumericError
from mprlab.harness import experiments as ex
from mprlab.harness.config import load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with 2 on bad usage, the same code as a config error
    parser = argparse.ArgumentParser(prog="mprlab", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field, e.g. rl.n_episodes=50")
    common.add_argument("--output-dir", help="artifact directory (overrides the config)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-demos", parents=[common], help="human corpus and robot demos")
    p = sub.add_parser("train-predictor", parents=[common], help="fit the motion predictor")
    p.add_argument("--no-masks", action="store_true",
                   help="train the ablation model on every point (used by provider mpr_nomask)")
    p = sub.add_parser("train-bc", parents=[common], help="fit the frozen base policy")
    p.add_argument("--calibrate", default="",
                   help="comma-separated demo noise ladder; picks the first level with 30-60%% base success")
    p = sub.add_parser("label", parents=[common], help="write per-transition reward CSVs")
    p.add_argument("--provider", default=None)
    p.add_argument("--episodes", default=None, help="corpus file (defaults to the robot demos)")
    p = sub.add_parser("train-rl", parents=[common], help="residual SAC with one reward provider")
    p.add_argument("--provider", default=None)
    p.add_argument("--seed-index", type=int, default=0)
    p = sub.add_parser("evaluate", parents=[common], help="success rate of a checkpoint")
    p.add_argument("--checkpoint", default="final", help="'base', 'final' or a checkpoint path")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--provider", default=None)
    p.add_argument("--seed-index", type=int, default=0)
    p = sub.add_parser("compare", parents=[common], help="providers x seeds plus aggregation")
    p.add_argument("--providers", default=",".join(ex.PROVIDERS))
    p.add_argument("--seeds", type=int, default=3)
    p = sub.add_parser("ablate-nomask", parents=[common], help="masked vs unmasked MPR")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--no-train", action="store_true", help="reward statistics only")
    p = sub.add_parser("hesitation-study", parents=[common], help="value bias under pauses")
    p.add_argument("--pairs", type=int, default=100)
    return parser


def _workspace(cfg, args) -> ex.Workspace:
    root = args.output_dir or os.environ.get("MPRLAB_OUT") or cfg.output_dir
    cfg.output_dir = str(root)
    ws = ex.Workspace(root)
    cfg.write(ws.root / "config.toml")
    return ws


def run(args) -> dict:
    cfg = load_config(args.config, args.overrides)
    ws = _workspace(cfg, args)
    cmd = args.command
    if cmd == "gen-demos":
        return ex.gen_demos(cfg, ws)
    if cmd == "train-predictor":
        return ex.train_predictor(cfg, ws, use_masks=not args.no_masks)
    if cmd == "train-bc":
        if args.calibrate:
            ladder = [float(x) for x in args.calibrate.split(",") if x.strip()]
            return ex.calibrate_base(cfg, ws, ladder)
        return ex.train_bc(cfg, ws)
    if cmd == "label":
        return {"rewards": ex.label(cfg, ws, args.provider or cfg.reward.provider, args.episodes)}
    if cmd == "train-rl":
        return ex.train_rl(cfg, ws, args.provider or cfg.reward.provider, args.seed_index)
    if cmd == "evaluate":
        return ex.evaluate_checkpoint(cfg, ws, args.checkpoint, args.episodes or cfg.eval.episodes,
                                      args.provider or cfg.reward.provider, args.seed_index)
    if cmd == "compare":
        providers = [p.strip() for p in args.providers.split(",") if p.strip()]
        return {"reports": [r.to_dict() for r in ex.compare(cfg, ws, providers, args.seeds)]}
    if cmd == "ablate-nomask":
        return ex.ablate_nomask(cfg, ws, args.seeds, args.episodes, train=not args.no_train)
    if cmd == "hesitation-study":
        return ex.hesitation_study(cfg, ws, args.pairs)
    raise ConfigError(f"unknown command '{cmd}'")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, MPRError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
