"""Command-line interface.

Exit codes: 0 success, 2 configuration or schema problem (message names the
offending field), 3 numeric divergence (message names the phase and round).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import checkpoint, pipeline
from .config import ConfigError, load_config, with_updates

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_common(p: argparse.ArgumentParser, needs_config=True):
    if needs_config:
        p.add_argument("--config", required=True, help="path to a JSON experiment config")
    p.add_argument("--out", default=None, help="output directory (default: config's output_dir)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes for sweep/ablate values")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vflunlearn",
        description="Split vertical-federated-learning simulator with "
                    "client-level unlearning by representation misdirection.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="pretrain with a backdoor, unlearn, retrain the "
                                   "gold reference, evaluate everything")
    _add_common(p)

    p = sub.add_parser("sweep", help="sensitivity sweep over the anchor scale c "
                                     "or the retention weight alpha")
    _add_common(p)
    p.add_argument("--param", required=True, choices=("c", "alpha"))
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 0.5,1,2,4,8")

    p = sub.add_parser("ablate", help="compare coordinated, no_gcm and rand_proj "
                                      "update rules from one pretrained model")
    _add_common(p)

    p = sub.add_parser("retrain", help="train and evaluate only the gold reference "
                                       "(from scratch, without the forgetting party)")
    _add_common(p)

    p = sub.add_parser("eval", help="re-evaluate a saved checkpoint under its config")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="path to a model .npz")

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata as JSON")
    p.add_argument("path", help="path to a model .npz")
    return ap


def _load(args) -> "pipeline.ExperimentConfig":
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_updates(cfg, seed=args.seed)
    if args.no_figures:
        cfg = with_updates(cfg, evaluation={"figures": False})
    return cfg


def _print_records(records) -> None:
    for rec in records:
        extras = []
        if rec.mia_auc is not None:
            extras.append(f"mia_auc={rec.mia_auc:.3f}")
        if rec.kl_to_gold is not None:
            extras.append(f"kl_to_gold={rec.kl_to_gold:.4f}")
        print(f"  {rec.variant:<16} clean={rec.clean_acc:6.2f}%  "
              f"backdoor={rec.backdoor_success:6.2f}%  " + "  ".join(extras))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            result = pipeline.run_experiment(_load(args), args.out, args.threads)
            print(f"run complete: {result.out_dir}  (config {result.config_hash[:12]})")
            _print_records(result.records)
            ratio = result.timings["unlearn"] / result.timings["retrain"] \
                if result.timings.get("retrain") else float("nan")
            print(f"  unlearn/retrain wall-clock ratio: {ratio:.3f}")
            print(f"  summary: {result.summary_path}")
        elif args.command == "sweep":
            try:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                raise ConfigError("values", f"could not parse {args.values!r}")
            path, rows = pipeline.run_sweep(_load(args), args.param, values,
                                            args.out, args.threads)
            print(f"sweep complete: {path}")
            for row in rows:
                print(f"  {args.param}={row['value']:<8g} "
                      f"clean={row['clean_acc']:6.2f}%  "
                      f"backdoor={row['backdoor_success']:6.2f}%")
        elif args.command == "ablate":
            path, rows = pipeline.run_ablation(_load(args), args.out, args.threads)
            print(f"ablation complete: {path}")
            for row in rows:
                print(f"  {row['mode']:<12} clean={row['clean_acc']:6.2f}%  "
                      f"backdoor={row['backdoor_success']:6.2f}%")
        elif args.command == "retrain":
            result = pipeline.run_retrain(_load(args), args.out)
            print(f"retrain complete: {result.out_dir}")
            _print_records(result.records)
        elif args.command == "eval":
            rec = pipeline.run_eval(_load(args), args.checkpoint, args.out)
            print(f"evaluated checkpoint {args.checkpoint}")
            _print_records([rec])
        elif args.command == "inspect-checkpoint":
            print(json.dumps(checkpoint.inspect(args.path), indent=2, sort_keys=True))
    except ConfigError as err:
        print(f"config error at {err.path}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.PhaseFailure as err:
        print(f"numeric divergence in {err.phase} (round {err.round_no}); "
              f"lower the learning rate or shrink the batch size", file=sys.stderr)
        return EXIT_NUMERIC
    except checkpoint.CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
