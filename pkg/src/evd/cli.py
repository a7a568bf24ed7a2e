"""Command-line entry point: ``evd {train,sample,ablate,sweep,audit,check} --config PATH``."""
from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .gating import ConfigError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evd", description="Event-gated flow-matching experiments on synthetic latents.")
    sub = p.add_subparsers(dest="verb", required=True)
    helps = {
        "train": "train the run behind --variant and write checkpoints",
        "sample": "sample held-out scenes with --variant and write metrics",
        "ablate": "evaluate every configured variant on shared scenes and seeds",
        "sweep": "evaluate the sampler sensitivity grid on one checkpoint",
        "audit": "write one pseudo-target audit record per clip",
        "check": "run the invariant suite; nonzero exit on any failure",
    }
    for verb, text in helps.items():
        s = sub.add_parser(verb, help=text)
        s.add_argument("--config", required=True, help="JSON run config")
        s.add_argument("--seed", type=int, default=None, help="override the run seed")
        s.add_argument("--out", default=None, help="override the output directory")
        s.add_argument("--variant", default=None, choices=harness.VARIANTS, help="override the variant")
        if verb == "ablate":
            s.add_argument("--train-missing", action="store_true", help="train runs whose checkpoints are absent")
    return p


def _print_record(rec: dict) -> None:
    print(json.dumps(rec, sort_keys=True))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = harness.load_config(args.config, seed=args.seed, out=args.out, variant=args.variant, mode=args.verb)
    except (ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        if args.verb == "train":
            _print_record(harness.run_train(cfg, log=_progress(cfg)))
        elif args.verb == "sample":
            _print_record(harness.run_sample(cfg).as_dict())
        elif args.verb == "ablate":
            for rec in harness.run_ablation(cfg, train_missing=args.train_missing, log=_progress(cfg)):
                _print_record(rec.as_dict())
        elif args.verb == "sweep":
            for row in harness.run_sweep(cfg):
                _print_record(row)
        elif args.verb == "audit":
            for rec in harness.run_audit(cfg):
                _print_record(rec)
        else:
            results = harness.run_check(cfg)
            for r in results:
                print(r.line())
            return 0 if all(r.passed for r in results) else 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FloatingPointError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 4
    return 0


def _progress(cfg):
    every = max(1, cfg.train.steps // 20)

    def log(run, rec):
        if rec.step % every == 0 or rec.step == cfg.train.steps - 1:
            print(f"[{run}] step {rec.step:5d}  base {rec.losses.base:.4f}  total {rec.losses.total:.4f}", file=sys.stderr)

    return log


if __name__ == "__main__":
    sys.exit(main())
