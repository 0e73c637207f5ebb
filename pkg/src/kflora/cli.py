"""Command-line entry points.

Subcommands: train (one run), compare (multi-config repeated runs),
sweep-p0 (variance-init grid), sweep-beta (forgetting-factor scan) and
gen-data (build the bundled digit corpus). Exit codes are a stable
contract: 0 success, 1 error, 2 the run diverged.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import config as cfgmod
from . import gen_data, runner
from .config import ConfigError


def _add_common(p, multi_config=False):
    if multi_config:
        p.add_argument("--config", action="append", required=True,
                       help="experiment config (repeatable)")
    else:
        p.add_argument("--config", required=True, help="experiment config path")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel runs for sweeps")


def _load(path, seed, out):
    cfg = cfgmod.load_config(path)
    run = cfg.run
    if seed is not None:
        run = replace(run, seed=seed, model_seed=-1, p0_seed=-1, shuffle_seed=-1)
    if out is not None:
        run = replace(run, out_dir=out)
    return cfgmod.resolve_seeds(replace(cfg, run=run))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kflora",
                                     description="Kalman-filtered low-rank adapter training")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training stream")
    _add_common(p_train)

    p_cmp = sub.add_parser("compare", help="run several configs on one stream")
    _add_common(p_cmp, multi_config=True)
    p_cmp.add_argument("--repeats", type=int, default=3)

    p_p0 = sub.add_parser("sweep-p0", help="grid-probe variance initialization bounds")
    _add_common(p_p0)

    p_beta = sub.add_parser("sweep-beta", help="scan the noise-EMA forgetting factor")
    _add_common(p_beta)

    p_gen = sub.add_parser("gen-data", help="generate the bundled digit corpus as IDX files")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--train", type=int, default=60000)
    p_gen.add_argument("--test", type=int, default=10000)
    p_gen.add_argument("--strength", type=float, default=1.0)

    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            paths = gen_data.generate(args.out, n_train=args.train, n_test=args.test,
                                      seed=args.seed, strength=args.strength)
            for key, value in paths.items():
                print(f"{key}: {value}")
            return runner.EXIT_OK

        if args.command == "train":
            cfg = _load(args.config, args.seed, args.out)
            result = runner.run_training(cfg)
            s = result.summary
            print(f"steps={s.steps} acc_top1={s.acc_top1:.4f} acc_top5={s.acc_top5:.4f}"
                  + (f" test_acc={result.test_accuracy:.4f}" if result.test_accuracy is not None else "")
                  + (f" DIVERGED at {s.nonfinite_step}" if s.diverged_nonfinite else ""))
            return result.exit_code

        if args.command == "compare":
            cfgs = [_load(path, args.seed, None) for path in args.config]
            out = args.out or "runs/compare"
            rows = runner.run_compare(cfgs, [f"cfg{i}" for i in range(len(cfgs))],
                                      out, repeats=args.repeats, workers=args.workers)
            for row in rows:
                print(f"{row['label']}: {100 * row['mean_acc']:.2f} "
                      f"+/- {100 * row['std_acc']:.2f} %")
            return runner.EXIT_OK

        if args.command == "sweep-p0":
            cfg = _load(args.config, args.seed, None)
            out = args.out or "runs/sweep_p0"
            report = runner.run_sweep_p0(cfg, out, workers=args.workers)
            for (scheme, method), (lo, hi) in report["bounds"].items():
                print(f"{scheme}/{method}: stable [{lo}, {hi}]")
            return runner.EXIT_OK

        if args.command == "sweep-beta":
            cfg = _load(args.config, args.seed, None)
            out = args.out or "runs/sweep_beta"
            rows = runner.run_sweep_beta(cfg, out, workers=args.workers)
            for row in rows:
                flag = " (diverged)" if row["diverged"] else ""
                print(f"beta={row['beta']}: acc={row['acc_top1']:.4f}{flag}")
            return runner.EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return runner.EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return runner.EXIT_ERROR
    return runner.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
