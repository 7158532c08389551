"""Command-line entry point.

Subcommands:
    run           execute an experiment described by a JSON config
    verify        run the built-in theorem verification suite
    calibrate-dp  print minimal noise scales for given privacy budgets
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import privacy as dp
from .experiments import (OUT_DIR_ENV, emit_outputs, load_config, run_experiment,
                          theorem_suite)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgc",
        description="Federated learning of cross-client causal structure over "
                    "linear state-space systems.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a JSON config")
    run_p.add_argument("--config", required=True, help="path to the config file")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--out-dir", default=None,
                       help=f"output directory (default: config, then ${OUT_DIR_ENV})")
    run_p.add_argument("--mode", default=None,
                       choices=("full", "no_augmentation", "no_server", "pretrained_clients"),
                       help="override the training mode")

    verify_p = sub.add_parser("verify", help="run the theorem verification suite")
    verify_p.add_argument("--seed", type=int, default=0)
    verify_p.add_argument("--out-dir", default=None, help="write verify.json here")
    verify_p.add_argument("--equivalence-seeds", type=int, default=50)

    cal_p = sub.add_parser("calibrate-dp", help="derive minimal Gaussian noise scales")
    cal_p.add_argument("--eps-c", type=float, required=True)
    cal_p.add_argument("--delta-c", type=float, required=True)
    cal_p.add_argument("--eps-a", type=float, required=True)
    cal_p.add_argument("--delta-a", type=float, required=True)
    cal_p.add_argument("--eps-g", type=float, required=True)
    cal_p.add_argument("--delta-g", type=float, required=True)
    cal_p.add_argument("--b-y", type=float, required=True, help="measurement norm bound")
    cal_p.add_argument("--b-k", type=float, required=True, help="Kalman gain norm bound")
    cal_p.add_argument("--b-theta", type=float, default=0.0,
                       help="correction parameter norm bound")
    cal_p.add_argument("--c-g", type=float, required=True, help="gradient clip threshold")
    return parser


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed,
                         training=replace(config.training, seed=args.seed))
    if args.mode is not None:
        config = replace(config, training=replace(config.training, mode=args.mode))
    if args.out_dir is not None:
        config = replace(config, out_dir=args.out_dir)
    metrics = run_experiment(config)
    out_dir = config.out_dir or os.environ.get(OUT_DIR_ENV)
    summary = {
        "rounds": len(metrics.loss_rows),
        "final_loss_server": metrics.theory.get("final_loss_server"),
        "param_errors": metrics.theory.get("param_errors"),
        "out_dir": out_dir,
    }
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_verify(args) -> int:
    checks = theorem_suite(seed=args.seed, n_equivalence_seeds=args.equivalence_seeds)
    for name, result in checks.items():
        if not isinstance(result, dict):
            continue
        status = "PASS" if result["pass"] else "FAIL"
        detail = {k: v for k, v in result.items() if k != "pass"}
        print(f"{status} {name}: {json.dumps(detail, default=str)}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        path = os.path.join(args.out_dir, "verify.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(checks, fh, indent=2, default=str)
        print(f"wrote {path}")
    return 0 if checks["all_pass"] else 1


def _cmd_calibrate(args) -> int:
    params = dp.calibrate(dp.PrivacyParams(
        eps_c=args.eps_c, delta_c=args.delta_c,
        eps_a=args.eps_a, delta_a=args.delta_a,
        eps_g=args.eps_g, delta_g=args.delta_g,
        B_y=args.b_y, B_K=args.b_k, B_theta=args.b_theta, C_g=args.c_g))
    eps, delta = params.client_budget
    print(json.dumps({
        "sigma_c": params.sigma_c,
        "sigma_a": params.sigma_a,
        "sigma_g": params.sigma_g,
        "client_composed_budget": {"eps": eps, "delta": delta},
        "note": "per-message budgets; totals over a run compose sequentially "
                "and grow linearly with the number of rounds",
    }, indent=2))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "verify":
        return _cmd_verify(args)
    if args.command == "calibrate-dp":
        return _cmd_calibrate(args)
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
