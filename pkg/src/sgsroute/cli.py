"""Command-line entry point: ``sgsroute {train,evaluate,compare,oracle,check,diagnose}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .config import ConfigError, load_config, parse_config, preset
from .learner import DivergenceError, NotStabilizableError
from .oracle import OracleError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="YAML run configuration")
    src.add_argument("--preset", help="built-in configuration (paper_n3, toy_n2)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (default: config 'output')")
    common.add_argument("--force", action="store_true", help="train even when lambda >= sum(mu)")
    common.add_argument("--workers", type=int, default=1, help="parallel evaluation replications")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sgsroute", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the softmax SARSA router")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate one frozen policy")
    ev.add_argument("--policy", default="sgs", choices=["sgs", "greedy", "jsq", "bernoulli"])
    ev.add_argument("--weights", type=Path, help="weights CSV for sgs/greedy")
    ev.add_argument("--horizon", type=int, help="override eval_horizon")
    ev.add_argument("--replications", type=int)
    cp = sub.add_parser("compare", parents=[common], help="comparison table over the config's policy set")
    cp.add_argument("--weights", type=Path, help="trained weights; trains first when omitted")
    orc = sub.add_parser("oracle", parents=[common], help="exact truncated-MDP quantities")
    orc.add_argument("--weights", type=Path, help="report distances of these weights to the oracle targets")
    orc.add_argument("--x-max", type=int)
    orc.add_argument("--gamma", type=float)
    ck = sub.add_parser("check", parents=[common], help="stabilizability, growth assumption and drift certificate")
    ck.add_argument("--weights", type=Path)
    dg = sub.add_parser("diagnose", parents=[common], help="stability diagnostics over a saved trajectory")
    dg.add_argument("--trajectory", type=Path, required=True)
    dg.add_argument("--weights", type=Path, required=True)
    dg.add_argument("--trace", type=Path, help="trace/metrics CSV of weight snapshots")
    dg.add_argument("--target", type=Path, help="target weights CSV for the convergence series")
    return p


def _overrides(cfg, args, **extra):
    raw = dict(cfg.raw)
    if args.seed is not None:
        raw["seed"] = args.seed
    for key, val in extra.items():
        if val is None:
            continue
        if isinstance(val, dict):
            section = dict(raw.get(key) or {})
            section.update({k: v for k, v in val.items() if v is not None})
            raw[key] = section
        else:
            raw[key] = val
    return parse_config(raw)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = preset(args.preset) if args.preset else load_config(args.config)
        extra = {}
        if args.command == "evaluate":
            extra = {"eval_horizon": args.horizon, "replications": args.replications}
        elif args.command == "oracle":
            extra = {"oracle": {"x_max": args.x_max, "gamma": args.gamma}}
        cfg = _overrides(cfg, args, **extra)
        out = args.out if args.out is not None else Path(cfg.output)
        w = harness.load_weights(args.weights) if getattr(args, "weights", None) else None
        target = harness.load_weights(args.target) if getattr(args, "target", None) else None
        if w is not None and w.size != cfg.basis.dim:
            raise ConfigError(f"weights file has {w.size} entries, basis needs {cfg.basis.dim}")
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "train":
            summary = harness.cmd_train(cfg, out, force=args.force)
            print(f"trained {summary['epochs']} epochs; artifacts in {out}")
        elif args.command == "evaluate":
            row = harness.cmd_evaluate(cfg, out, args.policy, w, args.workers)
            print(f"{row.name}: average cost {row.average_cost:.4f} (se {row.cost_se:.4f}), "
                  f"mean |x| {row.mean_queue:.3f}")
        elif args.command == "compare":
            print(harness.cmd_compare(cfg, out, w, args.workers, force=args.force).to_text())
        elif args.command == "oracle":
            summary = harness.cmd_oracle(cfg, out, w)
            print(yaml.safe_dump(harness._plain(summary), sort_keys=False), end="")
        elif args.command == "check":
            report, ok = harness.cmd_check(cfg, w)
            print(yaml.safe_dump(harness._plain(report), sort_keys=False), end="")
            print("result:", "pass" if ok else "fail")
            return EXIT_OK if ok else EXIT_FAIL
        elif args.command == "diagnose":
            summary = harness.cmd_diagnose(cfg, out, args.trajectory, w, args.trace, target)
            print(yaml.safe_dump(harness._plain(summary), sort_keys=False), end="")
    except NotStabilizableError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OracleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
