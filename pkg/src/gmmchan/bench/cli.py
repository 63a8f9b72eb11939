"""Command-line entry point of the benchmark harness."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from threadpoolctl import threadpool_limits

from ..errors import GmmChanError
from . import experiments
from .config import ExperimentConfig, load_config

COMMANDS = ("generate", "fit", "sweep-snr", "sweep-train", "sweep-components", "resp-count",
            "param-count")


def build_parser():
    parser = argparse.ArgumentParser(prog="gmmchan", description="GMM channel-estimation benchmarks")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment INI file (defaults apply without one)")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, help="limit BLAS/OpenMP threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _run(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(seed=args.seed, out_dir=args.out)
    cmd = args.command
    if cmd == "generate":
        paths = experiments.generate_files(cfg)
        return {"written": [str(p) for p in paths]}
    if cmd == "param-count":
        rows = experiments.report_param_counts(cfg)
        return {name["estimator"]: name["parameters"] for name in rows}
    data = experiments.load_datasets(cfg)
    if cmd == "fit":
        fitted = experiments.fit_and_cache_models(cfg, data[0])
        return {"fitted": sorted(fitted)}
    if cmd == "sweep-snr":
        experiments.run_mse_sweep(cfg, data=data)
        return {"written": ["mse.csv", "mse_se.csv"]}
    if cmd == "resp-count":
        experiments.run_responsibility_count(cfg, data=data)
        return {"written": ["resp_count.csv"]}
    if cmd == "sweep-train":
        experiments.run_training_size_sweep(cfg)
        return {"written": ["train_sweep.csv", "train_sweep_se.csv"]}
    experiments.run_component_sweep(cfg, data=data)
    return {"written": ["component_sweep.csv", "component_sweep_se.csv"]}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise GmmChanError("--threads must be >= 1")
        if args.threads:
            with threadpool_limits(limits=args.threads):
                result = _run(args)
        else:
            result = _run(args)
    except (GmmChanError, OSError) as exc:
        err = {"status": "error", "command": args.command, "type": type(exc).__name__,
               "field": getattr(exc, "field", None), "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 2
    print(json.dumps({"status": "ok", "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
