"""Command line entry point: ``vof <command> ...``."""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .experiments import Dataset, ExperimentConfig, generate_dataset, run_experiment, save_csv
from .kernels import KernelParams

logger = logging.getLogger("vof")


def _common(parser):
    parser.add_argument("--profile", choices=("desk", "paper"), default=None,
                        help="scale of the run (default: the config's, else desk)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out-dir", default=None, help="directory for results.csv and manifest.json")
    parser.add_argument("--threads", type=int, default=None, help="limit BLAS/OpenMP threads")


def build_parser():
    parser = argparse.ArgumentParser(prog="vof", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("fit", "fit a model described by a config"),
        ("elbo", "evaluate the ELBO and exact LML for a config"),
        ("fig1", "TrigVOF kernel-matrix approximation sweep"),
        ("fig2", "one-dimensional TrigVOF regression with mis-set and optimised a"),
        ("fig3", "dense versus diagonal covariance sweep"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="YAML experiment config")
        _common(p)
    p = sub.add_parser("acceptance", help="run the acceptance criteria suite")
    _common(p)
    p = sub.add_parser("gen-data", help="sample a synthetic dataset from a GP prior")
    p.add_argument("dist", choices=("gaussian", "uniform", "mixture"))
    p.add_argument("N", type=int)
    p.add_argument("seed", type=int)
    p.add_argument("out", help="output CSV path")
    p.add_argument("--kernel", default="se")
    p.add_argument("--variance", type=float, default=0.5)
    p.add_argument("--lengthscale", type=float, default=0.5)
    p.add_argument("--noise-sd", type=float, default=0.01)
    _common(p)
    return parser


def _run(args):
    if args.command == "gen-data":
        kernel = KernelParams(args.kernel, args.variance, args.lengthscale)
        data = generate_dataset(kernel, args.noise_sd**2, args.dist, args.N, args.seed)
        save_csv(Dataset(data.X, data.y), args.out)
        print(f"wrote {args.N} points to {args.out}")
        return 0
    if args.command == "acceptance":
        tests = Path(__file__).resolve().parents[2] / "tests" / "test_acceptance.py"
        if not tests.exists():
            print(f"acceptance suite not found at {tests}", file=sys.stderr)
            return 2
        cmd = [sys.executable, "-m", "pytest", str(tests), "-s", "-q"]
        return subprocess.call(cmd)
    config = ExperimentConfig.from_file(args.config, experiment=args.command, profile=args.profile,
                                        seed=args.seed, output_dir=args.out_dir)
    table = run_experiment(config)
    print(table.to_csv(), end="")
    print(f"results written to {config.output_dir}", file=sys.stderr)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        if args.threads:
            with threadpool_limits(limits=args.threads):
                return _run(args)
        return _run(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
