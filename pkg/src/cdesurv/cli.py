"""Command line: ``cdesurv {simulate,train,evaluate,interpret,cluster}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ABLATIONS, RunConfig
from .errors import ConfigError, DataError, NumericDivergence, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--ablation", choices=sorted(ABLATIONS), default="none")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-identical reruns")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    p = argparse.ArgumentParser(prog="cdesurv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic cohort as CSV")
    sub.add_parser("train", parents=[common], help="train and save checkpoint.bin")
    ev = sub.add_parser("evaluate", parents=[common], help="quartile metrics on the test split")
    ev.add_argument("--oracle-risk", action="store_true",
                    help="score the generator's ground-truth risk instead of a model")
    sub.add_parser("interpret", parents=[common], help="average vector field importance and relevance")
    cl = sub.add_parser("cluster", parents=[common], help="DTW clustering of latent trajectories")
    cl.add_argument("--clusters", type=int, help="number of clusters (default: config n_clusters)")
    return p


def resolve_config(args) -> RunConfig:
    if args.config is not None:
        cfg = RunConfig.load(args.config)
    elif args.command != "simulate" and args.command != "train" and (args.out / "config.snapshot").exists():
        cfg = RunConfig.load(args.out / "config.snapshot")
    else:
        cfg = RunConfig()
    extra = "\n".join(args.set)
    if extra:
        cfg = RunConfig.from_text(extra, base=cfg)
    if args.seed is not None:
        cfg = cfg.override(seed=args.seed)
    return cfg.with_ablation(args.ablation)


def _pin_threads(argv) -> None:
    """Re-run the process with single-threaded math libraries if they are not pinned yet."""
    if all(os.environ.get(v) == "1" for v in _THREAD_VARS):
        return
    env = dict(os.environ, **{v: "1" for v in _THREAD_VARS})
    os.execve(sys.executable, [sys.executable, "-m", "cdesurv", *argv], env)


def run(args) -> int:
    from . import pipeline

    cfg = resolve_config(args)
    out = args.out
    if args.command == "simulate":
        paths = pipeline.cmd_simulate(cfg, out)
        print(f"wrote {paths.observations.parent}")
    elif args.command == "train":
        _, res = pipeline.cmd_train(
            cfg, out,
            progress=lambda r: print(f"epoch {r.epoch:3d}  loss {r.loss:.4f}  val C {r.val_c_index:.4f}", flush=True),
        )
        print(f"best epoch {res.best_epoch}, validation C-index {res.best_val_c_index:.4f}")
    elif args.command == "evaluate":
        report = pipeline.cmd_evaluate(cfg, out, oracle=args.oracle_risk)
        print(report.to_text(), end="")
    elif args.command == "interpret":
        _, ranking, _ = pipeline.cmd_interpret(cfg, out)
        for name, score in ranking:
            print(f"{name}\t{score:.6f}")
    elif args.command == "cluster":
        res = pipeline.cmd_cluster(cfg, out, n_clusters=args.clusters)
        for c in range(res.n_clusters):
            n = int((res.assignments == c).sum())
            print(f"cluster {c} ({res.names[c]}): {n} patients")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.deterministic:
        _pin_threads(argv)
    try:
        return run(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericDivergence as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
