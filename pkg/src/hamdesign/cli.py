"""Command-line entry point: ``hamdesign <command> --config FILE [--out DIR] [--seed N] [--threads N]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .experiments import build_loss_spec, build_problem, run_bench, run_extrapolate, run_recover, run_scan
from .loss import LossError
from .optimizer import OptimizationError
from .persist import SchemaVersionError
from .references import PlantedProblemError
from .spectra import LanczosError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_BUDGET = 0, 2, 3, 4
COMMANDS = ("recover", "extrapolate", "scan", "bench", "validate-config")

log = logging.getLogger("hamdesign")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamdesign", description="Search for Hamiltonians whose ground "
                                     "state matches a reference wavefunction.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment YAML file")
    parser.add_argument("--out", help="output directory (default: output_dir from the config)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for finite-difference gradients (default 1)")
    return parser


def _summary(report) -> str:
    lines = [f"{report.mode}: loss {report.final_loss:.6e} ({report.termination}, {report.n_steps} steps, "
             f"{report.n_evals} evaluations)"]
    for group, rows in (("train", report.train), ("test", report.test)):
        for n, m in rows.items():
            lines.append(f"  {group} N={n:<3d} overlap {m['overlap']:.10f}  var {m['energy_variance']:.3e}  "
                         f"kl {m['kl']:.3e}  gap {m['gap']:.4f}")
    if report.off_support_l1 is not None:
        lines.append(f"  off-support sum |gamma| = {report.off_support_l1:.3e}")
    for flag in report.flags:
        lines.append(f"  FLAG {flag}")
    return "\n".join(lines)


def _run(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if args.command == "validate-config":
        problem = build_problem(config)
        spec = build_loss_spec(problem)
        print(f"ok: {problem.ansatz.name} with {len(problem.ansatz.labels)} operators, "
              f"{spec.n_reduced} free parameters, sizes {sorted(problem.bases)}")
        return EXIT_OK
    out = Path(args.out or config.output_dir)
    executor = ThreadPoolExecutor(args.threads) if args.threads > 1 else None
    try:
        if args.command in ("recover", "extrapolate"):
            fn = run_recover if args.command == "recover" else run_extrapolate
            report = fn(config, out, executor)
            print(_summary(report))
            print(f"outputs in {out}")
            return EXIT_BUDGET if report.termination == "budget exhausted" else EXIT_OK
        if args.command == "scan":
            res = run_scan(config, out, executor)
            print(f"grid min {res.grid_min['loss']:.6e} at {np.round(res.grid_min['p'], 6).tolist()} "
                  f"({len(res.rows)} evaluations)")
            print(f"cgd      {res.cgd['loss']:.6e} at {np.round(res.cgd['endpoint'], 6).tolist()} "
                  f"({res.cgd['n_evals']} evaluations, {res.cgd['reason']})")
            print(f"steepest {res.steepest['loss']:.6e} after {res.steepest['n_steps']} steps")
            print(f"outputs in {out}")
            return EXIT_BUDGET if res.cgd["reason"] == "budget exhausted" else EXIT_OK
        doc = run_bench(config, out)
        print(json.dumps(doc, indent=2, default=str))
        return EXIT_OK
    finally:
        if executor is not None:
            executor.shutdown()


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, SchemaVersionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlantedProblemError, LanczosError, LossError, OptimizationError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
