"""Command line entry point.

    cosmicqubit [--config FILE] [--seed N] [--out DIR] [--threads N] <command>

Commands map one-to-one onto pipeline stages, plus ``run`` (the stages given by
--stages, default all) and ``rate-algebra`` (standalone term breakdown).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .. import ratealgebra as ra
from ..coinstat import RateError
from ..detcal import FitFailure
from ..geometry import CoverageError
from ..fluxmc import ConfigError
from .config import RunConfig
from .stages import STAGES, DependencyError, run_pipeline

EXIT_OK, EXIT_ANALYSIS, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_FIT = 0, 1, 2, 3, 4

COMMANDS = {
    "sample-muons": "sample",
    "transport": "transport",
    "xsection": "xsection",
    "simulate": "simulate",
    "detect": "detect",
    "coincide": "coincide",
    "calibrate": "calibrate",
    "report": "report",
}


def parse_rate_input(text: str):
    """Parse the rate-algebra input.

    Lines (``#`` starts a comment)::

        labels Q A B
        lambda QA 1.2e-4
        eps A 0.96
        target QA
        order 3
    """
    labels, lambdas, eps, target, order = None, {}, {}, None, 1
    for raw in text.splitlines():
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        key, args = parts[0].lower(), parts[1:]
        try:
            if key == "labels":
                labels = tuple(args)
            elif key == "lambda":
                lambdas[args[0]] = lambdas.get(args[0], 0.0) + float(args[1])
            elif key == "eps":
                eps[args[0]] = float(args[1])
            elif key == "target":
                target = args[0]
            elif key == "order":
                order = int(args[0])
            else:
                raise ConfigError(f"unknown keyword {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"bad line {raw!r}: {exc}") from exc
    if labels is None:
        raise ConfigError("rate-algebra input needs a 'labels' line")
    return labels, lambdas, eps or None, target, order


def rate_algebra_report(text: str, order: int | None = None, target: str | None = None) -> str:
    labels, lambdas, eps, t, o = parse_rate_input(text)
    order = o if order is None else order
    target = t if target is None else target
    try:
        exp = ra.expand(lambdas, labels, order, eps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    lines = [f"# labels: {' '.join(labels)}", f"# order: {order}",
             f"# lambda_total: {exp.lambda_total:.6e}", f"# expansion_sum: {exp.total():.12f}",
             f"# tail_bound: {exp.tail_bound():.6e}"]
    if target is not None:
        p = ra.observation_probability(target, lambdas, labels, eps, order)
        p1 = ra.first_order_rate(target, lambdas, labels, eps)
        lines += [f"# target: {target}", f"# probability: {p:.10e}", f"# first_order: {p1:.10e}",
                  f"# absolute_gap: {abs(p - p1):.6e}"]
        tmask = ra.Combination.parse(target, labels).mask
        terms = [tm for tm in exp.terms if tm.observed == tmask]
        exp = ra.TermExpansion(exp.labels, exp.order, terms, exp.lambda_total)
    return "\n".join(lines) + "\n" + exp.table()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="YAML run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides config)")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--stages", default=argparse.SUPPRESS,
                        help=f"comma-separated subset of {','.join(STAGES)} (for 'run')")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for numba kernels")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="cosmicqubit", parents=[common],
                                description="Cosmic-ray correlated qubit error analysis toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, stage in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run --stages (default: all) in dependency order")
    ra_p = sub.add_parser("rate-algebra", parents=[common], help="term-by-term observation probabilities")
    ra_p.add_argument("input", type=Path, help="text file with labels/lambda/eps/target/order lines")
    ra_p.add_argument("--order", type=int, default=None)
    ra_p.add_argument("--target", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    opts = vars(args)
    logging.basicConfig(level=logging.INFO if opts.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rate-algebra":
            try:
                text = args.input.read_text()
            except OSError as exc:
                raise ConfigError(str(exc)) from exc
            sys.stdout.write(rate_algebra_report(text, args.order, args.target))
            return EXIT_OK
        overrides = {}
        if "seed" in opts:
            overrides["seed"] = opts["seed"]
        if "out" in opts:
            overrides["output_dir"] = str(opts["out"])
        if "threads" in opts:
            overrides["threads"] = opts["threads"]
        cfg = RunConfig.load(opts.get("config"), overrides)
        _set_threads(int(cfg["threads"]))
        if args.command == "run":
            stages = [s.strip() for s in opts["stages"].split(",") if s.strip()] if "stages" in opts else None
            unknown = set(stages or ()) - set(STAGES)
            if unknown:
                raise ConfigError(f"unknown stages: {sorted(unknown)}")
        else:
            stages = [COMMANDS[args.command]]
        run_pipeline(cfg, stages)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except FitFailure as exc:
        print(f"fit failure: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (RateError, CoverageError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    return EXIT_OK


def _set_threads(n: int):
    import numba

    target = max(1, min(n, numba.config.NUMBA_NUM_THREADS))
    if target != numba.config.NUMBA_NUM_THREADS:  # avoid starting the thread pool needlessly
        numba.set_num_threads(target)


if __name__ == "__main__":
    sys.exit(main())
