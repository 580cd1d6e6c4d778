"""Command-line front end: ``flowcheck <command> [options]``.

Exit status is 0 on success, 1 when inputs are rejected, 2 when a solver
or the simulator fails numerically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .compare import compare_mean, compare_satisfaction, with_horizon
from .dde import pick_step, solve_transient
from .dta import NoEnabledEdge, check_determinism, parse_dta
from .expr import ExprError
from .fluid import NumericError, choose_step, solve_fluid
from .meanfield import build_product_population, solve_mean_fluid
from .model import ModelError, parse_population_model, with_population
from .product import build_product
from .sim import SimConfig, SimulationError, default_tagged, estimate_mean_fraction, estimate_satisfaction
from .sim import to_csv as sim_csv

log = logging.getLogger("flowcheck")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    argv: list
    inputs: dict
    parameters: dict
    version: str = __version__
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _common(p: argparse.ArgumentParser, dta: bool = True, step: bool = True):
    p.add_argument("--model", required=True, help="population model JSON")
    if dta:
        p.add_argument("--dta", required=True, help="property JSON")
    p.add_argument("-T", type=str, default=None, help="time horizon (defaults to the property's)")
    if step:
        p.add_argument("-h", dest="h", type=str, default=None, help="integration step")
    p.add_argument("-N", type=int, default=None, help="override the population size")
    p.add_argument("--out", default=None, help="output file (stdout if omitted)")
    p.add_argument("--help", action="help", help="show this message and exit")


def _sim_args(p: argparse.ArgumentParser, runs: int):
    p.add_argument("--runs", type=int, default=runs)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("--tagged", default=None, help="initial class state of the tagged agent")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowcheck", description="Fluid model checking of timed properties of one agent.")
    parser.add_argument("--version", action="version", version=f"flowcheck {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", add_help=False, help="check model and property files")
    p.add_argument("--model", required=True)
    p.add_argument("--dta", default=None)
    p.add_argument("--help", action="help")

    p = sub.add_parser("product", add_help=False, help="export the product automaton as DOT")
    _common(p, step=False)
    p.add_argument("--tagged", default=None)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--dot", dest="out", help="same as --out")

    p = sub.add_parser("fluid", add_help=False, help="fluid limit of the population")
    _common(p, dta=False)

    p = sub.add_parser("check", add_help=False, help="satisfaction probability of the tagged agent")
    _common(p)
    p.add_argument("--tagged", default=None)
    p.add_argument("--window-method", choices=("product", "dde"), default="product")

    p = sub.add_parser("mean", add_help=False, help="mean fraction of agents satisfying the property")
    _common(p)

    p = sub.add_parser("simulate", add_help=False, help="Monte Carlo estimates by exact simulation")
    _common(p, step=False)
    _sim_args(p, 10_000)
    p.add_argument("--mean", action="store_true", help="also estimate the mean satisfied fraction")
    p.add_argument("--mean-runs", type=int, default=100)

    p = sub.add_parser("compare", add_help=False, help="fluid checker vs simulation error table")
    _common(p)
    _sim_args(p, 10_000)
    p.add_argument("--points", type=int, default=200, help="report grid size")
    p.add_argument("--mean", action="store_true", help="compare the mean satisfied fraction instead")
    return parser


def _load(args):
    model = parse_population_model(Path(args.model).read_text())
    if args.N is not None:
        model = with_population(model, args.N)
    dta = None
    if getattr(args, "dta", None):
        dta = parse_dta(Path(args.dta).read_text(), model.agent_class.labels)
        if args.T is not None:
            dta = with_horizon(dta, _number(args.T))
    return model, dta


def _number(text: str) -> Fraction:
    try:
        return Fraction(text)
    except ValueError:
        raise UsageError(f"not a number: {text!r}") from None


def _emit(args, text: str, manifest: RunManifest | None):
    if args.out is None:
        sys.stdout.write(text)
        return
    Path(args.out).write_text(text)
    if manifest is not None:
        Path(args.out + ".manifest.json").write_text(manifest.to_json())
    log.info("wrote %s", args.out)


def _manifest(args, argv, **params) -> RunManifest:
    inputs = {}
    for key in ("model", "dta"):
        path = getattr(args, key, None)
        if path:
            inputs[path] = sha256(path)
    params.update({k: getattr(args, k) for k in ("T", "h", "N", "runs", "seed") if getattr(args, k, None) is not None})
    return RunManifest(args.command, list(argv), inputs, {k: str(v) if not isinstance(v, (int, float)) else v
                                                          for k, v in params.items()})


def cmd_validate(args, argv) -> int:
    try:
        model = parse_population_model(Path(args.model).read_text())
    except ModelError as exc:
        for d in exc.diagnostics:
            print(d, file=sys.stderr)
        return EXIT_INPUT
    problems = []
    if args.dta:
        try:
            dta = parse_dta(Path(args.dta).read_text(), model.agent_class.labels)
        except ModelError as exc:
            problems = exc.diagnostics
        else:
            problems = check_determinism(dta, model.agent_class.labels)
    for d in problems:
        print(d, file=sys.stderr)
    if problems:
        return EXIT_INPUT
    print("ok")
    return EXIT_OK


def cmd_product(args, argv) -> int:
    model, dta = _load(args)
    product = build_product(model.agent_class, dta, args.tagged or default_tagged(model), prune=not args.no_prune)
    _emit(args, product.to_dot(), _manifest(args, argv, states=len(product.states)))
    return EXIT_OK


def cmd_fluid(args, argv) -> int:
    model, _ = _load(args)
    if args.T is None:
        raise UsageError("fluid needs -T")
    T = _number(args.T)
    h = choose_step(T, None if args.h is None else _number(args.h))
    traj = solve_fluid(model, T, h)
    _emit(args, traj.to_csv(), _manifest(args, argv, step=h))
    return EXIT_OK


def cmd_check(args, argv) -> int:
    model, dta = _load(args)
    product = build_product(model.agent_class, dta, args.tagged or default_tagged(model))
    h = pick_step(product, None, None if args.h is None else _number(args.h))
    t0 = time.perf_counter()
    sol = solve_transient(product, model, h=h, window_method=args.window_method)
    log.info("P_F(T) = %.10g in %.3f s", sol.satisfaction[-1], time.perf_counter() - t0)
    _emit(args, sol.to_csv(), _manifest(args, argv, step=h, window_method=args.window_method))
    return EXIT_OK


def cmd_mean(args, argv) -> int:
    model, dta = _load(args)
    starts = [s for s in model.states if model.initial.get(s, 0) > 0]
    product = build_product(model.agent_class, dta, starts)
    h = pick_step(product, None, None if args.h is None else _number(args.h))
    sol = solve_mean_fluid(build_product_population(model, product), h=h)
    _emit(args, sol.to_csv(total="meanF", prefix=""), _manifest(args, argv, step=h))
    return EXIT_OK


def cmd_simulate(args, argv) -> int:
    model, dta = _load(args)
    cfg = SimConfig(args.runs, args.seed, None, None, args.jobs)
    est = estimate_satisfaction(model, dta, None, cfg, args.tagged)
    rows = [("P_F(T)", est.estimate, est.ci95, est.runs)]
    if args.mean:
        mf = estimate_mean_fraction(model, dta, None, SimConfig(args.mean_runs, args.seed, None, None, args.jobs))
        rows.append(("meanF(T)", float(mf.mean[-1]), float(mf.ci95[-1]), mf.runs))
    _emit(args, sim_csv(rows), _manifest(args, argv, jobs=args.jobs or os.cpu_count()))
    return EXIT_OK


def cmd_compare(args, argv) -> int:
    model, dta = _load(args)
    h = None if args.h is None else _number(args.h)
    if args.mean:
        cmp = compare_mean(model, dta, args.runs, args.seed, h, args.points, args.jobs)
    else:
        cmp = compare_satisfaction(model, dta, args.runs, args.seed, h, args.tagged, args.points, args.jobs)
    print(cmp.table(str(model.N)), end="")
    if args.out:
        lines = ["t,fluid,des"] + [f"{t:.17g},{a:.17g},{b:.17g}" for t, a, b in zip(cmp.times, cmp.fluid, cmp.des)]
        manifest = _manifest(args, argv, points=args.points, mean=args.mean)
        manifest.notes.append(f"MeanRelErr skips {cmp.excluded} grid points whose estimate is below 10/runs")
        manifest.parameters.update(dict(zip(("MeanRelErr", "MaxRelErr", "RelErr(T)", "TimeDES", "TimeFMC",
                                             "Speedup"), map(float, cmp.row()))))
        _emit(args, "\n".join(lines) + "\n", manifest)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "product": cmd_product,
    "fluid": cmd_fluid,
    "check": cmd_check,
    "mean": cmd_mean,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def configure_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("FLOWCHECK_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run_cli(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except (ModelError, ExprError) as exc:
        for d in getattr(exc, "diagnostics", [exc]):
            print(d, file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"flowcheck: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, SimulationError, NoEnabledEdge, FloatingPointError) as exc:
        print(f"flowcheck: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"flowcheck: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    np.seterr(all="ignore")
    sys.exit(run_cli())
