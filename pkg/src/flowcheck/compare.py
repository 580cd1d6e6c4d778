"""Side-by-side accuracy and timing of the fluid checker against simulation."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .dde import pick_step, solve_transient
from .dta import DTA
from .fluid import solve_fluid
from .meanfield import build_product_population, solve_mean_fluid
from .model import PopulationModel
from .product import build_product
from .sim import SimConfig, acceptance_times, default_tagged, estimate_mean_fraction, satisfaction_curve

COLUMNS = ("MeanRelErr", "MaxRelErr", "RelErr(T)", "TimeDES", "TimeFMC", "Speedup")


@dataclass(frozen=True)
class Comparison:
    times: np.ndarray
    fluid: np.ndarray
    des: np.ndarray
    runs: int
    mean_rel_err: float
    max_rel_err: float
    rel_err_T: float
    time_des: float
    time_fmc: float
    excluded: int  # grid points left out of the mean relative error

    @property
    def speedup(self) -> float:
        return self.time_des / self.time_fmc if self.time_fmc > 0 else float("inf")

    def row(self) -> tuple:
        return (self.mean_rel_err, self.max_rel_err, self.rel_err_T, self.time_des, self.time_fmc, self.speedup)

    def table(self, label: str = "") -> str:
        head = ("N",) if label else ()
        cells = ((label,) if label else ()) + tuple(f"{v:.4g}" for v in self.row())
        width = [max(len(a), len(b)) for a, b in zip(head + COLUMNS, cells)]
        fmt = "  ".join(f"{{:>{w}}}" for w in width)
        return fmt.format(*(head + COLUMNS)) + "\n" + fmt.format(*cells) + "\n"


def relative_errors(fluid: np.ndarray, des: np.ndarray, runs: int):
    """``(mean, max, at T, excluded)`` of ``|fluid - des| / des``.

    The maximum covers every point with a positive estimate; the mean skips
    points where the estimate is below ``10 / runs``, since there the
    relative error mostly measures Monte Carlo noise.
    """
    fluid, des = np.asarray(fluid, float), np.asarray(des, float)
    pos = des > 0
    rel = np.full(des.shape, np.nan)
    rel[pos] = np.abs(fluid[pos] - des[pos]) / des[pos]
    keep = des >= 10.0 / runs
    mean = float(rel[keep].mean()) if keep.any() else float("nan")
    mx = float(rel[pos].max()) if pos.any() else float("nan")
    return mean, mx, float(rel[-1]), int((~keep).sum())


def report_grid(T, h, points: int) -> np.ndarray:
    """About ``points`` equally spaced solver grid indices in ``(0, T]``."""
    n = int(round(float(T) / float(h)))
    stride = max(1, n // points)
    idx = np.arange(stride, n + 1, stride)
    if idx[-1] != n:
        idx = np.append(idx, n)
    return idx


def _best_of(fn, repeats: int):
    best, out = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def compare_satisfaction(model: PopulationModel, dta: DTA, runs: int = 10_000, seed: int = 0,
                         h=None, tagged: str | None = None, points: int = 200, jobs: int | None = None,
                         repeats: int = 3) -> Comparison:
    """Tagged-agent satisfaction probability: fluid checker vs simulation."""
    tagged = tagged or default_tagged(model)
    product = build_product(model.agent_class, dta, tagged)
    T = dta.time_horizon
    step = pick_step(product, T, h)

    def fmc():
        return solve_transient(product, model, T, fluid=solve_fluid(model, T, step))

    sol, t_fmc = _best_of(fmc, repeats)
    acceptance_times(model, dta, SimConfig(1, seed, T, jobs=jobs), tagged)  # compile outside the clock
    t0 = time.perf_counter()
    acc = acceptance_times(model, dta, SimConfig(runs, seed, T, jobs=jobs), tagged)
    t_des = time.perf_counter() - t0
    idx = report_grid(T, step, points)
    times = sol.times[idx]
    fl = sol.satisfaction[idx]
    des = satisfaction_curve(acc, times)
    mean, mx, rt, excl = relative_errors(fl, des, runs)
    return Comparison(times, fl, des, runs, mean, mx, rt, t_des, t_fmc, excl)


def compare_mean(model: PopulationModel, dta: DTA, runs: int = 100, seed: int = 0, h=None,
                 points: int = 200, jobs: int | None = None, repeats: int = 3) -> Comparison:
    """Mean fraction of satisfied agents: delayed mean-field vs simulation."""
    starts = [s for s in model.states if model.initial.get(s, 0) > 0]
    product = build_product(model.agent_class, dta, starts)
    T = dta.time_horizon
    step = pick_step(product, T, h)
    ppm = build_product_population(model, product)

    def fmc():
        return solve_mean_fluid(ppm, T, fluid=solve_fluid(model, T, step))

    sol, t_fmc = _best_of(fmc, repeats)
    idx = report_grid(T, step, points)
    times = sol.times[idx]
    estimate_mean_fraction(model, dta, T, SimConfig(1, seed, float(T), times, jobs))
    t0 = time.perf_counter()
    mf = estimate_mean_fraction(model, dta, T, SimConfig(runs, seed, float(T), times, jobs))
    t_des = time.perf_counter() - t0
    fl = sol.satisfaction[idx]
    mean, mx, rt, excl = relative_errors(fl, mf.mean, runs)
    return Comparison(times, fl, mf.mean, runs, mean, mx, rt, t_des, t_fmc, excl)


def with_horizon(dta: DTA, T) -> DTA:
    return replace(dta, time_horizon=Fraction(T) if not isinstance(T, float) else Fraction(repr(T)))
