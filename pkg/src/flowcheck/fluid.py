"""Fluid limit of the population and the tagged agent's forward equations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable

import numpy as np

from .model import PopulationModel

SIMPLEX_TOL = 1e-9


class NumericError(ArithmeticError):
    """Non-finite values appeared during integration."""


def _rational(v) -> Fraction:
    if isinstance(v, float):
        return Fraction(repr(v))
    return Fraction(v)


def choose_step(T, h=None, delays: Iterable = ()) -> Fraction:
    """Largest step not above ``h`` that divides ``T`` and every delay exactly.

    With ``h=None`` the request is ``min(0.01, min(delays) / 50)``.
    """
    T = _rational(T)
    delays = [_rational(d) for d in delays]
    if h is None:
        h = min([Fraction(1, 100)] + [d / 50 for d in delays])
    h = _rational(h)
    if h <= 0 or h > T:
        raise ValueError(f"step {h} must lie in (0, T]")
    g = T
    for d in delays:
        g = Fraction(math.gcd(g.numerator * d.denominator, d.numerator * g.denominator),
                     g.denominator * d.denominator)
    return g / math.ceil(g / h)


def project_simplex(x: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero; renormalize only when the sum drifted."""
    x = np.maximum(x, 0.0)
    s = x.sum()
    if abs(s - 1.0) > SIMPLEX_TOL and s > 0:
        x = x / s
    return x


def hermite(y0, y1, d0, d1, h, theta):
    """Cubic Hermite interpolant on one step, ``theta`` in [0, 1]."""
    t2 = theta * theta
    t3 = t2 * theta
    return ((2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + theta) * h * d0
            + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * h * d1)


@dataclass(frozen=True)
class FluidTrajectory:
    """Grid solution ``values[k] = Phi(k h)`` with the drift at each grid point."""

    h: float
    values: np.ndarray
    derivs: np.ndarray
    states: tuple[str, ...]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.h

    @property
    def T(self) -> float:
        return (len(self.values) - 1) * self.h

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.floor(t / self.h + 1e-9).astype(int), 0, len(self.values) - 2)
        theta = t / self.h - k
        return k, theta

    def at(self, t) -> np.ndarray:
        """Cubic Hermite dense output; shape ``(n_states,) + t.shape``."""
        k, theta = self._locate(t)
        y = hermite(self.values[k], self.values[k + 1], self.derivs[k], self.derivs[k + 1],
                    self.h, np.asarray(theta)[..., None])
        return np.moveaxis(y, -1, 0)

    def interpolate(self, t) -> np.ndarray:
        """Piecewise-linear dense output for reporting."""
        k, theta = self._locate(t)
        theta = np.asarray(theta)[..., None]
        y = (1 - theta) * self.values[k] + theta * self.values[k + 1]
        return np.moveaxis(y, -1, 0)

    def midpoints(self) -> np.ndarray:
        """``Phi`` at every half step, shape ``(n_steps, n_states)``."""
        v, d = self.values, self.derivs
        return hermite(v[:-1], v[1:], d[:-1], d[1:], self.h, 0.5)

    def to_csv(self) -> str:
        lines = ["t," + ",".join(self.states)]
        for t, row in zip(self.times, self.values):
            lines.append(",".join(f"{v:.17g}" for v in (t, *row)))
        return "\n".join(lines) + "\n"


def solve_fluid(model: PopulationModel, T, h) -> FluidTrajectory:
    """Classical RK4 on ``dPhi/dt = F(Phi)`` from ``x0 = initial / N``.

    After every step negatives are clamped to zero and the vector is
    renormalized if its sum drifted by more than ``SIMPLEX_TOL``.
    """
    h = float(h)
    n = int(round(float(T) / h))
    F = model.drift_scalar
    m = len(model.states)
    x = [float(v) for v in model.x0]
    values = [x]
    derivs = []
    half, sixth = 0.5 * h, h / 6.0
    try:
        d = F(x)
        for k in range(n):
            derivs.append(d)
            k2 = F([x[i] + half * d[i] for i in range(m)])
            k3 = F([x[i] + half * k2[i] for i in range(m)])
            k4 = F([x[i] + h * k3[i] for i in range(m)])
            y = [x[i] + sixth * (d[i] + 2.0 * (k2[i] + k3[i]) + k4[i]) for i in range(m)]
            y = [v if v > 0.0 else 0.0 for v in y]
            s = sum(y)
            if not math.isfinite(s):
                bad = next(i for i, v in enumerate(y) if not math.isfinite(v))
                raise NumericError(f"non-finite fluid state at t={(k + 1) * h}, component {model.states[bad]}")
            if abs(s - 1.0) > SIMPLEX_TOL and s > 0.0:
                y = [v / s for v in y]
            x = y
            values.append(x)
            d = F(x)
        derivs.append(d)
    except ZeroDivisionError:
        raise NumericError(f"division by zero in a rate at t={len(derivs) * h}") from None
    return FluidTrajectory(h, np.array(values), np.array(derivs), model.states)


def ictmc_generator(model: PopulationModel, phi: np.ndarray) -> np.ndarray:
    """Generator of the tagged agent's chain at fluid state ``phi``."""
    n = len(model.states)
    Q = np.zeros((n, n))
    lam = model.label_rates(np.asarray(phi, dtype=float))
    idx = model.state_index
    for rate, t in zip(lam, model.agent_class.transitions):
        i, j = idx[t.source], idx[t.target]
        if i != j:
            Q[i, j] += rate
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def solve_forward(generator: Callable[[float], np.ndarray], p0: np.ndarray, T, h) -> np.ndarray:
    """RK4 on ``dp/dt = p Q(t)``; returns the grid values, shape ``(n+1, len(p0))``."""
    h = float(h)
    n = int(round(float(T) / h))
    p = np.asarray(p0, dtype=float).copy()
    out = np.empty((n + 1, len(p)))
    out[0] = p
    Q0 = generator(0.0)
    for k in range(n):
        t = k * h
        Qm = generator(t + 0.5 * h)
        Q1 = generator(t + h)
        k1 = p @ Q0
        k2 = (p + 0.5 * h * k1) @ Qm
        k3 = (p + 0.5 * h * k2) @ Qm
        k4 = (p + h * k3) @ Q1
        p = project_simplex(p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(p)):
            raise NumericError(f"non-finite probability at t={t + h}")
        out[k + 1] = p
        Q0 = Q1
    return out


def solve_ictmc(model: PopulationModel, s0: str, T, h, fluid: FluidTrajectory | None = None) -> np.ndarray:
    """Transient distribution of one tagged agent started in ``s0``.

    Rates follow ``Q(Phi(t))``; half-step values of ``Phi`` come from the
    Hermite dense output of the fluid solution.
    """
    fluid = fluid or solve_fluid(model, T, h)
    p0 = np.zeros(len(model.states))
    p0[model.state_index[s0]] = 1.0
    return solve_forward(lambda t: ictmc_generator(model, fluid.at(t)), p0, T, h)
