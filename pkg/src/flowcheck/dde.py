"""Transient probabilities of the product process via delay differential equations.

The product is a Markov renewal process: exponential moves driven by the
fluid limit plus deterministic clock moves from region ``i`` to ``i+1``
once ``Delta_i`` time units have passed since the agent entered the region.

Everything lives on one uniform grid of step ``h`` dividing every region
width, so delayed reads land exactly ``m_i = Delta_i / h`` steps back.  RK4
needs values at half steps as well; all time-indexed arrays here are
therefore laid out on the half grid ``t = j h / 2`` (index ``j``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .fluid import FluidTrajectory, NumericError, choose_step, hermite, project_simplex, solve_fluid
from .model import PopulationModel
from .product import ProductAutomaton, ProductState

log = logging.getLogger(__name__)

S_OUT = "s_out"


def half_grid(fluid: FluidTrajectory) -> np.ndarray:
    """Fluid values on the half grid, shape ``(2n+1, n_states)``."""
    n = len(fluid.values) - 1
    out = np.empty((2 * n + 1, fluid.values.shape[1]))
    out[0::2] = fluid.values
    out[1::2] = fluid.midpoints()
    return out


def transition_rates(product: ProductAutomaton, model: PopulationModel, phi_half: np.ndarray) -> np.ndarray:
    """Per-agent rate of every product transition on the half grid, ``(2n+1, n_tr)``."""
    lam = model.label_rates(phi_half.T)  # (n_labels, 2n+1)
    label_index = {t.label: i for i, t in enumerate(model.agent_class.transitions)}
    cols = [label_index[t.label] for t in product.transitions]
    return lam[cols].T.copy()


@dataclass(frozen=True)
class RegionGenerator:
    """``G_i`` over region ``i`` plus an absorbing exit state.

    Reset transitions leaving the region are redirected to the exit state
    (last index); ``G[j]`` is the generator at half-grid index ``j``.
    """

    region: int
    states: tuple  # ProductState entries, then S_OUT
    G: np.ndarray
    h: float

    @property
    def size(self) -> int:
        return len(self.states)

    def __call__(self, t: float) -> np.ndarray:
        j = int(round(2 * t / self.h))
        if abs(j * self.h / 2 - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"t={t} is not on the half grid")
        return self.G[j]


def build_region_generator(
    product: ProductAutomaton, model: PopulationModel, i: int, fluid: FluidTrajectory,
    rates: np.ndarray | None = None,
) -> RegionGenerator:
    members = product.region_states(i)
    local = {p: n for n, p in enumerate(members)}
    out = len(members)
    if rates is None:
        rates = transition_rates(product, model, half_grid(fluid))
    G = np.zeros((rates.shape[0], out + 1, out + 1))
    for r, t in enumerate(product.transitions):
        if t.source not in local:
            continue
        a = local[t.source]
        if t.reset:
            G[:, a, out] += rates[:, r]
        elif t.target != t.source:
            G[:, a, local[t.target]] += rates[:, r]
    idx = np.arange(out + 1)
    G[:, idx, idx] = 0.0
    G[:, idx, idx] = -G.sum(axis=2)
    return RegionGenerator(i, tuple(members) + (S_OUT,), G, float(fluid.h))


def step_propagators(gen: RegionGenerator) -> np.ndarray:
    """One-step propagators ``U_k`` of ``dU/dt = U G(t)`` by RK4, batched over k."""
    G0, Gm, G1 = gen.G[0:-1:2], gen.G[1::2], gen.G[2::2]
    h = gen.h
    eye = np.eye(gen.size)
    k1 = G0
    k2 = (eye + 0.5 * h * k1) @ Gm
    k3 = (eye + 0.5 * h * k2) @ Gm
    k4 = (eye + h * k3) @ G1
    return eye + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def sliding_products(U: np.ndarray, m: int) -> np.ndarray:
    """``W[s] = U[s] @ U[s+1] @ ... @ U[s+m-1]`` for every valid start ``s``.

    Uses binary doubling, so only products of propagators are formed and
    no matrix is ever inverted.
    """
    n = len(U)
    count = n - m + 1
    if count <= 0:
        return np.empty((0,) + U.shape[1:])
    blocks = [U]
    while (1 << len(blocks)) <= m:
        prev = blocks[-1]
        w = 1 << (len(blocks) - 1)
        blocks.append(prev[:-w] @ prev[w:])
    acc = np.broadcast_to(np.eye(U.shape[1]), (count,) + U.shape[1:]).copy()
    pos = 0
    for j in reversed(range(len(blocks))):
        if m & (1 << j):
            acc = acc @ blocks[j][pos:pos + count]
            pos += 1 << j
    return acc


@dataclass(frozen=True)
class Window:
    """``Y_i`` on the half grid: ``Pi(0, t)`` before ``Delta_i``, ``Pi(t - Delta_i, t)`` after."""

    region: int
    m: int  # Delta_i / h
    states: tuple
    Y: np.ndarray  # (2n+1, size, size)

    def at_grid(self, k: int) -> np.ndarray:
        return self.Y[2 * k]

    @property
    def grid(self) -> np.ndarray:
        return self.Y[0::2]


def _window_from_grid(gen: RegionGenerator, m: int, Yg: np.ndarray) -> Window:
    """Fill midpoints by Hermite interpolation with the exact window derivative."""
    n = len(Yg) - 1
    Gg = gen.G[0::2]
    dY = Yg @ Gg
    late = np.arange(m, n + 1)
    dY_late = dY[late] - Gg[late - m] @ Yg[late]
    Y = np.empty((2 * n + 1,) + Yg.shape[1:])
    Y[0::2] = Yg
    # the derivative jumps at t = Delta; each step uses the branch valid inside it
    d0, d1 = dY[:-1].copy(), dY[1:].copy()
    d0[m:] = dY_late[:-1]
    d1[m:] = dY_late[1:]
    Y[1::2] = hermite(Yg[:-1], Yg[1:], d0, d1, gen.h, 0.5)
    return Window(gen.region, m, gen.states, Y)


def _delay_steps(gen: RegionGenerator, delay) -> int:
    m = int(round(float(delay) / gen.h))
    if m < 1 or abs(m * gen.h - float(delay)) > 1e-9 * max(1.0, float(delay)):
        raise ValueError(f"delay {delay} is not a positive multiple of h={gen.h}")
    return m


def window_matrices(gen: RegionGenerator, delay) -> Window:
    """Windows from products of one-step propagators.

    Equivalent to integrating the window equation, but forms only products
    of stochastic matrices, so rounding errors are not amplified.
    """
    m = _delay_steps(gen, delay)
    U = step_propagators(gen)
    n = len(U)
    size = gen.size
    Yg = np.empty((n + 1, size, size))
    acc = np.eye(size)
    Yg[0] = acc
    for k in range(min(m, n)):
        acc = acc @ U[k]
        Yg[k + 1] = acc
    if n >= m:
        Yg[m:] = sliding_products(U, m)
    return _window_from_grid(gen, m, Yg)


def integrate_Y(gen: RegionGenerator, delay) -> Window:
    """Direct RK4 integration of the window equation.

    ``dY/dt = Y G(t)`` on ``[0, Delta]`` and ``Y G(t) - G(t - Delta) Y``
    afterwards, ``Y(0) = I``.  The second form amplifies perturbations by
    up to ``exp(max rate * t)``; :func:`window_matrices` computes the same
    quantity without that growth and is what the solver uses by default.
    """
    m = _delay_steps(gen, delay)
    G = gen.G
    n = (len(G) - 1) // 2
    h = gen.h
    Yg = np.empty((n + 1, gen.size, gen.size))
    y = np.eye(gen.size)
    Yg[0] = y
    lag = 2 * m

    def rhs(y, j, lagged):
        d = y @ G[j]
        if lagged:
            d = d - G[j - lag] @ y
        return d

    for k in range(n):
        j = 2 * k
        # the lagged term switches on at t = Delta, which is a step boundary
        on = k >= m
        k1 = rhs(y, j, on)
        k2 = rhs(y + 0.5 * h * k1, j + 1, on)
        k3 = rhs(y + 0.5 * h * k2, j + 1, on)
        k4 = rhs(y + h * k3, j + 2, on)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NumericError(f"window matrix diverged at t={(k + 1) * h}; try halving h")
        Yg[k + 1] = y
    return _window_from_grid(gen, m, Yg)


@dataclass
class FluxRecord:
    """Delayed fluxes per step ``j`` and stage ``theta`` in (0, 1/2, 1).

    ``inflow[j, th]`` is the reset inflow into region-1 states;
    ``outflux[i][j, th]`` is the clock flux leaving region ``i`` states,
    which arrives at the matching region ``i+1`` states.
    """

    inflow: np.ndarray
    outflux: dict


@dataclass
class TransientSolution:
    """Grid solution of the product process (right-continuous at jumps)."""

    times: np.ndarray
    P: np.ndarray  # (n+1, n_states)
    states: tuple
    final_mask: np.ndarray
    jumps: list = field(default_factory=list)  # (time, delta vector)
    flux: FluxRecord | None = None
    left: np.ndarray | None = None  # left limits P(t_k-) for k >= 1
    h: float = 0.0

    @property
    def satisfaction(self) -> np.ndarray:
        return self.P[:, self.final_mask].sum(axis=1)

    def to_csv(self, total: str = "P_F", prefix: str = "P_") -> str:
        lines = [f"t,{total}," + ",".join(f"{prefix}{s}" for s in self.states)]
        for t, pf, row in zip(self.times, self.satisfaction, self.P):
            lines.append(",".join(f"{v:.17g}" for v in (t, pf, *row)))
        return "\n".join(lines) + "\n"


def satisfaction_probability(sol: TransientSolution, product: ProductAutomaton | None = None, t=None) -> float:
    """Mass on final product states at grid time ``t`` (default: the horizon)."""
    if t is None:
        k = len(sol.times) - 1
    else:
        k = int(round(float(t) / sol.h))
        if abs(k * sol.h - float(t)) > 1e-9 * max(1.0, float(t)):
            raise ValueError(f"t={t} is not a grid point")
    mask = sol.final_mask if product is None else product.final_mask
    return float(sol.P[k, mask].sum())


class DelaySystem:
    """Shared integrator for the tagged-agent and population equations.

    Subclasses supply the Markovian right-hand side and the reset inflow
    into region 1; clock moves, their delays and the initial-cohort jumps
    are handled here.
    """

    def __init__(self, product: ProductAutomaton, windows: Sequence[Window], h: float, n: int):
        self.product = product
        self.windows = list(windows)
        self.h = h
        self.n = n
        idx = product.index
        self.members = [np.array([idx[p] for p in product.region_states(r.i)], dtype=int)
                        for r in product.regions]
        # region i local index -> local index of the same (s, q) in region i+1
        self.shift = []
        for r in product.regions[:-1]:
            nxt = {p: n for n, p in enumerate(product.region_states(r.i + 1))}
            self.shift.append(np.array(
                [nxt.get(ProductState(r.i + 1, p.s, p.q), -1) for p in product.region_states(r.i)], dtype=int))
        for i, s in enumerate(self.shift, start=1):
            if np.any(s < 0):
                raise ValueError(f"region {i} has states without a successor in region {i + 1}")

    def markov(self, x: np.ndarray, j: int) -> np.ndarray:
        raise NotImplementedError

    def delayed_flux(self, j: int, record: FluxRecord) -> np.ndarray:
        """Net clock flux at the three RK4 stage times of step ``j``, shape ``(3, S)``.

        Reads inflows from ``Delta_i`` earlier (exactly ``m_i`` steps back)
        and stores this step's region outfluxes in ``record``; a cohort that
        would have entered before time 0 contributes nothing.
        """
        F = np.zeros((3, len(self.product.states)))
        for i, w in enumerate(self.windows, start=1):
            seg = j - w.m
            if seg < 0:
                continue
            if i == 1:
                a = record.inflow[seg]
            else:
                a = np.zeros((3, len(self.members[i - 1])))
                a[:, self.shift[i - 2]] = record.outflux[i - 1][seg]
            Yt = w.Y[2 * j:2 * j + 3, :-1, :-1]
            d = np.maximum(np.einsum("ta,tab->tb", a, Yt), 0.0)
            record.outflux[i][j] = d
            F[:, self.members[i - 1]] -= d
            F[:, self.members[i][self.shift[i - 1]]] += d
        return F

    def reset_inflow(self, x: np.ndarray, j: int) -> np.ndarray:
        raise NotImplementedError

    def solve(self, x0: np.ndarray) -> TransientSolution:
        h, n, prod = self.h, self.n, self.product
        S = len(prod.states)
        k_reg = len(self.windows)
        jump_at = {}
        for i, w in enumerate(self.windows, start=1):
            jump_at[int(round(float(prod.regions[i - 1].hi) / h))] = i

        Pstart = np.empty((n + 1, S))
        Pend = np.empty((n, S))
        inflow = np.zeros((n, 3, len(self.members[0])))
        D = {i: np.zeros((n, 3, len(self.members[i - 1]))) for i in range(1, k_reg + 1)}
        record = FluxRecord(inflow, D)
        cohort = np.asarray(x0, dtype=float)[self.members[0]].copy()
        x = np.asarray(x0, dtype=float).copy()
        Pstart[0] = x
        jumps = []

        for j in range(n):
            F = self.delayed_flux(j, record)
            j2 = 2 * j
            k1 = self.markov(x, j2) + F[0]
            k2 = self.markov(x + 0.5 * h * k1, j2 + 1) + F[1]
            k3 = self.markov(x + 0.5 * h * k2, j2 + 1) + F[1]
            k4 = self.markov(x + h * k3, j2 + 2) + F[2]
            y = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(y)):
                raise NumericError(f"non-finite probability at t={(j + 1) * h}; try halving h")
            y = project_simplex(y)
            Pend[j] = y
            # inflow at this step's stage times, read again m_1 steps later
            dy = self.markov(y, j2 + 2) + F[2]
            inflow[j, 0] = self.reset_inflow(x, j2)
            inflow[j, 1] = self.reset_inflow(hermite(x, y, k1, dy, h, 0.5), j2 + 1)
            inflow[j, 2] = self.reset_inflow(y, j2 + 2)
            if j + 1 in jump_at:
                i = jump_at[j + 1]
                w = self.windows[i - 1]
                # never move more than is present, so the jump conserves mass
                moved = np.minimum(cohort @ w.at_grid(j + 1)[:-1, :-1], np.maximum(y[self.members[i - 1]], 0.0))
                delta = np.zeros(S)
                delta[self.members[i - 1]] -= moved
                delta[self.members[i][self.shift[i - 1]]] += moved
                y = np.maximum(y + delta, 0.0)
                jumps.append(((j + 1) * h, delta))
                cohort = np.zeros(len(self.members[i]))
                cohort[self.shift[i - 1]] = moved
            x = y
            Pstart[j + 1] = x

        return TransientSolution(
            times=np.arange(n + 1) * h,
            P=Pstart,
            states=tuple(str(p) for p in prod.states),
            final_mask=prod.final_mask,
            jumps=jumps,
            flux=record,
            left=Pend,
            h=h,
        )


class TaggedAgentSystem(DelaySystem):
    """Linear equations of one agent: ``dP/dt = P M(Phi(t)) + clock flux``."""

    def __init__(self, product, model, fluid, windows, rates=None):
        n = len(fluid.values) - 1
        super().__init__(product, windows, float(fluid.h), n)
        if rates is None:
            rates = transition_rates(product, model, half_grid(fluid))
        self.rates = rates
        idx = product.index
        S = len(product.states)
        M = np.zeros((rates.shape[0], S, S))
        for r, t in enumerate(product.transitions):
            if t.source != t.target:
                M[:, idx[t.source], idx[t.target]] += rates[:, r]
        diag = np.arange(S)
        M[:, diag, diag] = -M.sum(axis=2)
        self.M = M
        local1 = {p: n for n, p in enumerate(product.region_states(1))}
        self.reset_rows = np.array([r for r, t in enumerate(product.transitions) if t.reset], dtype=int)
        self.reset_src = np.array([idx[product.transitions[r].source] for r in self.reset_rows], dtype=int)
        self.reset_tgt = np.array([local1[product.transitions[r].target] for r in self.reset_rows], dtype=int)
        self.r1 = len(local1)

    def markov(self, x, j):
        return x @ self.M[j]

    def reset_inflow(self, x, j):
        flow = self.rates[j, self.reset_rows] * x[self.reset_src]
        return np.bincount(self.reset_tgt, weights=flow, minlength=self.r1)


def region_windows(product, model, fluid, rates=None, method: str = "product") -> list[Window]:
    """Windows for every region that ends before the horizon."""
    out = []
    for r in product.regions[:-1]:
        gen = build_region_generator(product, model, r.i, fluid, rates)
        if method == "product":
            out.append(window_matrices(gen, r.width))
        elif method == "dde":
            out.append(integrate_Y(gen, r.width))
        else:
            raise ValueError(f"unknown window method {method!r}")
    return out


def pick_step(product: ProductAutomaton, T=None, h=None) -> Fraction:
    T = product.dta.time_horizon if T is None else T
    return choose_step(T, h, [r.width for r in product.regions])


def solve_transient(
    product: ProductAutomaton,
    model: PopulationModel,
    T=None,
    h=None,
    fluid: FluidTrajectory | None = None,
    window_method: str = "product",
) -> TransientSolution:
    """Transient distribution of the product, started in its initial state."""
    T = product.dta.time_horizon if T is None else Fraction(T)
    if Fraction(T) != product.regions[-1].hi:
        raise ValueError("T must equal the horizon the product was built for")
    if fluid is None:
        step = pick_step(product, T, h)
        fluid = solve_fluid(model, T, step)
    rates = transition_rates(product, model, half_grid(fluid))
    windows = region_windows(product, model, fluid, rates, window_method)
    system = TaggedAgentSystem(product, model, fluid, windows, rates)
    x0 = np.zeros(len(product.states))
    x0[product.index[product.initial]] = 1.0
    return system.solve(x0)
