"""Population of monitored agents: every agent carries its own copy of the DTA.

Each global transition is split over the product states its participants
may occupy.  A variant with participants in product states ``v_1..v_r``
fires at ``f(xbar) * prod(x_{v_j} / xbar_{s_j})``, where ``xbar`` is the
class-level marginal; summing over variants recovers ``f(xbar)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np

from .dde import DelaySystem, TransientSolution, half_grid, pick_step, region_windows, transition_rates
from .fluid import FluidTrajectory, solve_fluid
from .model import EPS_DIV, Diagnostic, ModelError, PopulationModel
from .product import ProductAutomaton, ProductState, ProductTransition

DEFAULT_CAP = 10_000


@dataclass(frozen=True)
class DerivedTransition:
    origin: int  # index of the global transition it splits
    slots: tuple[ProductTransition, ...]  # one product move per participant

    @property
    def name(self) -> str:
        return "|".join(str(t.source) for t in self.slots)


@dataclass(frozen=True)
class ProductPopulationModel:
    model: PopulationModel
    product: ProductAutomaton
    transitions: tuple[DerivedTransition, ...]

    @property
    def states(self) -> tuple[ProductState, ...]:
        return self.product.states

    def x0(self) -> np.ndarray:
        """Initial fractions: every agent starts in region 1 with the monitor at its initial state."""
        x = np.zeros(len(self.states))
        for s, frac in zip(self.model.states, self.model.x0):
            if frac > 0:
                x[self.product.index[ProductState(1, s, self.product.dta.initial)]] = frac
        return x

    @cached_property
    def _arrays(self):
        idx = self.product.index
        S = len(self.states)
        width = max((len(d.slots) for d in self.transitions), default=0)
        variant = np.full((len(self.transitions), width), S, dtype=int)  # S pads with ratio 1
        update = np.zeros((len(self.transitions), S))
        local1 = {p: n for n, p in enumerate(self.product.region_states(1))}
        reset = np.zeros((len(self.transitions), len(local1)))
        for d, tr in enumerate(self.transitions):
            for k, t in enumerate(tr.slots):
                variant[d, k] = idx[t.source]
                update[d, idx[t.source]] -= 1
                update[d, idx[t.target]] += 1
                if t.reset:
                    reset[d, local1[t.target]] += 1
        class_of = np.array([self.model.state_index[p.s] for p in self.states], dtype=int)
        marginal = np.zeros((len(self.model.states), S))
        marginal[class_of, np.arange(S)] = 1.0
        origin = np.array([d.origin for d in self.transitions], dtype=int)
        return variant, update, reset, class_of, marginal, origin

    def marginal(self, x: np.ndarray) -> np.ndarray:
        """Class-level fractions ``xbar`` from product-state fractions."""
        return self._arrays[4] @ x

    def rates(self):
        """Compiled ``x -> derived rates`` over product-state fractions."""
        variant, _, _, class_of, marginal, origin = self._arrays
        f_global = self.model.rates
        S = len(self.states)

        def rates(x):
            xbar = marginal @ x
            f = f_global(xbar)[origin]
            occ = xbar[class_of]
            ratio = np.empty(S + 1)
            ratio[:S] = np.where(occ < EPS_DIV, 0.0, np.maximum(x, 0.0) / np.where(occ < EPS_DIV, 1.0, occ))
            ratio[S] = 1.0
            return f * ratio[variant].prod(axis=1)

        return rates

    def drift(self, x: np.ndarray) -> np.ndarray:
        return self.rates()(x) @ self._arrays[1]


def build_product_population(
    model: PopulationModel, product: ProductAutomaton, cap: int = DEFAULT_CAP
) -> ProductPopulationModel:
    """Split every global transition over participant product-state variants."""
    by_move: dict[tuple[ProductState, str], ProductTransition] = {}
    for t in product.transitions:
        by_move[(t.source, t.label)] = t
    q0 = product.dta.initial
    missing = [s for s, n in model.initial.items() if n > 0 and ProductState(1, s, q0) not in product.index]
    if missing:
        raise ModelError([Diagnostic("initial", "product", f"product lacks initial states for {missing}; "
                                     "build it from every occupied class state")])
    out: list[DerivedTransition] = []
    for g_idx, g in enumerate(model.transitions):
        options = []
        for label, count in g.sync:
            moves = [t for (p, lbl), t in by_move.items() if lbl == label]
            options.extend([moves] * count)
        total = 1
        for o in options:
            total *= max(len(o), 1)
        if len(out) + total > cap:
            raise ModelError([Diagnostic("too-many-transitions", f"global transition {g.name!r}",
                                         f"splitting would exceed the cap of {cap} derived transitions")])
        for combo in itertools.product(*options):
            out.append(DerivedTransition(g_idx, tuple(combo)))
    return ProductPopulationModel(model, product, tuple(out))


class MeanFieldSystem(DelaySystem):
    """Fractions of agents per product state; nonlinear Markovian part."""

    def __init__(self, ppm: ProductPopulationModel, fluid: FluidTrajectory, windows):
        super().__init__(ppm.product, windows, float(fluid.h), len(fluid.values) - 1)
        self.rate_fn = ppm.rates()
        _, self.update, self.reset, *_ = ppm._arrays

    def markov(self, x, j):
        return self.rate_fn(x) @ self.update

    def reset_inflow(self, x, j):
        return self.rate_fn(x) @ self.reset


def solve_mean_fluid(ppm: ProductPopulationModel, T=None, h=None, fluid: FluidTrajectory | None = None) -> TransientSolution:
    """Delayed fluid equations of the monitored population.

    The result's ``satisfaction`` is the mean fraction of agents whose
    monitor has accepted.
    """
    product, model = ppm.product, ppm.model
    T = product.dta.time_horizon if T is None else Fraction(T)
    if Fraction(T) != product.regions[-1].hi:
        raise ValueError("T must equal the horizon the product was built for")
    if fluid is None:
        fluid = solve_fluid(model, T, pick_step(product, T, h))
    rates = transition_rates(product, model, half_grid(fluid))
    windows = region_windows(product, model, fluid, rates)
    return MeanFieldSystem(ppm, fluid, windows).solve(ppm.x0())
