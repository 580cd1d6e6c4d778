"""Product of an agent class with a single-clock DTA, indexed by clock region."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .dta import DTA, guard_over_interval
from .model import AgentClass, Diagnostic, ModelError

log = logging.getLogger(__name__)


class Region(NamedTuple):
    i: int  # 1-based
    lo: Fraction
    hi: Fraction

    @property
    def width(self) -> Fraction:
        return self.hi - self.lo


class ProductState(NamedTuple):
    region: int
    s: str
    q: str

    def __str__(self) -> str:
        return f"{self.region}:{self.s}:{self.q}"


class ProductTransition(NamedTuple):
    source: ProductState
    label: str
    target: ProductState
    reset: bool


@dataclass(frozen=True)
class ClockEvent:
    name: str
    region: int
    duration: Fraction
    activation: frozenset


def extract_regions(dta: DTA, T=None) -> list[Region]:
    """Split ``[0, T]`` at the distinct guard constants lying strictly inside."""
    T = Fraction(dta.time_horizon if T is None else T)
    consts = sorted(dta.constants)
    late = [c for c in consts if c >= T]
    if late:
        log.warning("guard constants %s are >= T=%s and never bind", [str(c) for c in late], T)
    cuts = [Fraction(0)] + [c for c in consts if 0 < c < T] + [T]
    return [Region(i + 1, lo, hi) for i, (lo, hi) in enumerate(zip(cuts, cuts[1:]))]


@dataclass(frozen=True)
class ProductAutomaton:
    agent_class: AgentClass
    dta: DTA
    regions: tuple[Region, ...]
    states: tuple[ProductState, ...]
    transitions: tuple[ProductTransition, ...]
    events: tuple[ClockEvent, ...]
    initial: ProductState
    final: frozenset

    @property
    def k(self) -> int:
        """Number of region boundaries strictly inside ``(0, T)``."""
        return len(self.regions) - 1

    @cached_property
    def index(self) -> dict[ProductState, int]:
        return {p: n for n, p in enumerate(self.states)}

    def region_states(self, i: int) -> list[ProductState]:
        return [p for p in self.states if p.region == i]

    @cached_property
    def resets(self) -> tuple[ProductTransition, ...]:
        return tuple(t for t in self.transitions if t.reset)

    @property
    def final_mask(self) -> np.ndarray:
        return np.array([p in self.final for p in self.states])

    def deterministic_successor(self, p: ProductState) -> ProductState | None:
        if p.region > self.k:
            return None
        nxt = ProductState(p.region + 1, p.s, p.q)
        return nxt if nxt in self.index else None

    def to_dot(self) -> str:
        """Graph description: solid Markovian edges, red resets, dashed clock moves."""
        lines = ["digraph product {", "  rankdir=LR;"]
        for p in self.states:
            shape = "doublecircle" if p in self.final else "box"
            lines.append(f'  "{p}" [shape={shape}];')
        for t in self.transitions:
            if t.source == t.target and not t.reset:
                continue
            colour = ' color=red fontcolor=red' if t.reset else ""
            lines.append(f'  "{t.source}" -> "{t.target}" [label="{t.label}"{colour}];')
        for p in self.states:
            nxt = self.deterministic_successor(p)
            if nxt is not None:
                lines.append(f'  "{p}" -> "{nxt}" [style=dashed];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _successors(p: ProductState, by_source: dict, k: int):
    for t in by_source.get(p, ()):
        yield t.target
    if p.region <= k:
        yield ProductState(p.region + 1, p.s, p.q)


def reachable_closure(transitions: Iterable[ProductTransition], seeds: Iterable[ProductState]) -> set:
    """Closure of ``seeds`` under non-reset Markovian moves inside region 1."""
    by_source: dict = {}
    for t in transitions:
        if not t.reset and t.source.region == 1:
            by_source.setdefault(t.source, []).append(t.target)
    seen = set(seeds)
    todo = deque(seen)
    while todo:
        p = todo.popleft()
        for nxt in by_source.get(p, ()):
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


def build_product(
    agent_class: AgentClass,
    dta: DTA,
    s0: str | Sequence[str] | None = None,
    prune: bool = True,
) -> ProductAutomaton:
    """Build the region-indexed product.

    ``s0`` is the agent's initial class state (or several, for a whole
    population); it defaults to the first declared state.  With ``prune``
    only states reachable from the initial ones are kept.
    """
    if s0 is None:
        s0 = agent_class.states[0]
    starts = [s0] if isinstance(s0, str) else list(s0)
    regions = extract_regions(dta)
    k = len(regions) - 1
    raw = [ProductState(r.i, s, q) for r in regions for s in agent_class.states for q in dta.states]
    transitions = []
    problems: dict[ProductState, Diagnostic] = {}
    for p in raw:
        region = regions[p.region - 1]
        for lt in agent_class.transitions:
            if lt.source != p.s:
                continue
            enabled = [e for e in dta.outgoing(p.q, lt.label)
                       if guard_over_interval(e.guard, region.lo, region.hi)]
            if len(enabled) != 1:
                kind = "totality" if not enabled else "overlap"
                hint = " (enable implicit_self_loops?)" if not enabled else ""
                problems.setdefault(p, Diagnostic(
                    kind, f"product state {p}",
                    f"{len(enabled)} DTA edges for label {lt.label!r} over [{region.lo}, {region.hi}]{hint}"))
                continue
            e = enabled[0]
            if e.reset:
                target = ProductState(1, lt.target, e.target)
            else:
                target = ProductState(p.region, lt.target, e.target)
            transitions.append(ProductTransition(p, lt.label, target, e.reset))

    by_source: dict = {}
    for t in transitions:
        by_source.setdefault(t.source, []).append(t)
    initial_states = [ProductState(1, s, dta.initial) for s in starts]
    reach = set(initial_states)
    todo = deque(initial_states)
    while todo:
        p = todo.popleft()
        for nxt in _successors(p, by_source, k):
            if nxt not in reach:
                reach.add(nxt)
                todo.append(nxt)
    bad = [d for p, d in problems.items() if p in reach]
    if bad:
        raise ModelError(bad)

    keep = reach if prune else set(raw)
    states = tuple(p for p in raw if p in keep)
    transitions = tuple(t for t in transitions if t.source in keep)
    events = []
    for r in regions[1:-1]:
        act = frozenset(p for p in states if p.region == r.i)
        events.append(ClockEvent(f"e_{r.i}", r.i, r.width, act))
    if k >= 1:
        first = regions[0]
        events.insert(0, ClockEvent("e_1^0", 1, first.width, frozenset(p for p in states if p.region == 1)))
        local_resets = [t for t in transitions if t.reset and t.source.region == 1]
        for j, t in enumerate(local_resets, start=1):
            act = frozenset(reachable_closure(transitions, [t.target]))
            events.insert(j, ClockEvent(f"e_1^{j}", 1, first.width, act))
    final = frozenset(p for p in states if p.q in dta.final)
    return ProductAutomaton(agent_class, dta, tuple(regions), states, transitions, tuple(events),
                            initial_states[0], final)
