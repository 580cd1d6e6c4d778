"""Single-clock deterministic timed automata used as properties of one agent."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .model import Diagnostic, ModelError, load_json

_OPS = {"<": "<", "<=": "<=", "≤": "<=", ">=": ">=", "≥": ">=", ">": ">"}
_ATOM = re.compile(r"^\s*([A-Za-z_]\w*)\s*(<=|>=|≤|≥|<|>)\s*([0-9]+(?:\.[0-9]*)?|\.[0-9]+)\s*$")


class NoEnabledEdge(RuntimeError):
    pass


@dataclass(frozen=True)
class Atom:
    op: str
    bound: Fraction

    def holds(self, v) -> bool:
        b = self.bound
        if self.op == "<":
            return v < b
        if self.op == "<=":
            return v <= b
        if self.op == ">=":
            return v >= b
        return v > b

    def __str__(self) -> str:
        b = self.bound
        return f"c{self.op}{b.numerator if b.denominator == 1 else float(b)}"


@dataclass(frozen=True)
class ClockGuard:
    atoms: tuple[Atom, ...] = ()

    def holds(self, v) -> bool:
        return all(a.holds(v) for a in self.atoms)

    @property
    def constants(self) -> set[Fraction]:
        return {a.bound for a in self.atoms}

    def __str__(self) -> str:
        return " & ".join(str(a) for a in self.atoms) or "true"


def parse_guard(text: str, clock: str = "c") -> ClockGuard:
    """Parse ``"c<=5 & c>=0"``; an empty string or ``true`` is the trivial guard."""
    text = text.strip()
    if text in ("", "true"):
        return ClockGuard()
    atoms = []
    for part in text.split("&"):
        m = _ATOM.match(part)
        if not m:
            raise ModelError([Diagnostic("syntax", f"guard {text!r}", f"cannot parse atom {part.strip()!r}")])
        name, op, num = m.groups()
        if name != clock:
            raise ModelError([Diagnostic("unknown-clock", f"guard {text!r}", f"clock {name!r} is not {clock!r}")])
        atoms.append(Atom(_OPS[op], Fraction(num)))
    return ClockGuard(tuple(atoms))


def guard_over_interval(guard: ClockGuard, lo, hi) -> bool:
    """True iff ``guard`` holds on all of ``[lo, hi]``.

    A strict atom whose bound coincides with an endpoint of a nondegenerate
    interval is judged on the interior, so ``c>5`` holds over ``[5, 20]``.
    """
    lo, hi = Fraction(lo), Fraction(hi)
    for a in guard.atoms:
        b = a.bound
        if a.op == "<=":
            ok = hi <= b
        elif a.op == "<":
            ok = hi < b or (hi == b and lo < hi)
        elif a.op == ">=":
            ok = lo >= b
        else:
            ok = lo > b or (lo == b and lo < hi)
        if not ok:
            return False
    return True


@dataclass(frozen=True)
class DTAEdge:
    source: str
    label: str
    guard: ClockGuard
    reset: bool
    target: str


@dataclass(frozen=True)
class MonitorState:
    q: str
    eta: float = 0.0


@dataclass(frozen=True)
class DTA:
    time_horizon: Fraction
    states: tuple[str, ...]
    initial: str
    final: frozenset[str]
    edges: tuple[DTAEdge, ...]
    clock: str = "c"
    implicit_self_loops: bool = True
    _out: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        out: dict[tuple[str, str], list[DTAEdge]] = {}
        for e in self.edges:
            out.setdefault((e.source, e.label), []).append(e)
        object.__setattr__(self, "_out", out)

    @property
    def T(self) -> Fraction:
        return self.time_horizon

    def outgoing(self, q: str, label: str) -> list[DTAEdge]:
        return self._out.get((q, label), [])

    @property
    def constants(self) -> set[Fraction]:
        out: set[Fraction] = set()
        for e in self.edges:
            out |= e.guard.constants
        return out

    def step(self, m: MonitorState, dt: float, label: str) -> MonitorState:
        return monitor_step(self, m, dt, label)


def with_self_loops(dta: DTA, labels: Iterable[str]) -> DTA:
    """Add a non-resetting, unguarded self-loop for every (state, label) with no edge."""
    extra = [
        DTAEdge(q, a, ClockGuard(), False, q)
        for q in dta.states
        for a in labels
        if not dta.outgoing(q, a)
    ]
    if not extra:
        return dta
    return DTA(dta.time_horizon, dta.states, dta.initial, dta.final, dta.edges + tuple(extra),
               dta.clock, dta.implicit_self_loops)


def parse_dta(text: str, labels: Sequence[str] | None = None) -> DTA:
    """Parse a JSON property file.

    When ``labels`` (the agent class label set) is given, edge labels are
    checked against it and, if the file asks for implicit self-loops, the
    missing (state, label) pairs are completed.
    """
    doc = load_json(text)
    diags: list[Diagnostic] = []
    for key in ("time_horizon", "states", "initial", "final", "edges"):
        if key not in doc:
            diags.append(Diagnostic("missing-key", "dta", f"missing key {key!r}"))
    if diags:
        raise ModelError(diags)
    clock = str(doc.get("clock", "c"))
    states = tuple(str(s) for s in doc["states"])
    T = Fraction(doc["time_horizon"])
    if T <= 0:
        diags.append(Diagnostic("bad-horizon", "time_horizon", f"T = {T} must be positive"))
    known = set(states)
    if len(known) != len(states):
        diags.append(Diagnostic("duplicate-state", "states", "state declared twice"))
    initial = str(doc["initial"])
    final = frozenset(str(q) for q in doc["final"])
    for q in [initial, *final]:
        if q not in known:
            diags.append(Diagnostic("unknown-state", "dta", f"state {q!r} not declared"))
    edges = []
    for i, e in enumerate(doc["edges"]):
        where = f"edge {i}"
        try:
            guard = parse_guard(str(e.get("guard", "true")), clock)
        except ModelError as exc:
            diags.extend(exc.diagnostics)
            continue
        edge = DTAEdge(str(e["from"]), str(e["label"]), guard, bool(e.get("reset", False)), str(e["to"]))
        for q in (edge.source, edge.target):
            if q not in known:
                diags.append(Diagnostic("unknown-state", where, f"state {q!r} not declared"))
        if labels is not None and edge.label not in labels:
            diags.append(Diagnostic("unknown-label", where, f"label {edge.label!r} not in the agent class"))
        if edge.source in final and edge.target != edge.source:
            diags.append(Diagnostic("absorption", where, f"final state {edge.source!r} has an outgoing edge"))
        edges.append(edge)
    if diags:
        raise ModelError(diags)
    dta = DTA(T, states, initial, final, tuple(edges), clock, bool(doc.get("implicit_self_loops", True)))
    if labels is not None and dta.implicit_self_loops:
        dta = with_self_loops(dta, labels)
    return dta


def check_determinism(dta: DTA, labels: Iterable[str]) -> list[Diagnostic]:
    """Find (state, label, clock value) triples with zero or several enabled edges.

    Witness points are the midpoints between consecutive constants, one
    point past the largest constant, zero, and every guard constant.
    """
    consts = sorted(dta.constants | {Fraction(0)})
    # interior witnesses first: a violation on a whole interval is the informative one
    points = [(a + b) / 2 for a, b in zip(consts, consts[1:])]
    points.append(consts[-1] + 1)
    points += consts
    out = []
    for q in dta.states:
        for a in labels:
            edges = dta.outgoing(q, a)
            for v in points:
                n = sum(e.guard.holds(v) for e in edges)
                if n != 1:
                    kind = "missing-edge" if n == 0 else "overlap"
                    out.append(Diagnostic(kind, f"state {q!r}, label {a!r}", f"{n} edges enabled at c={v}"))
                    break
    return out


def monitor_step(dta: DTA, m: MonitorState, dt: float, label: str) -> MonitorState:
    """Let ``dt`` time units pass, then read ``label``."""
    eta = m.eta + dt
    if m.q in dta.final:
        return MonitorState(m.q, eta)
    enabled = [e for e in dta.outgoing(m.q, label) if e.guard.holds(eta)]
    if len(enabled) != 1:
        raise NoEnabledEdge(f"{len(enabled)} edges enabled in {m.q!r} on {label!r} at c={eta}")
    e = enabled[0]
    return MonitorState(e.target, 0.0 if e.reset else eta)


def accepts(dta: DTA, word: Sequence[tuple[float, str]], horizon=None) -> bool:
    """Run the monitor over a timed word of (delay, label) pairs."""
    horizon = dta.time_horizon if horizon is None else horizon
    m = MonitorState(dta.initial)
    t = 0.0
    for dt, label in word:
        t += dt
        if t > horizon:
            break
        m = monitor_step(dta, m, dt, label)
        if m.q in dta.final:
            return True
    return m.q in dta.final
