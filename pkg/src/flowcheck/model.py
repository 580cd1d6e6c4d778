"""Population models: one agent class, synchronised global transitions.

Rates are given directly as density limits ``f(x)`` over normalized counts;
the size-N rate used by the simulator is ``N * f(X / N)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from . import expr as ex

EPS_DIV = 1e-12


@dataclass(frozen=True)
class Diagnostic:
    code: str
    where: str
    message: str

    def __str__(self) -> str:
        return f"{self.where}: [{self.code}] {self.message}"


class ModelError(ValueError):
    """A model or property file was rejected; carries the diagnostics."""

    def __init__(self, diagnostics: Sequence[Diagnostic] | str):
        if isinstance(diagnostics, str):
            diagnostics = [Diagnostic("syntax", "<input>", diagnostics)]
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class LocalTransition:
    label: str
    source: str
    target: str


@dataclass(frozen=True)
class AgentClass:
    name: str
    states: tuple[str, ...]
    transitions: tuple[LocalTransition, ...]

    @cached_property
    def by_label(self) -> dict[str, LocalTransition]:
        return {t.label: t for t in self.transitions}

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(t.label for t in self.transitions)


@dataclass(frozen=True)
class GlobalTransition:
    name: str
    sync: tuple[tuple[str, int], ...]  # (label, multiplicity)
    rate: ex.Expr
    update: tuple[int, ...] = ()


@dataclass(frozen=True)
class PopulationModel:
    parameters: Mapping[str, Fraction]
    agent_class: AgentClass
    transitions: tuple[GlobalTransition, ...]
    initial: Mapping[str, int]
    N: int

    @property
    def states(self) -> tuple[str, ...]:
        return self.agent_class.states

    @cached_property
    def state_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.states)}

    @cached_property
    def x0(self) -> np.ndarray:
        """Initial normalized counts."""
        return np.array([self.initial.get(s, 0) for s in self.states], dtype=float) / self.N

    @cached_property
    def update_matrix(self) -> np.ndarray:
        """Update vectors as rows, shape (n_transitions, n_states)."""
        return np.array([t.update for t in self.transitions], dtype=float).reshape(
            len(self.transitions), len(self.states)
        )

    @cached_property
    def rates(self):
        """Compiled ``x -> f(x)`` for all global transitions at once."""
        return ex.compile_rates([t.rate for t in self.transitions], self.states, self.parameters)

    @cached_property
    def drift_scalar(self):
        """Compiled plain-float drift, ``list -> list``."""
        return ex.compile_scalar(
            [t.rate for t in self.transitions], self.states, self.parameters, self.update_matrix.T
        )

    @cached_property
    def participation(self) -> np.ndarray:
        """Multiplicity of each local transition (rows) in each global one."""
        labels = {t.label: i for i, t in enumerate(self.agent_class.transitions)}
        w = np.zeros((len(labels), len(self.transitions)))
        for j, g in enumerate(self.transitions):
            for label, count in g.sync:
                w[labels[label], j] += count
        return w

    @cached_property
    def label_sources(self) -> np.ndarray:
        idx = self.state_index
        return np.array([idx[t.source] for t in self.agent_class.transitions], dtype=int)

    def label_rates(self, x: np.ndarray) -> np.ndarray:
        """Per-agent rate of every local transition at normalized state ``x``.

        Entry ``l`` is ``sum_tau mult(l, tau) f_tau(x) / x_src(l)``, zero when
        the source state is (numerically) empty.  ``x`` may carry extra
        trailing axes, e.g. a batch of time points.
        """
        x = np.asarray(x, dtype=float)
        f = self.rates(x)
        flux = np.tensordot(self.participation, f, axes=(1, 0))
        occ = np.maximum(x[self.label_sources], 0.0)
        safe = np.where(occ < EPS_DIV, 1.0, occ)
        return np.where(occ < EPS_DIV, 0.0, flux / safe)


def update_vector(agent_class: AgentClass, sync: Sequence[tuple[str, int]]) -> tuple[int, ...]:
    index = {s: i for i, s in enumerate(agent_class.states)}
    v = [0] * len(agent_class.states)
    for label, count in sync:
        t = agent_class.by_label[label]
        v[index[t.target]] += count
        v[index[t.source]] -= count
    return tuple(v)


def eval_rate(expr: ex.Expr, xhat: Mapping[str, float], params: Mapping[str, float]) -> float:
    """Evaluate one rate expression at a normalized count vector."""
    value = ex.evaluate(expr, xhat, params)
    if not np.isfinite(value):
        raise ex.ExprError(f"non-finite rate {value} from {ex.to_text(expr)!r}")
    if value < 0.0:
        if value < -1e-12:
            raise ex.ExprError(f"negative rate {value} from {ex.to_text(expr)!r}")
        value = 0.0
    return value


def drift(model: PopulationModel, xhat: np.ndarray) -> np.ndarray:
    """Net flux ``sum_tau v_tau f_tau(x)`` of the fluid limit."""
    return model.update_matrix.T @ model.rates(np.asarray(xhat, dtype=float))


def validate(model: PopulationModel) -> list[Diagnostic]:
    """Report every structural problem in ``model``; an empty list means valid."""
    out: list[Diagnostic] = []
    cls = model.agent_class
    states = set()
    for s in cls.states:
        if s in states:
            out.append(Diagnostic("duplicate-state", f"class {cls.name}", f"state {s!r} declared twice"))
        states.add(s)
    labels: set[str] = set()
    for t in cls.transitions:
        where = f"local transition {t.label!r}"
        if not t.label:
            out.append(Diagnostic("empty-label", where, "label must be nonempty"))
        if t.label in labels:
            out.append(Diagnostic("duplicate-label", where, f"label {t.label!r} used twice"))
        labels.add(t.label)
        for end in (t.source, t.target):
            if end not in states:
                out.append(Diagnostic("unknown-state", where, f"state {end!r} not declared"))
    for g in model.transitions:
        where = f"global transition {g.name!r}"
        resolved = True
        if not g.sync:
            out.append(Diagnostic("empty-sync", where, "no local transitions synchronised"))
        for label, count in g.sync:
            if label not in labels:
                out.append(Diagnostic("unresolved-label", where, f"label {label!r} not defined"))
                resolved = False
            if count < 1:
                out.append(Diagnostic("bad-multiplicity", where, f"multiplicity {count} < 1"))
        for v in sorted(ex.variables(g.rate)):
            if v not in states:
                out.append(Diagnostic("unknown-state", where, f"rate references x_{v}"))
        for p in sorted(ex.parameters(g.rate)):
            if p not in model.parameters:
                out.append(Diagnostic("unknown-parameter", where, f"rate references {p!r}"))
        if sum(g.update) != 0:
            out.append(Diagnostic("conservation", where, f"update vector {g.update} does not sum to 0"))
        if resolved and not _dangling(cls, g):
            expected = update_vector(cls, g.sync)
            if tuple(g.update) != expected:
                out.append(
                    Diagnostic("update-mismatch", where, f"update {g.update} != recomputed {expected}")
                )
    for s, n in model.initial.items():
        if s not in states:
            out.append(Diagnostic("unknown-state", "initial", f"state {s!r} not declared"))
        if n < 0:
            out.append(Diagnostic("negative-count", "initial", f"{s}: {n}"))
    if model.N < 1:
        out.append(Diagnostic("bad-N", "N", f"population size {model.N} must be positive"))
    total = sum(model.initial.values())
    if total != model.N:
        out.append(Diagnostic("count-mismatch", "initial", f"initial counts sum to {total}, N = {model.N}"))
    return out


def _need(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ModelError([Diagnostic("missing-key", where, f"missing key {key!r}")])
    return obj[key]


def load_json(text: str) -> dict:
    try:
        return json.loads(text, parse_float=Fraction)
    except json.JSONDecodeError as exc:
        raise ModelError(
            [Diagnostic("syntax", f"line {exc.lineno}, column {exc.colno}", exc.msg)]
        ) from None


def parse_population_model(text: str) -> PopulationModel:
    """Parse a JSON model file; raises :class:`ModelError` unless fully valid."""
    doc = load_json(text)
    params = {k: Fraction(v) for k, v in doc.get("parameters", {}).items()}
    cdoc = _need(doc, "class", "model")
    transitions = tuple(
        LocalTransition(
            str(_need(t, "label", "class.transitions")),
            str(_need(t, "from", "class.transitions")),
            str(_need(t, "to", "class.transitions")),
        )
        for t in _need(cdoc, "transitions", "class")
    )
    cls = AgentClass(str(cdoc.get("name", "A")), tuple(_need(cdoc, "states", "class")), transitions)
    globals_: list[GlobalTransition] = []
    diags: list[Diagnostic] = []
    for i, g in enumerate(_need(doc, "global_transitions", "model")):
        name = str(g.get("name", f"tau_{i}"))
        sync = tuple((str(_need(s, "label", name)), int(s.get("count", 1))) for s in _need(g, "sync", name))
        try:
            rate = ex.parse_expr(str(_need(g, "rate", name)))
        except ex.ExprError as exc:
            diags.append(Diagnostic("syntax", f"global transition {name!r}", str(exc)))
            continue
        globals_.append(GlobalTransition(name, sync, rate))
    if diags:
        raise ModelError(diags)
    labels = set(cls.labels)
    globals_ = [
        replace(g, update=update_vector(cls, g.sync))
        if all(lbl in labels for lbl, _ in g.sync) and not _dangling(cls, g)
        else replace(g, update=(0,) * len(cls.states))
        for g in globals_
    ]
    initial = {str(k): int(v) for k, v in _need(doc, "initial", "model").items()}
    model = PopulationModel(params, cls, tuple(globals_), initial, int(_need(doc, "N", "model")))
    diags = validate(model)
    if diags:
        raise ModelError(diags)
    return model


def _dangling(cls: AgentClass, g: GlobalTransition) -> bool:
    known = set(cls.states)
    for label, _ in g.sync:
        t = cls.by_label.get(label)
        if t is None or t.source not in known or t.target not in known:
            return True
    return False


def _num(v: Fraction):
    v = Fraction(v)
    return int(v) if v.denominator == 1 else float(v)


def model_to_json(model: PopulationModel) -> str:
    """Serialise ``model`` in the input file format."""
    cls = model.agent_class
    doc = {
        "parameters": {k: _num(v) for k, v in model.parameters.items()},
        "class": {
            "name": cls.name,
            "states": list(cls.states),
            "transitions": [{"label": t.label, "from": t.source, "to": t.target} for t in cls.transitions],
        },
        "global_transitions": [
            {
                "name": g.name,
                "sync": [{"label": lbl, "count": c} for lbl, c in g.sync],
                "rate": ex.to_text(g.rate),
            }
            for g in model.transitions
        ],
        "initial": dict(model.initial),
        "N": model.N,
    }
    return json.dumps(doc, indent=2)


def with_population(model: PopulationModel, N: int) -> PopulationModel:
    """Rescale the initial counts to population ``N`` (largest remainder rounding)."""
    if N < 1:
        raise ValueError("N must be positive")
    states = list(model.initial)
    shares = [Fraction(model.initial[s] * N, model.N) for s in states]
    counts = [int(sh) for sh in shares]
    order = sorted(range(len(states)), key=lambda i: (-(shares[i] - counts[i]), i))
    for i in order[: N - sum(counts)]:
        counts[i] += 1
    return replace(model, initial=dict(zip(states, counts)), N=N)
