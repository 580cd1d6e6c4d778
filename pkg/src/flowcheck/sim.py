"""Exact stochastic simulation of the finite population with DTA monitoring.

Replications run in compiled kernels.  Each replication draws from its own
SplitMix64 stream keyed by ``(seed, replication index)``, so results do not
depend on scheduling or on the number of worker threads.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
from numba import njit, prange

from . import expr as ex
from .dta import DTA
from .model import PopulationModel

log = logging.getLogger(__name__)

# the TBB layer probe warns on older TBB builds; workqueue is always present
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
UNIT = 1.0 / 9007199254740992.0  # 2**-53

OK, RATE_OVERFLOW, NO_EDGE, NEGATIVE_RATE = 0, 1, 2, 3
_STATUS = {
    RATE_OVERFLOW: "non-finite total rate",
    NO_EDGE: "the monitor has no single enabled edge",
    NEGATIVE_RATE: "a rate evaluated below zero",
}
_OPS = {"<": 0, "<=": 1, ">=": 2, ">": 3}
TRACE_CAP = 1_000_000


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    runs: int
    seed: int = 0
    T: float | None = None
    record_grid: np.ndarray | None = None
    jobs: int | None = None

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")


@dataclass(frozen=True)
class SimEstimate:
    estimate: float
    ci95: float
    runs: int

    @classmethod
    def from_hits(cls, hits: int, runs: int) -> "SimEstimate":
        p = hits / runs
        return cls(p, 1.96 * math.sqrt(p * (1.0 - p) / runs), runs)


@dataclass(frozen=True)
class MeanFraction:
    times: np.ndarray
    mean: np.ndarray
    ci95: np.ndarray
    runs: int


# ---------------------------------------------------------------- kernels


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _stream(seed, index):
    st = np.empty(1, dtype=np.uint64)
    st[0] = _mix(seed ^ _mix(index * GAMMA + GAMMA))
    return st


@njit(cache=True, inline="always")
def _uniform(st):
    st[0] += GAMMA
    return np.float64(_mix(st[0]) >> np.uint64(11)) * UNIT


@njit(cache=True)
def _eval(ops, args, n, x, stack):
    sp = 0
    for i in range(n):
        o = ops[i]
        if o == 0:
            stack[sp] = args[i]
            sp += 1
        elif o == 1:
            stack[sp] = x[int(args[i])]
            sp += 1
        elif o == 6:
            stack[sp - 1] = -stack[sp - 1]
        else:
            b = stack[sp - 1]
            a = stack[sp - 2]
            sp -= 1
            if o == 2:
                r = a + b
            elif o == 3:
                r = a - b
            elif o == 4:
                r = a * b
            elif b == 0.0:
                r = np.nan
            else:
                r = a / b
            stack[sp - 1] = r
    return stack[0]


@njit(cache=True)
def _rates(X, N, ops, args, lens, demand, xhat, stack, out):
    """Fill ``out`` with size-N rates; returns (total, status)."""
    for s in range(X.shape[0]):
        xhat[s] = X[s] / N
    total = 0.0
    for g in range(out.shape[0]):
        enabled = True
        for s in range(X.shape[0]):
            if X[s] < demand[g, s]:
                enabled = False
                break
        if not enabled:
            out[g] = 0.0
            continue
        f = _eval(ops[g], args[g], lens[g], xhat, stack)
        if not np.isfinite(f):
            return np.nan, RATE_OVERFLOW
        if f < 0.0:
            if f < -1e-12:
                return np.nan, NEGATIVE_RATE
            f = 0.0
        out[g] = N * f
        total += out[g]
    if not np.isfinite(total):
        return np.nan, RATE_OVERFLOW
    return total, OK


@njit(cache=True)
def _pick(rates, total, u):
    target = u * total
    acc = 0.0
    last = 0
    for g in range(rates.shape[0]):
        if rates[g] > 0.0:
            last = g
            acc += rates[g]
            if target < acc:
                return g
    return last


@njit(cache=True)
def _monitor(q, eta, lab, n_labels, e_lo, e_hi, e_natoms, e_op, e_bound, e_reset, e_target):
    """Return (new q, reset flag) or (-1, 0) when not exactly one edge is enabled."""
    key = q * n_labels + lab
    found = -1
    for e in range(e_lo[key], e_hi[key]):
        ok = True
        for a in range(e_natoms[e]):
            b = e_bound[e, a]
            op = e_op[e, a]
            if op == 0:
                ok = eta < b
            elif op == 1:
                ok = eta <= b
            elif op == 2:
                ok = eta >= b
            else:
                ok = eta > b
            if not ok:
                break
        if ok:
            if found >= 0:
                return -1, 0
            found = e
    if found < 0:
        return -1, 0
    return e_target[found], e_reset[found]


@njit(cache=True)
def _tagged_run(seed, index, x0, N, ops, args, lens, update, demand,
                slot_src, slot_lab, slot_tgt, nslots, s0,
                q0, final, n_labels, e_lo, e_hi, e_natoms, e_op, e_bound, e_reset, e_target,
                T, trace_t, trace_l):
    """One replication; returns (acceptance time or inf, status, trace length)."""
    st = _stream(seed, index)
    X = x0.copy()
    n_states = X.shape[0]
    xhat = np.empty(n_states)
    stack = np.empty(max(1, ops.shape[1]))
    rates = np.empty(ops.shape[0])
    taken = np.zeros(n_states, dtype=np.int64)
    s = s0
    q = q0
    reset_at = 0.0
    ntrace = 0
    if final[q]:
        return 0.0, OK, ntrace
    t = 0.0
    while True:
        total, status = _rates(X, N, ops, args, lens, demand, xhat, stack, rates)
        if status != OK:
            return np.inf, status, ntrace
        if total <= 0.0:
            break
        t += -math.log(1.0 - _uniform(st)) / total
        if t > T:
            break
        g = _pick(rates, total, _uniform(st))
        taken[:] = 0
        part = -1
        for k in range(nslots[g]):
            src = slot_src[g, k]
            if part < 0 and src == s:
                if _uniform(st) * (X[src] - taken[src]) < 1.0:
                    part = k
            taken[src] += 1
        for j in range(n_states):
            X[j] += update[g, j]
        if part >= 0:
            lab = slot_lab[g, part]
            s = slot_tgt[g, part]
            if ntrace < trace_t.shape[0]:
                trace_t[ntrace] = t
                trace_l[ntrace] = lab
                ntrace += 1
            nq, rs = _monitor(q, t - reset_at, lab, n_labels, e_lo, e_hi, e_natoms, e_op, e_bound,
                              e_reset, e_target)
            if nq < 0:
                return np.inf, NO_EDGE, ntrace
            q = nq
            if rs:
                reset_at = t
            if final[q]:
                return t, OK, ntrace
    return np.inf, OK, ntrace


@njit(cache=True, parallel=True)
def _tagged_batch(seed, first, runs, x0, N, ops, args, lens, update, demand,
                  slot_src, slot_lab, slot_tgt, nslots, s0,
                  q0, final, n_labels, e_lo, e_hi, e_natoms, e_op, e_bound, e_reset, e_target, T):
    times = np.empty(runs)
    status = np.zeros(runs, dtype=np.int64)
    for r in prange(runs):
        tt = np.empty(0)
        tl = np.empty(0, dtype=np.int64)
        times[r], status[r], _ = _tagged_run(
            seed, np.uint64(first + r), x0, N, ops, args, lens, update, demand,
            slot_src, slot_lab, slot_tgt, nslots, s0,
            q0, final, n_labels, e_lo, e_hi, e_natoms, e_op, e_bound, e_reset, e_target, T, tt, tl)
    return times, status


@njit(cache=True)
def _population_run(seed, index, x0, N, ops, args, lens, update, demand,
                    slot_src, slot_lab, slot_tgt, nslots,
                    q0, final, n_labels, e_lo, e_hi, e_natoms, e_op, e_bound, e_reset, e_target,
                    grid, out):
    """Every agent carries a monitor; ``out[k]`` is the accepted fraction at ``grid[k]``."""
    st = _stream(seed, index)
    X = x0.copy()
    n_states = X.shape[0]
    xhat = np.empty(n_states)
    stack = np.empty(max(1, ops.shape[1]))
    rates = np.empty(ops.shape[0])
    taken = np.zeros(n_states, dtype=np.int64)
    members = np.empty((n_states, N), dtype=np.int64)
    pos = np.empty(N, dtype=np.int64)
    state = np.empty(N, dtype=np.int64)
    q = np.full(N, q0, dtype=np.int64)
    reset_at = np.zeros(N)
    picked = np.empty(nslots.max() if nslots.shape[0] else 1, dtype=np.int64)
    a = 0
    for s in range(n_states):
        for i in range(X[s]):
            members[s, i] = a
            pos[a] = i
            state[a] = s
            a += 1
    accepted = N if final[q0] else 0
    T = grid[-1]
    k = 0
    t = 0.0
    while True:
        total, status = _rates(X, N, ops, args, lens, demand, xhat, stack, rates)
        if status != OK:
            return status
        t_next = np.inf
        if total > 0.0:
            t_next = t - math.log(1.0 - _uniform(st)) / total
        while k < grid.shape[0] and grid[k] < t_next:
            out[k] = accepted / N
            k += 1
        if t_next > T:
            break
        t = t_next
        g = _pick(rates, total, _uniform(st))
        taken[:] = 0
        for j in range(nslots[g]):
            src = slot_src[g, j]
            lo = taken[src]
            r = lo + int(_uniform(st) * (X[src] - lo))
            ag = members[src, r]
            other = members[src, lo]
            members[src, lo] = ag
            pos[ag] = lo
            members[src, r] = other
            pos[other] = r
            picked[j] = ag
            taken[src] += 1
        for j in range(nslots[g]):
            ag = picked[j]
            src = slot_src[g, j]
            dst = slot_tgt[g, j]
            p = pos[ag]
            last = members[src, X[src] - 1]
            members[src, p] = last
            pos[last] = p
            X[src] -= 1
            members[dst, X[dst]] = ag
            pos[ag] = X[dst]
            X[dst] += 1
            state[ag] = dst
            if not final[q[ag]]:
                nq, rs = _monitor(q[ag], t - reset_at[ag], slot_lab[g, j], n_labels, e_lo, e_hi,
                                  e_natoms, e_op, e_bound, e_reset, e_target)
                if nq < 0:
                    return NO_EDGE
                q[ag] = nq
                if rs:
                    reset_at[ag] = t
                if final[nq]:
                    accepted += 1
    return OK


@njit(cache=True, parallel=True)
def _population_batch(seed, runs, x0, N, ops, args, lens, update, demand,
                      slot_src, slot_lab, slot_tgt, nslots,
                      q0, final, n_labels, e_lo, e_hi, e_natoms, e_op, e_bound, e_reset, e_target, grid):
    out = np.zeros((runs, grid.shape[0]))
    status = np.zeros(runs, dtype=np.int64)
    for r in prange(runs):
        status[r] = _population_run(
            seed, np.uint64(r), x0, N, ops, args, lens, update, demand,
            slot_src, slot_lab, slot_tgt, nslots,
            q0, final, n_labels, e_lo, e_hi, e_natoms, e_op, e_bound, e_reset, e_target, grid, out[r])
    return out, status


# ---------------------------------------------------------------- compilation of inputs


@dataclass(frozen=True)
class _Program:
    x0: np.ndarray
    N: int
    ops: np.ndarray
    args: np.ndarray
    lens: np.ndarray
    update: np.ndarray
    demand: np.ndarray
    slot_src: np.ndarray
    slot_lab: np.ndarray
    slot_tgt: np.ndarray
    nslots: np.ndarray
    labels: tuple
    q0: int
    final: np.ndarray
    n_labels: int
    e_lo: np.ndarray
    e_hi: np.ndarray
    e_natoms: np.ndarray
    e_op: np.ndarray
    e_bound: np.ndarray
    e_reset: np.ndarray
    e_target: np.ndarray
    q_names: tuple

    def model_args(self):
        return (self.x0, self.N, self.ops, self.args, self.lens, self.update, self.demand,
                self.slot_src, self.slot_lab, self.slot_tgt, self.nslots)

    def dta_args(self):
        return (self.q0, self.final, self.n_labels, self.e_lo, self.e_hi, self.e_natoms, self.e_op,
                self.e_bound, self.e_reset, self.e_target)


def compile_program(model: PopulationModel, dta: DTA) -> _Program:
    states = model.states
    sidx = model.state_index
    labels = model.agent_class.labels
    lidx = {l: i for i, l in enumerate(labels)}
    code = [ex.to_rpn(g.rate, states, model.parameters) for g in model.transitions]
    width = max(len(o) for o, _ in code)
    G = len(code)
    ops = np.zeros((G, width), dtype=np.int64)
    args = np.zeros((G, width))
    lens = np.zeros(G, dtype=np.int64)
    for g, (o, a) in enumerate(code):
        ops[g, :len(o)] = o
        args[g, :len(a)] = a
        lens[g] = len(o)
    slots = [[lbl for lbl, c in g.sync for _ in range(c)] for g in model.transitions]
    ms = max(len(s) for s in slots)
    slot_src = np.zeros((G, ms), dtype=np.int64)
    slot_lab = np.zeros((G, ms), dtype=np.int64)
    slot_tgt = np.zeros((G, ms), dtype=np.int64)
    demand = np.zeros((G, len(states)), dtype=np.int64)
    for g, sl in enumerate(slots):
        for k, lbl in enumerate(sl):
            t = model.agent_class.by_label[lbl]
            slot_src[g, k] = sidx[t.source]
            slot_lab[g, k] = lidx[lbl]
            slot_tgt[g, k] = sidx[t.target]
            demand[g, sidx[t.source]] += 1
    nslots = np.array([len(s) for s in slots], dtype=np.int64)
    x0 = np.array([model.initial.get(s, 0) for s in states], dtype=np.int64)

    qidx = {q: i for i, q in enumerate(dta.states)}
    edges = sorted((e for e in dta.edges if e.label in lidx), key=lambda e: (qidx[e.source], lidx[e.label]))
    nl = len(labels)
    e_lo = np.zeros(len(dta.states) * nl, dtype=np.int64)
    e_hi = np.zeros(len(dta.states) * nl, dtype=np.int64)
    for n, e in enumerate(edges):
        key = qidx[e.source] * nl + lidx[e.label]
        if e_hi[key] == 0:
            e_lo[key] = n
        e_hi[key] = n + 1
    na = max([len(e.guard.atoms) for e in edges] + [1])
    e_natoms = np.array([len(e.guard.atoms) for e in edges], dtype=np.int64)
    e_op = np.zeros((len(edges), na), dtype=np.int64)
    e_bound = np.zeros((len(edges), na))
    for n, e in enumerate(edges):
        for a, atom in enumerate(e.guard.atoms):
            e_op[n, a] = _OPS[atom.op]
            e_bound[n, a] = float(atom.bound)
    e_reset = np.array([int(e.reset) for e in edges], dtype=np.int64)
    e_target = np.array([qidx[e.target] for e in edges], dtype=np.int64)
    final = np.array([q in dta.final for q in dta.states])
    return _Program(x0, model.N, ops, args, lens, model.update_matrix.astype(np.int64), demand,
                    slot_src, slot_lab, slot_tgt, nslots, labels, qidx[dta.initial], final, nl,
                    e_lo, e_hi, e_natoms, e_op, e_bound, e_reset, e_target, dta.states)


def _seed(seed: int) -> np.uint64:
    return np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)


def default_tagged(model: PopulationModel) -> str:
    """First class state with a positive initial count."""
    return next(s for s in model.states if model.initial.get(s, 0) > 0)


def _check(status: np.ndarray) -> None:
    bad = status[status != OK]
    if len(bad):
        raise SimulationError(f"{len(bad)} replications failed: {_STATUS[int(bad[0])]}")


def _threads(jobs: int | None):
    jobs = jobs or os.cpu_count() or 1
    numba.set_num_threads(max(1, min(jobs, numba.config.NUMBA_NUM_THREADS)))


def simulate_tagged(model: PopulationModel, dta: DTA, T=None, seed: int = 0, index: int = 0,
                    tagged: str | None = None, trace: bool = False):
    """One replication: ``(accepted, acceptance time, trace)``.

    The trace lists ``(time, label)`` of the tagged agent's moves when
    ``trace`` is set (capped at a million events).
    """
    prog = compile_program(model, dta)
    T = float(dta.time_horizon if T is None else T)
    s0 = model.state_index[tagged or default_tagged(model)]
    cap = TRACE_CAP if trace else 0
    tt = np.empty(cap)
    tl = np.empty(cap, dtype=np.int64)
    t_acc, status, n = _tagged_run(_seed(seed), np.uint64(index), *prog.model_args(), s0, *prog.dta_args(),
                                   T, tt, tl)
    _check(np.array([status]))
    events = [(float(tt[i]), prog.labels[tl[i]]) for i in range(n)]
    return bool(np.isfinite(t_acc)), float(t_acc), events


def acceptance_times(model: PopulationModel, dta: DTA, cfg: SimConfig, tagged: str | None = None) -> np.ndarray:
    """Acceptance time of the tagged agent in each replication (inf if never)."""
    prog = compile_program(model, dta)
    T = float(dta.time_horizon if cfg.T is None else cfg.T)
    s0 = model.state_index[tagged or default_tagged(model)]
    _threads(cfg.jobs)
    times, status = _tagged_batch(_seed(cfg.seed), 0, cfg.runs, *prog.model_args(), s0, *prog.dta_args(), T)
    _check(status)
    return times


def satisfaction_curve(times: np.ndarray, grid: Sequence[float]) -> np.ndarray:
    """Empirical probability of acceptance by each grid time."""
    ordered = np.sort(times)
    return np.searchsorted(ordered, np.asarray(grid, dtype=float), side="right") / len(times)


def estimate_satisfaction(model: PopulationModel, dta: DTA, T=None, cfg: SimConfig | None = None,
                          tagged: str | None = None) -> SimEstimate:
    """Monte Carlo estimate of the tagged agent's acceptance probability by ``T``."""
    cfg = cfg or SimConfig(runs=10_000)
    T = float(dta.time_horizon if T is None else T)
    times = acceptance_times(model, dta, SimConfig(cfg.runs, cfg.seed, T, None, cfg.jobs), tagged)
    return SimEstimate.from_hits(int(np.sum(times <= T)), cfg.runs)


MEMORY_BUDGET = 2 * 1024**3


def estimate_mean_fraction(model: PopulationModel, dta: DTA, T=None, cfg: SimConfig | None = None) -> MeanFraction:
    """Mean fraction of agents whose own monitor accepted, on ``cfg.record_grid``."""
    cfg = cfg or SimConfig(runs=100)
    if cfg.T is not None:
        T = cfg.T
    T = float(dta.time_horizon if T is None else T)
    grid = np.linspace(0.0, T, 101) if cfg.record_grid is None else np.asarray(cfg.record_grid, dtype=float)
    prog = compile_program(model, dta)
    need = cfg.runs * grid.size * 8 + min(cfg.runs, numba.get_num_threads()) * model.N * 8 * (len(model.states) + 4)
    if need > MEMORY_BUDGET:
        fit = max(1, int(cfg.runs * MEMORY_BUDGET / need))
        raise MemoryError(f"about {need / 1e9:.1f} GB needed; try runs <= {fit}")
    _threads(cfg.jobs)
    out, status = _population_batch(_seed(cfg.seed), cfg.runs, *prog.model_args(), *prog.dta_args(), grid)
    _check(status)
    mean = out.mean(axis=0)
    sd = out.std(axis=0, ddof=1) if cfg.runs > 1 else np.zeros_like(mean)
    return MeanFraction(grid, mean, 1.96 * sd / math.sqrt(cfg.runs), cfg.runs)


def to_csv(rows: Sequence[tuple[str, float, float, int]]) -> str:
    lines = ["quantity,estimate,ci95,runs"]
    for name, est, ci, runs in rows:
        lines.append(f"{name},{est:.17g},{ci:.17g},{runs}")
    return "\n".join(lines) + "\n"
