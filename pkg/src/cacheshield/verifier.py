"""Counterexample-guided abstraction refinement for cache side-channel freedom.

A program is side-channel free under an attack model when every secret
yields the same observation.  The check asks the solver for two traces with
different observations under the current abstraction.  Each trace is then
replayed against the full cache semantics; a replay that fails produces an
unsat core of predicate definitions which are added to the tracked set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

from . import terms as T
from .cache import CacheConfig, Observation, TimeObs, TraceObs, observe
from .program import Program, unroll
from .solver import Formula, Sat, Solver, Unknown, Unsat
from .symbolic import (SymbolicSystem, execute_symbolic, guard_name, initial_abstraction,
                       miss_name, rewrite)


class RefinementStuck(RuntimeError):
    pass


class InconclusiveError(RuntimeError):
    """A query came back unknown, so no verdict may be drawn."""


@dataclass(frozen=True)
class Abstraction:
    tracked: frozenset
    initial: frozenset
    history: tuple = ()  # predicates added per refinement round

    @classmethod
    def start(cls, sys: SymbolicSystem) -> "Abstraction":
        init = initial_abstraction(sys)
        return cls(init, init)

    @property
    def rounds(self) -> int:
        return len(self.history)

    def refine(self, core) -> "Abstraction":
        new = frozenset(core) - self.tracked
        if not new:
            raise RefinementStuck("unsat core adds no untracked predicate")
        return Abstraction(self.tracked | new, self.initial, self.history + (tuple(sorted(new)),))


@dataclass(frozen=True)
class CexTrace:
    misses: tuple  # per access, 0/1
    guards: tuple  # per access, bool
    observation: Observation
    witness: dict | None = None  # secret assignment, set once the trace is proven feasible

    @property
    def bits(self) -> tuple:
        return tuple(m for m, g in zip(self.misses, self.guards) if g)

    def with_witness(self, w: dict) -> "CexTrace":
        return CexTrace(self.misses, self.guards, self.observation, w)


def extract_miss_vector(model: dict, sys: SymbolicSystem) -> tuple[tuple, tuple]:
    """Per-access miss bits and executed flags from a model of the system."""
    misses, guards = [], []
    for i in range(1, sys.n + 1):
        g = sys.guards[i - 1]
        gv = g.value if g.is_const else model.get(guard_name(i))
        mv = model.get(miss_name(i))
        if gv is None or mv is None:
            raise KeyError(f"model lacks guard or miss value for access {i}")
        guards.append(bool(gv))
        misses.append(1 if mv and gv else 0)
    return tuple(misses), tuple(guards)


def trace_of(model: dict, sys: SymbolicSystem, attack: str) -> CexTrace:
    misses, guards = extract_miss_vector(model, sys)
    bits = [m for m, g in zip(misses, guards) if g]
    return CexTrace(misses, guards, observe(attack, bits))


# ---------------------------------------------------------------------------
# observation constraints


def _miss(i: int) -> T.Term:
    return T.var(miss_name(i), T.BOOL)


def _cnt(i: int) -> T.Term:
    return T.var(f"cnt.{i}", T.INT)


def add_counters(sys: SymbolicSystem, f: Formula) -> Formula:
    """Declare ``cnt.i`` = number of executed accesses among the first ``i``."""
    f = f.copy()
    f.declare("cnt.0", T.INT)
    f.add(T.Eq(_cnt(0), T.intconst(0)))
    for i in range(1, sys.n + 1):
        f.declare(f"cnt.{i}", T.INT)
        f.add(T.Eq(_cnt(i), T.Sum([_cnt(i - 1), T.BoolToInt(sys.guards[i - 1])])))
    return f


def observation_equals(sys: SymbolicSystem, o: Observation) -> T.Term:
    """Holds exactly when the trace's observation is ``o``.

    Trace observations compare the executed projection position by position:
    the executed access that follows ``p`` earlier executed accesses must
    carry bit ``o[p]`` and exactly ``len(o)`` accesses execute.  Needs the
    counters from :func:`add_counters`.
    """
    n = sys.n
    if isinstance(o, TimeObs):
        count = T.Sum(T.BoolToInt(T.And(sys.guards[i - 1], _miss(i))) for i in range(1, n + 1))
        return T.Eq(count, T.intconst(o.misses))
    bits = o.bits
    parts = [T.Eq(_cnt(n), T.intconst(len(bits)))]
    for i in range(1, n + 1):
        pos = [T.Implies(T.Eq(_cnt(i - 1), T.intconst(p)), _miss(i) if bits[p] else T.Not(_miss(i)))
               for p in range(min(len(bits), i))]
        parts.append(T.Implies(sys.guards[i - 1], T.And(*pos)))
    return T.And(*parts)


def exclude_vector(sys: SymbolicSystem, misses: Sequence[int], guards: Sequence[bool]) -> T.Term:
    """Rules out one abstract trace (guard and miss valuation of every access)."""
    lits = []
    for i in range(1, sys.n + 1):
        g = sys.guards[i - 1]
        lits.append(g if guards[i - 1] else T.Not(g))
        if guards[i - 1]:
            lits.append(_miss(i) if misses[i - 1] else T.Not(_miss(i)))
    return T.Not(T.And(*lits))


def query_values(sys: SymbolicSystem) -> list[str]:
    names = list(sys.secret_names)
    names += [guard_name(i) for i in range(1, sys.n + 1) if not sys.guards[i - 1].is_const]
    names += [miss_name(i) for i in range(1, sys.n + 1)]
    return names


def find_trace(sys: SymbolicSystem, f: Formula, attack: str, solver: Solver,
               extra: Sequence[T.Term] = ()) -> CexTrace | None:
    """One abstract trace satisfying ``f`` and ``extra``, or None."""
    g = f.copy()
    for t in extra:
        g.add(t)
    r = solver.check(g, values=query_values(sys))
    if isinstance(r, Unknown):
        raise InconclusiveError(f"solver returned unknown: {r.reason}")
    if isinstance(r, Unsat):
        return None
    return trace_of(r.model, sys, attack)


def property_query(attack: str, sys: SymbolicSystem, f: Formula, solver: Solver,
                   exclusions: Sequence[T.Term] = ()) -> tuple[CexTrace, CexTrace] | None:
    """Two abstract traces with distinct observations, or None if none exist."""
    if attack == "trace":
        f = add_counters(sys, f)
    tr1 = find_trace(sys, f, attack, solver, exclusions)
    if tr1 is None:
        return None
    tr2 = find_trace(sys, f, attack, solver,
                     list(exclusions) + [T.Not(observation_equals(sys, tr1.observation))])
    if tr2 is None:
        return None
    return tr1, tr2


@dataclass(frozen=True)
class Feasible:
    witness: dict


@dataclass(frozen=True)
class Spurious:
    core: frozenset


def _def_label(name: str) -> str:
    return "def." + name


def feasibility_check(tr: CexTrace, sys: SymbolicSystem, ab: Abstraction, solver: Solver) -> Feasible | Spurious:
    """Replay ``tr`` under the complete predicate semantics.

    Tracked definitions are asserted as is; untracked ones carry labels so
    that an unsat core names the predicates that rule the trace out.  The
    trace's guard valuation is pinned along with its miss bits.
    """
    f = rewrite(sys, ab.tracked)
    for i in range(1, sys.n + 1):
        g = sys.guards[i - 1]
        f.add(g if tr.guards[i - 1] else T.Not(g))
        f.add(_miss(i) if tr.misses[i - 1] else T.Not(_miss(i)))
    assumptions = {_def_label(p.name): T.Eq(p.var, p.definition)
                   for p in sys.universe if p.name not in ab.tracked}
    r = solver.check(f, assumptions, values=sys.secret_names, minimize_core=True)
    if isinstance(r, Unknown):
        raise InconclusiveError(f"feasibility check returned unknown: {r.reason}")
    if isinstance(r, Sat):
        return Feasible({n: int(r.model[n]) for n in sys.secret_names})
    return Spurious(frozenset(lbl[len("def."):] for lbl in r.core if lbl.startswith("def.")))


# ---------------------------------------------------------------------------
# the loop


@dataclass
class VerificationOutcome:
    verdict: str  # "verified" | "violation" | "inconclusive"
    rounds: int
    tracked: int
    universe: int
    abstraction: Abstraction | None = None
    traces: tuple = ()
    reason: str = ""
    wall_time: float = 0.0
    spurious: list = field(default_factory=list)  # (round, trace, core) per spurious trace

    @property
    def verified(self) -> bool:
        return self.verdict == "verified"

    def to_dict(self) -> dict:
        d = {
            "verdict": self.verdict,
            "rounds": self.rounds,
            "predicates_tracked": self.tracked,
            "predicates_total": self.universe,
            "wall_time_s": round(self.wall_time, 3),
        }
        if self.traces:
            wit = sorted(self.traces, key=lambda tr: (tr.observation, sorted(tr.witness.items())))
            d["witnesses"] = [{"secret": tr.witness, "observation": str(tr.observation)} for tr in wit]
        if self.reason:
            d["reason"] = self.reason
        return d


def Verified(ab: Abstraction, sys: SymbolicSystem, **kw) -> VerificationOutcome:
    return VerificationOutcome("verified", ab.rounds, len(ab.tracked), len(sys.universe), ab, **kw)


def run_cegar_system(sys: SymbolicSystem, attack: str, solver: Solver | None = None,
                     ab: Abstraction | None = None) -> VerificationOutcome:
    solver = solver or Solver()
    ab = ab or Abstraction.start(sys)
    start = time.monotonic()
    spurious = []

    def outcome(verdict, **kw):
        return VerificationOutcome(verdict, ab.rounds, len(ab.tracked), len(sys.universe), ab,
                                   wall_time=time.monotonic() - start, spurious=spurious, **kw)

    try:
        while True:
            pair = property_query(attack, sys, rewrite(sys, ab.tracked), solver)
            if pair is None:
                return outcome("verified")
            cores, feasible = set(), []
            for tr in pair:
                res = feasibility_check(tr, sys, ab, solver)
                if isinstance(res, Spurious):
                    spurious.append((ab.rounds, tr, res.core))
                    cores |= res.core
                else:
                    feasible.append(tr.with_witness(res.witness))
            if not cores and len(feasible) == 2:
                return outcome("violation", traces=tuple(feasible))
            ab = ab.refine(cores)
    except (InconclusiveError, RefinementStuck) as e:
        return outcome("inconclusive", reason=str(e))


def run_cegar(p: Program, cfg: CacheConfig, attack: str, solver: Solver | None = None) -> VerificationOutcome:
    """Verify ``p`` on cache ``cfg`` against attack model ``time`` or ``trace``."""
    if attack not in ("time", "trace"):
        raise ValueError(f"unknown attack model {attack!r}")
    return run_cegar_system(execute_symbolic(unroll(p), cfg), attack, solver)
