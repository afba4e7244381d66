"""Observation-class exploration and runtime patch synthesis.

Starting from a violating pair, every observation class is explored by
enumerating the feasible trace shapes (guard and miss vectors) that produce
it.  Each shape yields a monitor: the exact condition under which an input
follows that shape.  Patches then rewrite every class onto one reference
observation, either by adding misses (timing attacker) or by an action
schedule found through alignment (trace attacker).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

from . import terms as T
from .cache import (Observation, InjectHit, InjectMiss, Invalidate, TimeObs, TraceObs,
                    action_from_dict, action_to_dict, apply_actions, parse_observation)
from .program import Program, unroll
from .solver import Solver
from .symbolic import SymbolicSystem, execute_symbolic, guard_name, miss_name, rewrite
from .verifier import (Abstraction, CexTrace, Feasible, InconclusiveError, RefinementStuck,
                       VerificationOutcome, add_counters, exclude_vector, feasibility_check,
                       find_trace, observation_equals, run_cegar_system)

log = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# monitors


@dataclass(frozen=True)
class Monitor:
    """Holds for exactly the inputs whose execution follows ``trace``.

    ``nu`` is a formula over the per-access symbols ``guard.i`` and
    ``miss.i``; under the program and full cache semantics these are
    functions of the secrets, so ``nu`` is a condition on secrets.
    """

    nu: T.Term
    trace: CexTrace | None = None

    def holds(self, executed: Sequence[bool], site_misses: Sequence[int]) -> bool:
        return bool(T.evaluate(self.nu, _site_env(executed, site_misses)))


def _site_env(executed, site_misses) -> dict:
    env = {}
    for i, (g, m) in enumerate(zip(executed, site_misses), 1):
        env[guard_name(i)] = bool(g)
        env[miss_name(i)] = bool(m)
    return env


def extract_monitor(tr: CexTrace, sys: SymbolicSystem) -> Monitor:
    """Conjunction over all accesses: guard value, and hit/miss of executed ones."""
    lits = []
    for i in range(1, sys.n + 1):
        g = T.var(guard_name(i), T.BOOL)
        if tr.guards[i - 1]:
            lits.append(g)
            m = T.var(miss_name(i), T.BOOL)
            lits.append(m if tr.misses[i - 1] else T.Not(m))
        else:
            lits.append(T.Not(g))
    return Monitor(T.And(*lits), tr)


def monitor_sorts(n: int) -> dict:
    sorts = {}
    for i in range(1, n + 1):
        sorts[guard_name(i)] = T.BOOL
        sorts[miss_name(i)] = T.BOOL
    return sorts


def monitor_on_system(nu: T.Term, sys: SymbolicSystem) -> T.Term:
    """``nu`` with each guard symbol replaced by the system's guard term."""
    if not nu.free_vars():
        return nu
    subst = {guard_name(i): sys.guards[i - 1] for i in range(1, sys.n + 1)}
    return _substitute(nu, subst)


def _substitute(t: T.Term, subst: dict) -> T.Term:
    if t.op == "var":
        return subst.get(t.name, t)
    if not t.args:
        return t
    args = [_substitute(a, subst) for a in t.args]
    if t.op == "and":
        return T.And(*args)
    if t.op == "or":
        return T.Or(*args)
    if t.op == "not":
        return T.Not(args[0])
    return T.Term(t.op, tuple(args), t.sort, t.params)


# ---------------------------------------------------------------------------
# class record


@dataclass
class ClassEntry:
    observation: Observation
    monitors: list = field(default_factory=list)

    @property
    def nu(self) -> T.Term:
        return T.Or(*[m.nu for m in self.monitors])

    def holds(self, executed, site_misses) -> bool:
        return any(m.holds(executed, site_misses) for m in self.monitors)


@dataclass
class ClassRecord:
    entries: list = field(default_factory=list)
    complete: bool = False

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def observations(self) -> list:
        return [e.observation for e in self.entries]


@dataclass
class _State:
    """Exploration context: the system, current abstraction and solver."""

    sys: SymbolicSystem
    attack: str
    solver: Solver
    ab: Abstraction
    refinements: int = 0

    def formula(self):
        f = rewrite(self.sys, self.ab.tracked)
        return add_counters(self.sys, f) if self.attack == "trace" else f

    def feasible(self, tr: CexTrace) -> CexTrace | None:
        """Witnessed trace, or None after refining away a spurious one."""
        res = feasibility_check(tr, self.sys, self.ab, self.solver)
        if isinstance(res, Feasible):
            return tr.with_witness(res.witness)
        self.ab = self.ab.refine(res.core)
        self.refinements += 1
        return None


def explore_class(st: _State, seed: CexTrace) -> ClassEntry:
    """All feasible trace shapes with the seed's observation."""
    o = seed.observation
    entry = ClassEntry(o, [extract_monitor(seed, st.sys)])
    excluded = [exclude_vector(st.sys, seed.misses, seed.guards)]
    while True:
        tr = find_trace(st.sys, st.formula(), st.attack, st.solver,
                        excluded + [observation_equals(st.sys, o)])
        if tr is None:
            return entry
        tr = st.feasible(tr)
        if tr is None:
            continue
        entry.monitors.append(extract_monitor(tr, st.sys))
        excluded.append(exclude_vector(st.sys, tr.misses, tr.guards))


def next_class(st: _State, explored: ClassRecord) -> CexTrace | None:
    """A feasible trace whose observation is not yet explored, or None when done."""
    while True:
        differ = [T.Not(observation_equals(st.sys, o)) for o in explored.observations]
        tr = find_trace(st.sys, st.formula(), st.attack, st.solver, differ)
        if tr is None:
            return None
        tr = st.feasible(tr)
        if tr is not None:
            return tr


# ---------------------------------------------------------------------------
# patches


@dataclass
class Patch:
    monitor: T.Term
    model: str
    actions: list
    observation: Observation  # the class this patch rewrites
    delta: int | None = None  # timing attacker only

    def holds(self, executed, site_misses) -> bool:
        return bool(T.evaluate(self.monitor, _site_env(executed, site_misses)))

    def to_dict(self) -> dict:
        d = {"monitor": self.monitor.smt(), "model": self.model,
             "observation": str(self.observation),
             "actions": [action_to_dict(a) for a in self.actions]}
        if self.delta is not None:
            d["delta"] = self.delta
        return d

    @classmethod
    def from_dict(cls, d: dict, n_sites: int) -> "Patch":
        model = d["model"]
        nu = T.parse_term(d["monitor"], monitor_sorts(n_sites))
        delta = d.get("delta")
        if model == "time" and "actions" not in d:
            actions = [InjectMiss(0)] * int(delta)
        else:
            actions = [action_from_dict(a) for a in d.get("actions", [])]
        return cls(nu, model, actions, parse_observation(model, d["observation"]),
                   None if delta is None else int(delta))


def synth_time_patches(omega: ClassRecord) -> list[Patch]:
    """Pad every class with injected misses up to the largest miss count."""
    if any(not isinstance(e.observation, TimeObs) for e in omega):
        raise SynthesisError("timing patches need miss-count observations only")
    if not omega.entries:
        return []
    top = max(e.observation.misses for e in omega)
    out = []
    for e in omega:
        d = top - e.observation.misses
        out.append(Patch(e.nu, "time", [InjectMiss(0)] * d, e.observation, d))
    return out


INSERT_COST = 1
SUBST_COST = 2
_INF = float("inf")


def align_traces(a: Sequence[int], b: Sequence[int]) -> list | None:
    """Cheapest action schedule turning observation ``a`` into ``b``.

    Allowed edits: insert a hit or miss (cost 1) and turn a hit into a miss
    (cost 2).  Among optimal schedules the earliest insertion wins.  Returns
    None when ``b`` cannot be reached.
    """
    a, b = tuple(a), tuple(b)
    cost = _align_table(a, b)
    if cost[0][0] == _INF:
        return None
    actions = []
    i = j = 0
    while i < len(a) or j < len(b):
        here = cost[i][j]
        if j < len(b) and not (b[j] == 0 and i == 0) and INSERT_COST + cost[i][j + 1] == here:
            actions.append(InjectMiss(i) if b[j] else InjectHit(i))
            j += 1
        elif i < len(a) and j < len(b) and a[i] == b[j] and cost[i + 1][j + 1] == here:
            i += 1
            j += 1
        else:
            # the only remaining optimal move is a hit-to-miss substitution
            actions.append(Invalidate(i))
            i += 1
            j += 1
    return actions


def _align_table(a: tuple, b: tuple) -> list:
    n, m = len(a), len(b)
    cost = [[_INF] * (m + 1) for _ in range(n + 1)]
    cost[n][m] = 0
    for i in range(n, -1, -1):
        for j in range(m, -1, -1):
            if i == n and j == m:
                continue
            best = _INF
            if j < m and not (b[j] == 0 and i == 0):
                best = INSERT_COST + cost[i][j + 1]
            if i < n and j < m:
                if a[i] == b[j]:
                    best = min(best, cost[i + 1][j + 1])
                elif a[i] == 0:
                    best = min(best, SUBST_COST + cost[i + 1][j + 1])
            cost[i][j] = best
    return cost


def _side_moves(seq: tuple, k: int, bit: int):
    """Ways one side produces target ``bit`` at position ``k`` of ``seq``: (cost, consumed, substituted)."""
    if k < len(seq):
        if seq[k] == bit:
            yield 0, 1, 0
        elif seq[k] == 0:
            yield SUBST_COST, 1, 1
    if bit or k > 0:
        yield INSERT_COST, 0, 0


@lru_cache(maxsize=4096)
def merge_observations(x: tuple, y: tuple) -> tuple | None:
    """A cheapest common target reachable from both ``x`` and ``y``."""
    n, m = len(x), len(y)
    # best[i][j] = (cost, substitutions, suffix) for x[i:], y[j:]; ties prefer
    # fewer substitutions, then the suffix with earlier misses
    best = [[None] * (m + 1) for _ in range(n + 1)]
    best[n][m] = (0, 0, ())
    for i in range(n, -1, -1):
        for j in range(m, -1, -1):
            if i == n and j == m:
                continue
            opts = []
            for bit in (1, 0):
                for cx, dx, sx in _side_moves(x, i, bit):
                    for cy, dy, sy in _side_moves(y, j, bit):
                        if not (dx or dy):
                            continue
                        rest = best[i + dx][j + dy]
                        if rest is not None:
                            opts.append((rest[0] + cx + cy, rest[1] + sx + sy, (bit,) + rest[2]))
            best[i][j] = min(opts, key=lambda o: (o[0], o[1], tuple(-b for b in o[2])), default=None)
    return None if best[0][0] is None else best[0][0][2]


def reference_observation(obs: Sequence[tuple]) -> tuple:
    """Target trace reachable from every class.

    Classes are folded pairwise in (length, bits) order.  If the fold ends
    on a target some class cannot reach, the all-miss trace of the longest
    class is used instead; every class reaches it.
    """
    ordered = sorted(set(obs), key=lambda t: (len(t), t))
    ref = ordered[0]
    for o in ordered[1:]:
        ref = merge_observations(ref, o)
        if ref is None:
            break
    if ref is None or any(align_traces(o, ref) is None for o in ordered):
        ref = (1,) * len(ordered[-1])
    return ref


def synth_trace_patches(omega: ClassRecord) -> list[Patch]:
    if any(not isinstance(e.observation, TraceObs) for e in omega):
        raise SynthesisError("trace patches need hit/miss bitvector observations only")
    if not omega.entries:
        return []
    ref = reference_observation([e.observation.bits for e in omega])
    out = []
    for e in omega:
        acts = align_traces(e.observation.bits, ref)
        if acts is None:
            raise SynthesisError(f"class {e.observation} cannot reach reference {''.join(map(str, ref))}")
        if apply_actions(e.observation.bits, acts) != list(ref):
            raise SynthesisError(f"schedule for class {e.observation} does not reproduce the reference")
        out.append(Patch(e.nu, "trace", acts, e.observation))
    return out


def merge_groups(patches: Sequence[Patch]) -> list[list[int]]:
    """Patch indices per merge: applying groups ``1..k`` leaves ``n - k`` classes.

    A class that already shows the reference observation (empty schedule)
    leads, so the first merge is that class plus one other.
    """
    if len(patches) < 2:
        return []
    idx = sorted(range(len(patches)), key=lambda k: (bool(patches[k].actions), k))
    return [idx[:2]] + [[k] for k in idx[2:]]


def dump_patches(patches: Sequence[Patch], model: str, n_sites: int, extra: dict | None = None) -> str:
    groups = merge_groups(patches)
    d = {"model": model, "sites": n_sites, "patches": [p.to_dict() for p in patches], "merges": groups}
    d.update(extra or {})
    return json.dumps(d, indent=1, sort_keys=True)


def load_patches(text: str) -> tuple[str, list[Patch]]:
    d = json.loads(text)
    n = int(d["sites"])
    patches = [Patch.from_dict(p, n) for p in d.get("patches", [])]
    model = d.get("model") or (patches[0].model if patches else "time")
    return model, patches


# ---------------------------------------------------------------------------
# driver


@dataclass
class MonitoringResult:
    outcome: VerificationOutcome
    omega: ClassRecord
    patches: list
    complete: bool
    refinements: int = 0
    note: str = ""

    @property
    def reference(self) -> Observation | None:
        if not self.patches:
            return None
        p = self.patches[0]
        if p.model == "time":
            return TimeObs(p.observation.misses + p.delta)
        return TraceObs(tuple(apply_actions(p.observation.bits, p.actions)))


def run_monitoring_system(sys: SymbolicSystem, attack: str, solver: Solver | None = None,
                          outcome: VerificationOutcome | None = None) -> MonitoringResult:
    """Explore all classes of ``sys``; ``outcome`` reuses an earlier verification of the same system."""
    solver = solver or Solver()
    if outcome is None:
        outcome = run_cegar_system(sys, attack, solver)
    omega = ClassRecord()
    if outcome.verdict == "verified":
        omega.complete = True
        return MonitoringResult(outcome, omega, [], True, note="verified: no patch needed")
    if outcome.verdict == "inconclusive":
        return MonitoringResult(outcome, omega, [], False, note=outcome.reason)
    st = _State(sys, attack, solver, outcome.abstraction)
    seeds = list(outcome.traces)
    complete = False
    note = ""
    try:
        while True:
            if seeds:
                seed = seeds.pop(0)
            else:
                seed = next_class(st, omega)
                if seed is None:
                    complete = True
                    break
            omega.entries.append(explore_class(st, seed))
            seeds = [s for s in seeds if s.observation not in omega.observations]
    except (InconclusiveError, RefinementStuck) as e:
        note = f"exploration stopped early: {e}"
        log.warning("partial class record (%d classes): %s", len(omega), e)
    omega.complete = complete
    patches = synth_time_patches(omega) if attack == "time" else synth_trace_patches(omega)
    return MonitoringResult(outcome, omega, patches, complete, st.refinements, note)


def run_monitoring(p: Program, cfg, attack: str, solver: Solver | None = None) -> MonitoringResult:
    """Explore every observation class of ``p`` and synthesize patches that merge them."""
    return run_monitoring_system(execute_symbolic(unroll(p), cfg), attack, solver)
