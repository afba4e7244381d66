"""Symbolic cache semantics over an unrolled trace.

For every ordered pair of accesses ``j < i`` there are two predicates:
``rho.set.j.i`` (same cache set) and ``rho.tag.j.i`` (different tag).  Each is
a named boolean whose arithmetic definition is asserted only while the
predicate is tracked.  The hit/miss condition of access ``i`` is built from
those booleans, the access guards and, for set-associative caches, the
unique-conflict indicators ``eta.j.i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import terms as T
from .cache import CacheConfig
from .program import WORD, UnrolledTrace
from .solver import Formula, FormulaError

DEFAULT_NODE_LIMIT = 2_000_000


class FormulaSizeError(FormulaError):
    pass


@dataclass(frozen=True)
class Predicate:
    name: str
    kind: str  # "set" | "tag"
    j: int
    i: int
    definition: T.Term  # boolean term over addresses
    static_value: bool | None  # known without secrets

    @property
    def var(self) -> T.Term:
        return T.var(self.name, T.BOOL)


def pred_name(kind: str, j: int, i: int) -> str:
    return f"rho.{kind}.{j}.{i}"


@dataclass
class PredicateUniverse:
    preds: dict[str, Predicate]

    def __len__(self):
        return len(self.preds)

    def __iter__(self):
        return iter(self.preds.values())

    def __contains__(self, name):
        return name in self.preds

    def __getitem__(self, name) -> Predicate:
        return self.preds[name]

    @property
    def names(self) -> list[str]:
        return list(self.preds)

    def pair(self, j: int, i: int) -> set[str]:
        return {pred_name("set", j, i), pred_name("tag", j, i)}


def guard_name(i: int) -> str:
    return f"guard.{i}"


def miss_name(i: int) -> str:
    return f"miss.{i}"


def addr_name(i: int) -> str:
    return f"addr.{i}"


def eta_name(j: int, i: int) -> str:
    return f"eta.{j}.{i}"


@dataclass
class SymbolicSystem:
    trace: UnrolledTrace
    cfg: CacheConfig
    universe: PredicateUniverse
    decls: dict[str, T.Sort]
    program_defs: list[T.Term]  # SSA, guard and address definitions
    cache_order: list[tuple[str, T.Term]]  # auxiliaries, eta and miss, in dependency order
    gamma: list[T.Term]  # Gamma(r_1..r_N) over predicate and auxiliary symbols
    guards: list[T.Term]  # guard term per access (variable or constant)
    addrs: list[T.Term]
    _base: Formula | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.gamma)

    @property
    def cache_defs(self) -> list[T.Term]:
        """``name <=> definition`` for every cache-semantics symbol, incl. ``miss.i <=> Gamma(r_i)``."""
        return [T.Eq(T.var(name, T.BOOL), d) for name, d in self.cache_order]

    @property
    def miss_vars(self) -> list[T.Term]:
        return [T.var(miss_name(i), T.BOOL) for i in range(1, self.n + 1)]

    @property
    def eta_vars(self) -> list[str]:
        return [name for name, _ in self.cache_order if name.startswith("eta.")]

    @property
    def secret_names(self) -> list[str]:
        return [n for n, _ in self.trace.program.secrets]

    def base_formula(self) -> Formula:
        """Program and cache semantics with every predicate left free."""
        if self._base is None:
            f = Formula()
            for name, sort in self.decls.items():
                f.declare(name, sort)
            for t in self.program_defs:
                f.add(t)
            for t in self.cache_defs:
                f.add(t)
            self._base = f
        return self._base.copy()

    def expand(self, t: T.Term) -> T.Term:
        """``t`` with auxiliary and eta symbols replaced by their definitions."""
        defs = {name: d for name, d in self.cache_order if not name.startswith("miss.")}
        memo: dict = {}

        def go(x: T.Term) -> T.Term:
            key = id(x)
            if key in memo:
                return memo[key]
            if x.op == "var" and x.name in defs:
                out = go(defs[x.name])
            elif not x.args:
                out = x
            else:
                out = _rebuild(x, [go(a) for a in x.args])
            memo[key] = out
            return out

        return go(t)

    def evaluate(self, secrets: dict) -> dict:
        """Value of every system symbol under a secret assignment, computed by
        substituting into the same definitions the solver receives."""
        prog = self.trace.program
        env: dict = {n: secrets[n] & ((1 << w) - 1) for n, w in prog.secrets}
        cache: dict = {}
        for v, t in self.trace.definitions:
            env[v.name] = T.evaluate(t, env, cache)
        for a in self.trace.accesses:
            env[guard_name(a.index)] = bool(T.evaluate(a.guard, env, cache))
            env[addr_name(a.index)] = T.evaluate(a.address, env, cache)
        for p in self.universe:
            env[p.name] = bool(T.evaluate(p.definition, env, cache))
        for name, d in self.cache_order:
            env[name] = bool(T.evaluate(d, env, {}))
        return env

    def dump(self, tracked: set[str] | frozenset = frozenset()) -> str:
        """One line per predicate, then one per cache-semantics definition."""
        lines = []
        for p in self.universe:
            folded = "-" if p.static_value is None else str(p.static_value).lower()
            mark = "tracked" if p.name in tracked else "free"
            lines.append(f"{p.name} j={p.j} i={p.i} kind={p.kind} static={folded} {mark}")
        for name, d in self.cache_order:
            lines.append(f"{name} := {d.smt()}")
        return "\n".join(lines) + "\n"


def _rebuild(t: T.Term, args: list) -> T.Term:
    if t.op == "and":
        return T.And(*args)
    if t.op == "or":
        return T.Or(*args)
    if t.op == "not":
        return T.Not(args[0])
    if t.op == "ite":
        return T.Ite(*args)
    if t.op == "=":
        return T.Eq(*args)
    if t.op == "+":
        return T.Sum(args)
    if t.op in (">=", "<=", ">", "<"):
        return T.IntCmp(t.op, *args)
    return T.Term(t.op, tuple(args), t.sort, t.params)


def _set_bits(cfg: CacheConfig, a: T.Term) -> T.Term | None:
    if cfg.set_bits == 0:
        return None
    return T.Extract(cfg.offset_bits + cfg.set_bits - 1, cfg.offset_bits, a)


def _tag_bits(cfg: CacheConfig, a: T.Term) -> T.Term:
    return T.Extract(WORD - 1, cfg.offset_bits + cfg.set_bits, a)


def _node_count(t: T.Term, limit: int) -> int:
    n, stack = 0, [t]
    while stack:
        x = stack.pop()
        n += 1
        if n > limit:
            break
        stack.extend(x.args)
    return n


class _Builder:
    """Builds hit/miss conditions and records auxiliary definitions in order.

    Reload and equivalence conditions are conjunctions over the accesses
    between ``j`` and ``i``; they are named (``rel.j.i``, ``eqv.j.i``) and
    defined recursively so that the system stays quadratic in size.
    """

    def __init__(self, guards, cfg: CacheConfig):
        self.g = guards
        self.cfg = cfg
        self.order: list[tuple[str, T.Term]] = []
        self.fifo = cfg.policy == "fifo" and cfg.assoc > 1
        self._rel: dict = {}
        self._eqv: dict = {}

    def guard(self, i: int) -> T.Term:
        return self.g[i - 1]

    @staticmethod
    def S(j: int, i: int) -> T.Term:
        return T.var(pred_name("set", j, i), T.BOOL)

    @staticmethod
    def D(j: int, i: int) -> T.Term:
        return T.var(pred_name("tag", j, i), T.BOOL)

    @staticmethod
    def miss(i: int) -> T.Term:
        return T.var(miss_name(i), T.BOOL)

    def define(self, name: str, d: T.Term) -> T.Term:
        if d.is_const:
            return d
        self.order.append((name, d))
        return T.var(name, T.BOOL)

    def other_block(self, k: int, i: int) -> T.Term:
        # r_k skipped or touching a block other than sigma(r_i)
        return T.Or(self.D(k, i), T.Not(self.S(k, i)), T.Not(self.guard(k)))

    def cold(self, i: int) -> T.Term:
        return T.And(*[self.other_block(j, i) for j in range(1, i)])

    def reload(self, j: int, i: int) -> T.Term:
        """No access strictly between ``j`` and ``i`` (for FIFO: no such miss) reloads sigma(r_i)."""
        if j + 1 >= i:
            return T.TRUE
        key = (j, i)
        if key not in self._rel:
            step = self.other_block(j + 1, i)
            if self.fifo:
                step = T.Or(step, T.Not(self.miss(j + 1)))
            self._rel[key] = self.define(f"rel.{j}.{i}", T.And(step, self.reload(j + 1, i)))
        return self._rel[key]

    def equivalent(self, j: int, i: int) -> T.Term:
        """``r_j`` is the closest access (for FIFO: miss) to its block before ``i``."""
        if j + 1 >= i:
            return T.TRUE
        key = (j, i)
        if key not in self._eqv:
            k = i - 1
            step = T.Or(self.D(j, k), T.Not(self.S(j, k)), T.Not(self.guard(k)))
            if self.fifo:
                step = T.Or(step, T.Not(self.miss(k)))
            self._eqv[key] = self.define(f"eqv.{j}.{i}", T.And(self.equivalent(j, k), step))
        return self._eqv[key]


def build_gamma_direct(i: int, b: _Builder) -> T.Term:
    """Miss condition of access ``i`` in a direct-mapped cache."""
    conflict = T.Or(*[T.And(b.D(j, i), b.S(j, i), b.reload(j, i), b.guard(j)) for j in range(1, i)])
    return T.And(b.guard(i), T.Or(b.cold(i), conflict))


def build_gamma_assoc(i: int, policy: str, assoc: int, b: _Builder) -> T.Term:
    """Miss condition of access ``i`` for LRU/FIFO; records the ``eta.j.i`` definitions.

    ``eta.j.i`` holds iff access ``j`` is the closest (LRU: access, FIFO: miss)
    to its own block before ``i`` and pushes ``sigma(r_i)`` one position
    towards eviction.  Access ``i`` misses when it is cold or at least
    ``assoc`` such unique conflicts accumulated.
    """
    if assoc == 1:
        return build_gamma_direct(i, b)
    if policy not in ("lru", "fifo"):
        raise ValueError(f"no set-associative model for policy {policy!r}")
    etas = []
    for j in range(1, i):
        cnf = T.And(b.D(j, i), b.S(j, i))
        if policy == "fifo":
            cnf = T.And(cnf, b.miss(j))
        etas.append(b.define(eta_name(j, i), T.And(cnf, b.reload(j, i), b.equivalent(j, i), b.guard(j))))
    count = T.Sum(T.BoolToInt(e) for e in etas)
    return T.And(b.guard(i), T.Or(b.cold(i), T.IntCmp(">=", count, T.intconst(assoc))))


def execute_symbolic(trace: UnrolledTrace, cfg: CacheConfig, node_limit: int = DEFAULT_NODE_LIMIT) -> SymbolicSystem:
    """Build program semantics, the predicate universe and every hit/miss condition."""
    decls: dict[str, T.Sort] = {}
    program_defs: list[T.Term] = []
    for n, w in trace.program.secrets:
        decls[n] = T.bv(w)
    for v, t in trace.definitions:
        decls[v.name] = v.sort
        program_defs.append(T.Eq(v, t))

    guards, addrs = [], []
    for a in trace.accesses:
        if a.guard.is_const:
            guards.append(a.guard)
        else:
            g = T.var(guard_name(a.index), T.BOOL)
            decls[g.name] = T.BOOL
            program_defs.append(T.Eq(g, a.guard))
            guards.append(g)
        if a.address.is_const:
            addrs.append(a.address)
        else:
            v = T.var(addr_name(a.index), T.bv(WORD))
            decls[v.name] = v.sort
            program_defs.append(T.Eq(v, a.address))
            addrs.append(v)

    n = trace.n
    preds: dict[str, Predicate] = {}
    for i in range(1, n + 1):
        for j in range(1, i):
            aj, ai = addrs[j - 1], addrs[i - 1]
            sj, si = _set_bits(cfg, aj), _set_bits(cfg, ai)
            same_set = T.TRUE if sj is None else T.Eq(sj, si)
            diff_tag = T.Distinct(_tag_bits(cfg, aj), _tag_bits(cfg, ai))
            for kind, d in (("set", same_set), ("tag", diff_tag)):
                name = pred_name(kind, j, i)
                static = d.value if d.is_const else None
                preds[name] = Predicate(name, kind, j, i, d, static)
                decls[name] = T.BOOL
    universe = PredicateUniverse(preds)

    b = _Builder(guards, cfg)
    gamma = []
    for i in range(1, n + 1):
        if cfg.policy == "direct" or cfg.assoc == 1:
            g = build_gamma_direct(i, b)
        else:
            g = build_gamma_assoc(i, cfg.policy, cfg.assoc, b)
        b.order.append((miss_name(i), g))
        gamma.append(g)
    budget = node_limit
    for name, d in b.order:
        decls[name] = T.BOOL
        budget -= _node_count(d, budget + 1)
        if budget < 0:
            raise FormulaSizeError(f"cache semantics exceed the node limit of {node_limit}")
    return SymbolicSystem(trace, cfg, universe, decls, program_defs, b.order, gamma, guards, addrs)


def initial_abstraction(sys: SymbolicSystem) -> frozenset[str]:
    """Predicates whose value is fixed without knowing the secrets.

    A pair ``(j, i)`` qualifies when access ``i`` and every earlier access
    have constant addresses; such predicates are folded to constants when
    tracked.
    """
    out = set()
    prefix_static = True
    for i in range(1, sys.n + 1):
        prefix_static = prefix_static and sys.addrs[i - 1].is_const
        if not prefix_static:
            break
        for j in range(1, i):
            out |= {pred_name("set", j, i), pred_name("tag", j, i)}
    return frozenset(out)


def rewrite(sys: SymbolicSystem, tracked) -> Formula:
    """Base semantics plus the definition of every tracked predicate."""
    f = sys.base_formula()
    for name in sorted(tracked, key=_pred_order):
        if name not in sys.universe:
            raise KeyError(f"unknown predicate {name}")
        p = sys.universe[name]
        f.add(T.Eq(p.var, p.definition))
    return f


def _pred_order(name: str):
    _, kind, j, i = name.split(".")
    return (int(i), int(j), kind)


def definitions(sys: SymbolicSystem, names) -> list[T.Term]:
    return [T.Eq(sys.universe[n].var, sys.universe[n].definition) for n in sorted(names, key=_pred_order)]
