"""Cross-checks between the symbolic encoding and the concrete simulator."""

from cacheshield import terms as T
from cacheshield.oracle import concrete_run
from cacheshield.program import count_sites, enumerate_secrets, unroll
from cacheshield.solver import Sat, Unsat
from cacheshield.symbolic import execute_symbolic, miss_name, rewrite


def simulated_vectors(p, cfg):
    """secret tuple -> per-site miss bits (0 for skipped sites)."""
    n = count_sites(p.body)
    names = [s for s, _ in p.secrets]
    out = {}
    for s in enumerate_secrets(p):
        out[tuple(s[k] for k in names)] = concrete_run(p, cfg, s, n).site_misses
    return out


def grounding_mismatches(sys, vectors):
    """Secrets whose evaluated miss vector differs from the simulator's."""
    names = sys.secret_names
    bad = []
    for key, want in vectors.items():
        env = sys.evaluate(dict(zip(names, key)))
        got = [int(env[miss_name(i)]) for i in range(1, sys.n + 1)]
        if got != want:
            bad.append((key, got, want))
    return bad


def solver_mismatch(sys, vectors, solver):
    """One query: is there any secret whose fully tracked system admits a
    miss vector other than the simulated one?  ``None`` means no."""
    f = rewrite(sys, sys.universe.names)
    widths = dict(sys.trace.program.secrets)
    names = sys.secret_names
    cases = []
    for key, want in vectors.items():
        pin = [T.Eq(T.var(n, T.bv(widths[n])), T.bvconst(v, widths[n])) for n, v in zip(names, key)]
        differs = T.Or(*[T.Not(m) if w else m for m, w in zip(sys.miss_vars, want)])
        cases.append(T.And(*pin, differs))
    f.add(T.Or(*cases))
    res = solver.check(f, values=names + [miss_name(i) for i in range(1, sys.n + 1)])
    if isinstance(res, Unsat):
        return None
    return res.model if isinstance(res, Sat) else res


def build(p, cfg):
    return execute_symbolic(unroll(p), cfg)
