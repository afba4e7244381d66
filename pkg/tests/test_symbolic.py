import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from cacheshield import terms as T
from cacheshield.cache import CacheConfig, map_address
from cacheshield.corpus import CORPUS_CACHES, block_sequence_program, random_program
from cacheshield.program import parse_program, unroll
from cacheshield.symbolic import (FormulaSizeError, execute_symbolic, initial_abstraction, miss_name,
                                  pred_name, rewrite)
from checks import build, grounding_mismatches, simulated_vectors, solver_mismatch

LRU1 = CacheConfig(sets=1, line_size=16, assoc=2, policy="lru")
FIFO1 = CacheConfig(sets=1, line_size=16, assoc=2, policy="fifo")
DM4 = CORPUS_CACHES["direct"]


def seq_env(blocks, cfg):
    sys = build(parse_program(block_sequence_program(blocks)), cfg)
    return sys, sys.evaluate({"k": 0})


def test_universe_size_and_names(exA, desk):
    sys = build(exA, desk)
    n = sys.n
    assert n == 4
    assert len(sys.universe) == n * (n - 1)
    sets = [p for p in sys.universe if p.kind == "set"]
    assert len(sets) == n * (n - 1) // 2
    assert pred_name("set", 3, 4) in sys.universe and pred_name("tag", 1, 2) in sys.universe
    assert build(exA, desk).universe.names == sys.universe.names


def test_single_load_is_cold_miss():
    sys, env = seq_env([0], DM4)
    assert sys.gamma[0] == T.TRUE
    assert env[miss_name(1)] is True


def test_same_constant_block_twice():
    for cfg in CORPUS_CACHES.values():
        _, env = seq_env([3, 3], cfg)
        assert (env["miss.1"], env["miss.2"]) == (True, False)


def test_direct_ping_pong_gamma():
    _, env = seq_env([0, 4, 0], DM4)
    assert env["miss.3"] is True
    _, env = seq_env([0, 4, 4], DM4)
    assert env["miss.3"] is False


def test_lru_appendix_eta():
    _, env = seq_env([1, 2, 2, 1], LRU1)
    assert env["eta.2.4"] is False
    assert env["eta.3.4"] is True
    assert env["miss.4"] is False


def test_fifo_appendix_eta():
    _, env = seq_env([1, 2, 1, 1], FIFO1)
    assert env["miss.3"] is False
    assert env["eta.2.4"] is True
    assert env["miss.4"] is False


def test_first_gamma_is_guard(exB, desk):
    for cfg in [desk, LRU1, FIFO1]:
        sys = build(exB, cfg)
        assert sys.gamma[0] == sys.guards[0]


def test_exA_gamma3_shape(exA, desk):
    """The cold-miss shape implies Gamma(r_3); with exA's static predicates folded in both hold."""
    sys = build(exA, desk)
    g3 = sys.expand(sys.gamma[2])
    names = ["guard.1", "guard.2", "rho.set.1.3", "rho.tag.1.3", "rho.set.2.3", "rho.tag.2.3"]
    assert g3.free_vars() <= set(names)

    def shape(e):
        return (not (e["guard.1"] and e["rho.set.1.3"] and not e["rho.tag.1.3"])
                and not (e["guard.2"] and e["rho.set.2.3"] and not e["rho.tag.2.3"]))

    for vals in itertools.product([False, True], repeat=6):
        e = dict(zip(names, vals))
        if e["guard.1"] == e["guard.2"]:
            continue  # the two arms are exclusive
        if shape(e):
            assert T.evaluate(g3, e)
    folded = {n: sys.universe[n].static_value for n in names[2:]}
    assert folded == {"rho.set.1.3": False, "rho.tag.1.3": False, "rho.set.2.3": False, "rho.tag.2.3": False}
    for g1 in (False, True):
        e = {"guard.1": g1, "guard.2": not g1, **folded}
        assert T.evaluate(g3, e) == shape(e) is True


def test_initial_abstraction_examples(exA, exB, desk):
    allconst = build(parse_program(block_sequence_program([0, 1, 4, 0])), DM4)
    assert initial_abstraction(allconst) == frozenset(allconst.universe.names)
    first_secret = build(parse_program("secret k:u2; array A[4]:16 @0x0; load A[k]\nload A[0]"), DM4)
    assert initial_abstraction(first_secret) == frozenset()
    pa = initial_abstraction(build(exA, desk))
    assert pa == {pred_name(k, j, i) for k in ("set", "tag") for j, i in [(1, 2), (1, 3), (2, 3)]}
    sysB = build(exB, desk)
    pb = initial_abstraction(sysB)
    assert not any(p.endswith(".2") or ".2." in p for p in pb)  # access 2 reads T[key]


def test_initial_abstraction_is_static(exA, desk):
    sys = build(exA, desk)
    for name in initial_abstraction(sys):
        assert sys.universe[name].static_value is not None


def test_static_values_match_mapping(exA, desk):
    sys = build(exA, desk)
    t = unroll(exA)
    for p in sys.universe:
        if p.static_value is None:
            continue
        _, sj, tj = map_address(desk, t.accesses[p.j - 1].static_address)
        _, si, ti = map_address(desk, t.accesses[p.i - 1].static_address)
        assert p.static_value == ((sj == si) if p.kind == "set" else (tj != ti))


def test_dump_lists_every_predicate(exA, desk):
    sys = build(exA, desk)
    text = sys.dump({"rho.set.1.2"})
    lines = text.splitlines()
    assert sum(1 for ln in lines if ln.startswith("rho.")) == len(sys.universe)
    assert "rho.set.1.2 j=1 i=2 kind=set static=false tracked" in lines
    assert any(ln.startswith("miss.4 := ") for ln in lines)
    assert text == build(exA, desk).dump({"rho.set.1.2"})


def test_node_limit(exA, desk):
    with pytest.raises(FormulaSizeError):
        execute_symbolic(unroll(exA), desk, node_limit=5)


def test_rewrite_unknown_predicate(exA, desk):
    with pytest.raises(KeyError):
        rewrite(build(exA, desk), {"rho.set.9.10"})


def test_rewrite_monotone(exA, desk):
    sys = build(exA, desk)
    small = rewrite(sys, {"rho.set.1.2"})
    big = rewrite(sys, {"rho.set.1.2", "rho.tag.3.4"})
    assert len(rewrite(sys, set())) < len(small) < len(big)
    assert set(map(str, small.assertions)) <= set(map(str, big.assertions))
    assert [str(a) for a in rewrite(sys, {"rho.set.1.2"}).assertions] == [str(a) for a in small.assertions]


policies = st.sampled_from(list(CORPUS_CACHES))
programs = st.integers(0, 100_000).map(lambda s: parse_program(random_program(random.Random(s), max_accesses=12)))


@settings(max_examples=60, deadline=None)
@given(programs, policies)
def test_grounding_matches_simulator(p, pol):
    cfg = CORPUS_CACHES[pol]
    assert grounding_mismatches(build(p, cfg), simulated_vectors(p, cfg)) == []


@settings(max_examples=40, deadline=None)
@given(programs, st.sampled_from([CacheConfig(1, 16, 3, "lru"), CacheConfig(1, 16, 3, "fifo"),
                                  CacheConfig(2, 16, 4, "fifo"), CacheConfig(1, 16)]))
def test_grounding_other_geometries(p, cfg):
    assert grounding_mismatches(build(p, cfg), simulated_vectors(p, cfg)) == []


@settings(max_examples=40, deadline=None)
@given(programs, st.sampled_from(["lru", "fifo"]))
def test_eta_counts_each_block_once(p, pol):
    cfg = CORPUS_CACHES[pol]
    sys = build(p, cfg)
    t = sys.trace
    for key in list(simulated_vectors(p, cfg))[:32]:
        s = dict(zip(sys.secret_names, key))
        env = sys.evaluate(s)
        _, addrs = t.concrete(s)
        for i in range(2, sys.n + 1):
            blocks = [map_address(cfg, addrs[j - 1])[0] for j in range(1, i) if env.get(f"eta.{j}.{i}")]
            assert len(blocks) == len(set(blocks))


@settings(max_examples=30, deadline=None)
@given(programs, policies)
def test_gamma_indexing_is_monotone(p, pol):
    sys = build(p, CORPUS_CACHES[pol])
    for i, g in enumerate(sys.gamma, start=1):
        for v in sys.expand(g).free_vars():
            parts = v.split(".")
            if parts[0] == "rho":
                assert int(parts[3]) <= i
            elif parts[0] == "miss":
                assert int(parts[1]) < i


def test_fully_tracked_system_forces_simulated_vector(solver, exB, desk):
    for cfg in [desk, LRU1, FIFO1]:
        assert solver_mismatch(build(exB, cfg), simulated_vectors(exB, cfg), solver) is None


def test_solver_mismatch_detects_wrong_vector(solver, exB, desk):
    vec = simulated_vectors(exB, desk)
    vec[(255,)] = [0, 0, 0, 0]
    model = solver_mismatch(build(exB, desk), vec, solver)
    assert model is not None and model["key"] == 255
