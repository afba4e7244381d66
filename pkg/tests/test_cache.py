import pytest
from hypothesis import given, settings, strategies as st

from cacheshield.cache import (ActionError, CacheConfig, CacheConfigError, InjectHit, InjectMiss, Invalidate,
                               TimeObs, TraceObs, action_from_dict, action_to_dict, apply_actions, map_address,
                               observe, parse_observation, simulate)
from cacheshield.oracle import concrete_run, oracle_classes
from oracles import ref_apply_actions, ref_map, ref_simulate

LRU1 = CacheConfig(sets=1, line_size=16, assoc=2, policy="lru")
FIFO1 = CacheConfig(sets=1, line_size=16, assoc=2, policy="fifo")
DM4 = CacheConfig(sets=4, line_size=16)


@pytest.mark.parametrize("addr, expected", [(0x0, (0, 0, 0)), (0x420, (33, 1, 1)), (0x41F, (32, 0, 1))])
def test_map_address_desk_cache(desk, addr, expected):
    assert map_address(desk, addr) == expected


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6), st.integers(0, 7))
def test_map_address_matches_division(addr, s, b):
    cfg = CacheConfig(sets=1 << s, line_size=1 << b)
    assert map_address(cfg, addr) == ref_map(addr, 1 << s, 1 << b)


def test_map_address_rejects_negative(desk):
    with pytest.raises(ValueError):
        map_address(desk, -1)


@pytest.mark.parametrize("kwargs", [
    dict(sets=3, line_size=16), dict(sets=4, line_size=24), dict(sets=4, line_size=16, assoc=2),
    dict(sets=4, line_size=16, policy="random"), dict(sets=4, line_size=16, assoc=0, policy="lru"),
])
def test_bad_configs(kwargs):
    with pytest.raises(CacheConfigError):
        CacheConfig(**kwargs)


def test_config_load_yaml_and_json(tmp_path):
    y = tmp_path / "c.yaml"
    y.write_text("sets: 2\nline_size: 16\nassoc: 2\npolicy: FIFO\n")
    j = tmp_path / "c.json"
    j.write_text('{"sets": 2, "line_size": 16, "assoc": 2, "policy": "fifo"}')
    assert CacheConfig.load(y) == CacheConfig.load(j) == CacheConfig(2, 16, 2, "fifo")
    bad = tmp_path / "bad.yaml"
    bad.write_text("sets: 2\nline_size: 16\nways: 2\n")
    with pytest.raises(CacheConfigError, match="unknown"):
        CacheConfig.load(bad)


def test_lru_appendix_sequence():
    assert simulate(LRU1, [1, 2, 2, 1]) == [1, 1, 0, 0]


def test_fifo_appendix_sequence():
    assert simulate(FIFO1, [1, 2, 1, 1]) == [1, 1, 0, 0]


def test_direct_ping_pong():
    # blocks 0 and 4 share set 0 of a 4-set cache
    assert simulate(DM4, [0, 4, 0]) == [1, 1, 1]


def test_lru_and_fifo_differ_on_hit_refresh():
    seq = [1, 2, 1, 3, 1]
    assert simulate(LRU1, seq) == [1, 1, 0, 1, 0]
    assert simulate(FIFO1, seq) == [1, 1, 0, 1, 1]


configs = st.builds(
    lambda pol, s, a: CacheConfig(sets=1 << s, line_size=16, assoc=1 if pol == "direct" else a, policy=pol),
    st.sampled_from(["direct", "lru", "fifo"]), st.integers(0, 2), st.integers(1, 4))


@settings(max_examples=300)
@given(configs, st.lists(st.integers(0, 11), max_size=30))
def test_simulate_matches_age_counter_model(cfg, blocks):
    assert simulate(cfg, blocks) == ref_simulate(cfg.policy, cfg.sets, cfg.assoc, blocks)


@settings(max_examples=100)
@given(configs, st.lists(st.integers(0, 11), max_size=20), st.integers(0, 11))
def test_fifo_hit_leaves_state_alone(cfg, prefix, b):
    # state probe: a FIFO hit followed by anything behaves as if the hit never happened
    if cfg.policy != "fifo":
        return
    seq = prefix + [b]
    if simulate(cfg, seq)[-1] == 0:
        for tail in ([0, 1, 2, 3, 4], [b, 5, 6, 7]):
            assert simulate(cfg, seq + tail)[len(seq):] == simulate(cfg, prefix + tail)[len(prefix):]


def test_observe():
    assert observe("time", [1, 1, 0, 0]) == TimeObs(2)
    assert str(observe("trace", [1, 1, 0, 0])) == "1100"
    assert observe("time", []) == TimeObs(0)
    assert parse_observation("trace", "1100") == TraceObs((1, 1, 0, 0))
    with pytest.raises(ValueError):
        observe("power", [1])


def test_apply_actions_examples():
    assert apply_actions([1, 1, 0], [InjectMiss(0)]) == [1, 1, 1, 0]
    assert apply_actions([1, 1, 0], [InjectHit(3)]) == [1, 1, 0, 0]
    assert apply_actions([1, 0, 1], []) == [1, 0, 1]
    assert apply_actions([1, 0, 0], [Invalidate(1)]) == [1, 1, 0]
    assert apply_actions([1, 0, 0], [Invalidate(1, block=7)], blocks=[7, 7, 7]) == [1, 1, 0]
    assert apply_actions([1, 1, 0], [Invalidate(0, block=7)], blocks=[5, 6, 7]) == [1, 1, 1]


def test_apply_actions_errors():
    with pytest.raises(ActionError):
        apply_actions([1, 0], [InjectHit(0)])
    with pytest.raises(ActionError):
        apply_actions([1, 0], [Invalidate(0, block=9)], blocks=[3, 3])
    with pytest.raises(ActionError):
        apply_actions([1, 0], [InjectMiss(3)])


def test_action_dict_round_trip():
    for a in (InjectMiss(0), InjectHit(2), Invalidate(1), Invalidate(1, 5)):
        assert action_from_dict(action_to_dict(a)) == a


actions = st.lists(st.one_of(
    st.builds(InjectMiss, st.integers(0, 6)), st.builds(InjectHit, st.integers(1, 6)),
    st.builds(Invalidate, st.integers(0, 5))), max_size=5)


@settings(max_examples=300)
@given(st.lists(st.integers(0, 1), min_size=6, max_size=6), actions)
def test_apply_actions_matches_reference(bits, acts):
    out = apply_actions(bits, acts)
    assert out == ref_apply_actions(bits, acts)
    inserts = sum(1 for a in acts if a.kind != "invalidate")
    assert len(out) == len(bits) + inserts


def test_oracle_exA(exA, desk):
    rep = oracle_classes(exA, desk, "time")
    assert rep.num_classes == 1
    assert rep.domain_size == 256


def test_oracle_exB(exB, desk):
    for model in ("time", "trace"):
        rep = oracle_classes(exB, desk, model)
        assert rep.num_classes == 2
        assert sorted(rep.sizes()) == [1, 255]
        assert rep.class_of({"key": 255}) != rep.class_of({"key": 0})
    rep = oracle_classes(exB, desk, "trace")
    assert rep.class_of({"key": 255}) == TraceObs((1, 0, 0))
    assert rep.class_of({"key": 7}) == TraceObs((1, 1, 0))
    assert oracle_classes(exB, desk, "time").class_of({"key": 255}) == TimeObs(1)


def test_concrete_run_skipped_sites(exB, desk):
    run = concrete_run(exB, desk, {"key": 255})
    assert run.executed == [False, True, True, True]
    assert run.site_misses == [0, 1, 0, 0]
    assert run.misses == [1, 0, 0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5000), st.sampled_from(["direct", "lru", "fifo"]), st.sampled_from(["time", "trace"]))
def test_oracle_partitions_domain(seed, pol, model):
    import random
    from cacheshield.corpus import CORPUS_CACHES, random_program
    from cacheshield.program import parse_program
    p = parse_program(random_program(random.Random(seed)))
    rep = oracle_classes(p, CORPUS_CACHES[pol], model)
    bits = sum(w for _, w in p.secrets)
    members = [k for v in rep.classes.values() for k in v]
    assert len(members) == len(set(members)) == 2 ** bits
