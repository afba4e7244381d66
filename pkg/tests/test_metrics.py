import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from cacheshield.cache import CacheConfig, TimeObs
from cacheshield.metrics import (MetricsError, Prior, channel_capacity, metrics_block, min_entropy_prior,
                                 min_entropy_remaining, min_vulnerability_remaining, prior_weights,
                                 remaining_weights, shannon_prior, shannon_remaining)
from cacheshield.oracle import OracleReport, oracle_classes
from oracles import ref_entropy_remaining, ref_min_entropy_remaining

CFG = CacheConfig(1, 16)


def report(sizes):
    classes, k = {}, 0
    for c, size in enumerate(sizes):
        classes[TimeObs(c)] = [(k + t,) for t in range(size)]
        k += size
    return OracleReport("time", CFG, ["key"], classes)


def test_capacity():
    assert channel_capacity(report([256])) == 0.0
    assert channel_capacity(report([1, 255])) == 1.0
    with pytest.raises(MetricsError):
        channel_capacity(report([]))


def test_one_class_keeps_prior_entropy():
    r = report([256])
    assert shannon_remaining(r) == shannon_prior(Prior.uniform(r)) == 8.0
    assert min_entropy_remaining(r) == min_entropy_prior(Prior.uniform(r)) == 8.0
    assert remaining_weights(r) == prior_weights(Prior.uniform(r))


def test_exB_split():
    r = report([1, 255])
    assert shannon_remaining(r) == pytest.approx(255 / 256 * math.log2(255), abs=1e-12)
    assert min_vulnerability_remaining(r) == Fraction(1, 128)
    assert min_entropy_remaining(r) == 7.0


def test_full_leak():
    r = report([1] * 256)
    assert min_entropy_remaining(r) == 0.0
    assert shannon_remaining(r) == 0.0


def test_point_mass_prior():
    r = report([3, 5])
    pr = Prior.from_mapping(r, {(2,): 1})
    assert shannon_remaining(r, pr) == 0.0
    assert shannon_prior(pr) == 0.0


def test_nonuniform_prior():
    r = report([2, 2])
    pr = Prior.from_mapping(r, {(0,): Fraction(1, 2), (1,): Fraction(1, 4), (2,): Fraction(1, 8), (3,): Fraction(1, 8)})
    # class A: 3/4 split 2/3, 1/3; class B: 1/4 split 1/2, 1/2
    h_a = -(2 / 3 * math.log2(2 / 3) + 1 / 3 * math.log2(1 / 3))
    assert shannon_remaining(r, pr) == pytest.approx(0.75 * h_a + 0.25, abs=1e-12)
    assert min_vulnerability_remaining(r, pr) == Fraction(1, 2) + Fraction(1, 8)


@pytest.mark.parametrize("probs, msg", [({(0,): Fraction(1, 2)}, "sum to 1"),
                                        ({(0,): 2, (1,): -1}, "negative"),
                                        ({(9,): 1}, "outside")])
def test_bad_priors(probs, msg):
    with pytest.raises(MetricsError, match=msg):
        Prior.from_mapping(report([1, 1]), probs)


def test_domain_mismatch():
    with pytest.raises(MetricsError):
        shannon_remaining(report([2, 2]), Prior(((0,), (1,))))


sizes = st.lists(st.integers(1, 40), min_size=1, max_size=8)


@settings(max_examples=200)
@given(sizes)
def test_against_brute_force(sz):
    r = report(sz)
    n = sum(sz)
    assert shannon_remaining(r) == pytest.approx(ref_entropy_remaining(sz, n), abs=1e-9)
    assert min_entropy_remaining(r) == pytest.approx(ref_min_entropy_remaining(len(sz), n), abs=1e-9)


@settings(max_examples=200)
@given(sizes)
def test_remaining_never_exceeds_prior(sz):
    r = report(sz)
    pr = Prior.uniform(r)
    assert shannon_remaining(r) <= shannon_prior(pr) + 1e-12
    assert min_entropy_remaining(r) <= min_entropy_prior(pr) + 1e-12
    assert (remaining_weights(r) == prior_weights(pr)) == (len(sz) == 1)


@settings(max_examples=200)
@given(sizes.filter(lambda s: len(s) >= 2), st.data())
def test_merging_two_classes_never_lowers_entropy(sz, data):
    a = data.draw(st.integers(0, len(sz) - 1))
    b = data.draw(st.integers(0, len(sz) - 1).filter(lambda x: x != a))
    merged = [s for k, s in enumerate(sz) if k not in (a, b)] + [sz[a] + sz[b]]
    assert shannon_remaining(report(merged)) >= shannon_remaining(report(sz)) - 1e-12
    assert min_vulnerability_remaining(report(merged)) <= min_vulnerability_remaining(report(sz))
    assert channel_capacity(report(merged)) < channel_capacity(report(sz))


def test_exB_metrics_block(exB, desk):
    m = metrics_block(oracle_classes(exB, desk, "time"))
    assert list(m) == ["classes", "capacity_bits", "shannon_prior", "shannon_remaining", "min_prior", "min_remaining"]
    assert m["classes"] == 2 and m["capacity_bits"] == 1.0
    assert m["min_remaining"] == 7.0 and m["min_prior"] == 8.0
