"""Leakage metrics over observation classes, in exact rational arithmetic."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

from .oracle import OracleReport


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Prior:
    """Distribution over secret tuples; ``probs=None`` means uniform over ``domain``."""

    domain: tuple
    probs: Mapping | None = None

    def __post_init__(self):
        if self.probs is not None:
            if any(p < 0 for p in self.probs.values()):
                raise MetricsError("negative probability in prior")
            if sum(self.probs.values()) != 1:
                raise MetricsError("prior probabilities must sum to 1")
            if set(self.probs) - set(self.domain):
                raise MetricsError("prior assigns mass outside the domain")

    @classmethod
    def uniform(cls, report: OracleReport) -> "Prior":
        return cls(tuple(k for members in report.classes.values() for k in members))

    @classmethod
    def from_mapping(cls, report: OracleReport, probs: Mapping) -> "Prior":
        return cls(tuple(k for members in report.classes.values() for k in members),
                   {tuple(k): Fraction(v) for k, v in probs.items()})

    def p(self, k) -> Fraction:
        if self.probs is None:
            return Fraction(1, len(self.domain))
        return self.probs.get(k, Fraction(0))


def _classes(report: OracleReport) -> list:
    if not report.classes:
        raise MetricsError("no observation classes")
    return list(report.classes.values())


def _check(report: OracleReport, prior: Prior) -> None:
    if report.domain_size != len(prior.domain) or set(prior.domain) != {
            k for m in report.classes.values() for k in m}:
        raise MetricsError("observation classes do not partition the prior's domain")


def channel_capacity(report: OracleReport) -> float:
    return math.log2(len(_classes(report)))


def _log_sum(weights: Mapping[Fraction, Fraction]) -> float:
    """sum of weight * w * log2(1/w) over a {probability: weight} histogram."""
    total = 0.0
    for w, count in weights.items():
        if w:
            total += float(count * w) * -math.log2(w)
    return total


def prior_weights(prior: Prior) -> dict:
    """``{probability: multiplicity}`` whose log-sum is the prior Shannon entropy."""
    return dict(Counter(prior.p(k) for k in prior.domain))


def shannon_prior(prior: Prior) -> float:
    return _log_sum(prior_weights(prior))


def min_vulnerability_prior(prior: Prior) -> Fraction:
    return max(prior.p(k) for k in prior.domain)


def min_entropy_prior(prior: Prior) -> float:
    return -math.log2(min_vulnerability_prior(prior))


def remaining_weights(report: OracleReport, prior: Prior | None = None) -> dict:
    """``{lambda_o(K): sum of pr(o)}`` whose log-sum is the remaining Shannon entropy.

    Two exact histograms that agree give bit-identical entropies, which is
    how equality with the prior is decided without floating point.
    """
    prior = prior or Prior.uniform(report)
    _check(report, prior)
    agg: Counter = Counter()
    for members in _classes(report):
        po = sum((prior.p(k) for k in members), Fraction(0))
        if not po:
            continue
        for k in members:
            agg[prior.p(k) / po] += po
    return {q: w for q, w in agg.items() if w}


def shannon_remaining(report: OracleReport, prior: Prior | None = None) -> float:
    """Expected entropy of the secret once the observation is known."""
    return _log_sum(remaining_weights(report, prior))


def min_vulnerability_remaining(report: OracleReport, prior: Prior | None = None) -> Fraction:
    """Probability the attacker guesses the secret in one try after observing."""
    prior = prior or Prior.uniform(report)
    _check(report, prior)
    # sum_o pr(o) * max_K lambda_o(K) = sum_o max_K lambda(K)
    return sum((max(prior.p(k) for k in members) for members in _classes(report)), Fraction(0))


def min_entropy_remaining(report: OracleReport, prior: Prior | None = None) -> float:
    return -math.log2(min_vulnerability_remaining(report, prior))


def metrics_block(report: OracleReport, prior: Prior | None = None) -> dict:
    prior = prior or Prior.uniform(report)
    return {
        "classes": report.num_classes,
        "capacity_bits": channel_capacity(report),
        "shannon_prior": shannon_prior(prior),
        "shannon_remaining": shannon_remaining(report, prior),
        "min_prior": min_entropy_prior(prior),
        "min_remaining": min_entropy_remaining(report, prior),
    }
