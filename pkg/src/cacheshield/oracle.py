"""Exhaustive ground truth: run every secret through the concrete interpreter
and the cache simulator, then group secrets by what the attacker sees."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .cache import CacheConfig, apply_actions, map_address, observe, simulate
from .program import Program, count_sites, enumerate_secrets, execute


@dataclass
class Run:
    """One concrete execution, indexed by access site (1-based sites, 0-based lists)."""

    executed: list[bool]  # per site
    site_misses: list[int]  # per site; 0 for sites not executed
    blocks: list[int]  # executed accesses, in order
    misses: list[int]  # executed accesses, in order


def concrete_run(p: Program, cfg: CacheConfig, secrets: dict, n_sites: int | None = None) -> Run:
    if n_sites is None:
        n_sites = count_sites(p.body)
    accesses = execute(p, secrets)
    blocks = [map_address(cfg, addr)[0] for _, addr in accesses]
    misses = simulate(cfg, blocks)
    executed = [False] * n_sites
    site_misses = [0] * n_sites
    for (site, _), m in zip(accesses, misses):
        executed[site - 1] = True
        site_misses[site - 1] = m
    return Run(executed, site_misses, blocks, misses)


@dataclass
class OracleReport:
    model: str
    config: CacheConfig
    secret_names: list[str]
    classes: dict  # Observation -> list of secret tuples
    miss_vectors: dict = field(default_factory=dict)  # secret tuple -> attacker-visible bits

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def domain_size(self) -> int:
        return sum(len(v) for v in self.classes.values())

    def class_of(self, secret: dict):
        key = tuple(secret[n] for n in self.secret_names)
        for obs, members in self.classes.items():
            if key in members:
                return obs
        raise KeyError(secret)

    def sizes(self) -> list[int]:
        return [len(self.classes[o]) for o in sorted(self.classes)]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "cache": self.config.as_dict(),
            "secrets": self.secret_names,
            "num_classes": self.num_classes,
            "classes": [
                {"observation": str(o), "size": len(self.classes[o]),
                 "members": [list(m) for m in sorted(self.classes[o])]}
                for o in sorted(self.classes)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def oracle_classes(p: Program, cfg: CacheConfig, model: str, patches=None) -> OracleReport:
    """Partition the whole secret domain by attacker observation.

    ``patches`` is an optional sequence of objects with ``holds(executed,
    site_misses)`` and ``actions`` (see :mod:`cacheshield.patch`); the first
    patch whose monitor holds for an input rewrites that input's trace.
    """
    names = [n for n, _ in p.secrets]
    n_sites = count_sites(p.body)
    classes: dict = {}
    vectors: dict = {}
    for secret in enumerate_secrets(p):
        run = concrete_run(p, cfg, secret, n_sites)
        bits = run.misses
        for patch in patches or ():
            if patch.holds(run.executed, run.site_misses):
                bits = apply_actions(run.misses, patch.actions, run.blocks)
                break
        key = tuple(secret[n] for n in names)
        vectors[key] = bits
        classes.setdefault(observe(model, bits), []).append(key)
    return OracleReport(model, cfg, names, classes, vectors)
