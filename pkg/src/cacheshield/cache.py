"""Concrete cache model: geometry, exact replacement policies, attacker
observations and runtime patch actions."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence, Union

import yaml

POLICIES = ("direct", "lru", "fifo")


class CacheConfigError(ValueError):
    pass


class ActionError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class CacheConfig:
    sets: int
    line_size: int
    assoc: int = 1
    policy: str = "direct"

    def __post_init__(self):
        if not _is_pow2(self.sets) or not _is_pow2(self.line_size):
            raise CacheConfigError("sets and line_size must be powers of two")
        if self.policy not in POLICIES:
            raise CacheConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.assoc < 1:
            raise CacheConfigError("associativity must be at least 1")
        if self.policy == "direct" and self.assoc != 1:
            raise CacheConfigError("a direct-mapped cache has associativity 1")
        if self.offset_bits + self.set_bits >= 32:
            raise CacheConfigError("cache geometry leaves no tag bits in a 32-bit address")

    @property
    def offset_bits(self) -> int:
        return self.line_size.bit_length() - 1

    @property
    def set_bits(self) -> int:
        return self.sets.bit_length() - 1

    @property
    def size(self) -> int:
        return self.sets * self.line_size * self.assoc

    def as_dict(self) -> dict:
        return {"sets": self.sets, "line_size": self.line_size, "assoc": self.assoc, "policy": self.policy}

    @classmethod
    def from_dict(cls, d: dict) -> "CacheConfig":
        unknown = set(d) - {"sets", "line_size", "assoc", "policy"}
        if unknown:
            raise CacheConfigError(f"unknown cache config keys: {sorted(unknown)}")
        try:
            return cls(int(d["sets"]), int(d["line_size"]), int(d.get("assoc", 1)),
                       str(d.get("policy", "direct")).lower())
        except KeyError as e:
            raise CacheConfigError(f"missing cache config key {e.args[0]!r}") from None

    @classmethod
    def load(cls, path) -> "CacheConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise CacheConfigError(f"{path}: expected a mapping of cache parameters")
        return cls.from_dict(data)


def map_address(cfg: CacheConfig, addr: int) -> tuple[int, int, int]:
    """Split a byte address into ``(block, set, tag)``."""
    if addr < 0:
        raise ValueError("negative address")
    block = addr >> cfg.offset_bits
    return block, block & (cfg.sets - 1), block >> cfg.set_bits


def simulate(cfg: CacheConfig, blocks: Sequence[int]) -> list[int]:
    """Miss vector (1 = miss) for a block sequence, starting from an empty cache."""
    ways: dict[int, OrderedDict] = {}
    out = []
    for b in blocks:
        s = ways.setdefault(b & (cfg.sets - 1), OrderedDict())
        if b in s:
            out.append(0)
            if cfg.policy == "lru":
                s.move_to_end(b)
            continue
        out.append(1)
        if len(s) >= cfg.assoc:
            s.popitem(last=False)  # LRU: least recent; FIFO: oldest insertion
        s[b] = True
    return out


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True, order=True)
class TimeObs:
    misses: int

    def __str__(self):
        return str(self.misses)


@dataclass(frozen=True, order=True)
class TraceObs:
    bits: tuple

    def __str__(self):
        return "".join(map(str, self.bits))

    def __len__(self):
        return len(self.bits)


Observation = Union[TimeObs, TraceObs]
MODELS = ("time", "trace")


def observe(model: str, misses: Sequence[int]) -> Observation:
    if model == "time":
        return TimeObs(sum(1 for m in misses if m))
    if model == "trace":
        return TraceObs(tuple(1 if m else 0 for m in misses))
    raise ValueError(f"unknown attack model {model!r}")


def parse_observation(model: str, text: str) -> Observation:
    if model == "time":
        return TimeObs(int(text))
    if text and set(text) - {"0", "1"}:
        raise ValueError(f"bad trace observation {text!r}")
    return TraceObs(tuple(int(c) for c in text))


# ---------------------------------------------------------------------------
# runtime actions


@dataclass(frozen=True)
class InjectMiss:
    at: int
    kind = "miss"


@dataclass(frozen=True)
class InjectHit:
    at: int
    kind = "hit"


@dataclass(frozen=True)
class Invalidate:
    """Turn the next access to ``block`` (at or after position ``at``) into a miss.

    ``block=None`` targets whatever block the ``at``-th executed access touches,
    resolved when the patch runs.
    """

    at: int
    block: int | None = None
    kind = "invalidate"


RuntimeAction = Union[InjectMiss, InjectHit, Invalidate]


def action_to_dict(a: RuntimeAction) -> dict:
    d = {"at": a.at, "kind": a.kind}
    if isinstance(a, Invalidate) and a.block is not None:
        d["block"] = a.block
    return d


def action_from_dict(d: dict) -> RuntimeAction:
    kind, at = d["kind"], int(d["at"])
    if kind == "miss":
        return InjectMiss(at)
    if kind == "hit":
        return InjectHit(at)
    if kind == "invalidate":
        return Invalidate(at, d.get("block"))
    raise ActionError(f"unknown action kind {kind!r}")


def apply_actions(misses: Sequence[int], actions: Sequence[RuntimeAction],
                  blocks: Sequence[int] | None = None) -> list[int]:
    """Attacker-visible trace after running ``actions`` alongside an execution.

    ``at`` counts executed program accesses: an injection at ``c`` lands after
    the first ``c`` program accesses.  Injections do not disturb cache state,
    so invalidations are resolved against the unpatched miss vector.
    """
    n = len(misses)
    bits = [1 if m else 0 for m in misses]
    inserts: dict[int, list[int]] = {}
    for a in actions:
        if not 0 <= a.at <= n:
            raise ActionError(f"action position {a.at} outside trace of length {n}")
        if isinstance(a, Invalidate):
            if a.block is None:
                if a.at >= n:
                    raise ActionError(f"no access at position {a.at} to invalidate")
                bits[a.at] = 1
                continue
            if blocks is None:
                raise ActionError("invalidating a named block needs the accessed blocks")
            target = next((k for k in range(a.at, n) if blocks[k] == a.block), None)
            if target is None:
                raise ActionError(f"block {a.block} is never accessed after position {a.at}")
            bits[target] = 1
        elif isinstance(a, InjectHit):
            if a.at == 0:
                raise ActionError("cannot inject a hit before the first access")
            inserts.setdefault(a.at, []).append(0)
        else:
            inserts.setdefault(a.at, []).append(1)
    out: list[int] = []
    for pos in range(n + 1):
        out.extend(inserts.get(pos, ()))
        if pos < n:
            out.append(bits[pos])
    return out
