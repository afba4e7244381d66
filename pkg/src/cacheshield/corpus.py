"""Desk-scale example programs, cache fixtures and a random program generator."""

from __future__ import annotations

import random

from .cache import CacheConfig

# 1KB direct-mapped cache with 32-byte lines
DESK_CACHE = CacheConfig(sets=32, line_size=32, assoc=1, policy="direct")

# Safe under timing: one of two disjoint cold misses, then C's block twice.
# The last index is secret but stays inside C's first line.
EXAMPLE_A = """\
program exA;
secret key:u8;
array A[8]:4 @0x000;
array B[8]:4 @0x100;
array C[8]:4 @0x200;
if (key < 128) { load A[0] } else { load B[0] }
load C[0]
load C[key & 7]
"""

# Leaky: key = 255 preloads the block read by the two final accesses.
EXAMPLE_B = """\
program exB;
secret key:u8;
array A[8]:4 @0x000;
array T[256]:32 @0x2000;
if (key < 128) { load A[0] } else { load T[key] }
load T[255]
load T[255]
"""

# Three timing classes (1, 2 and 3 misses).
EXAMPLE_THREE = """\
program three;
secret key:u8;
array A[4]:32 @0x000;
array B[4]:32 @0x400;
load A[0]
if (key < 100) { load A[0] } else if (key < 200) { load B[0] } else { load B[0]; load B[1] }
"""

# Small geometries used for the random corpus so that conflicts are common.
CORPUS_CACHES = {
    "direct": CacheConfig(sets=4, line_size=16, assoc=1, policy="direct"),
    "lru": CacheConfig(sets=2, line_size=16, assoc=2, policy="lru"),
    "fifo": CacheConfig(sets=2, line_size=16, assoc=2, policy="fifo"),
}


def block_sequence_program(blocks, line_size: int = 16) -> str:
    """Straight-line loads touching the given block ids in order."""
    top = max(blocks) + 1
    lines = ["secret k:u1;", f"array M[{top}]:{line_size} @0x000;"]
    lines += [f"load M[{b}]" for b in blocks]
    return "\n".join(lines) + "\n"


class _Gen:
    """Random program text with at most ``max_accesses`` unrolled accesses."""

    def __init__(self, rng: random.Random, max_accesses: int, safe: bool):
        self.rng = rng
        self.budget = max_accesses
        self.safe = safe
        self.lines: list[str] = []
        self.secrets: list[tuple[str, int]] = []
        self.arrays: list[tuple[str, int, int, int]] = []  # name, count, elem, base
        self.lets: list[str] = []

    def header(self):
        r = self.rng
        total = r.randint(2, 8)
        if total >= 4 and r.random() < 0.35:
            a = r.randint(1, total - 1)
            self.secrets = [("k", a), ("h", total - a)]
        else:
            self.secrets = [("k", total)]
        base = 0
        for name in "ABCD"[: r.randint(2, 4)]:
            elem = r.choice([1, 2, 4, 8, 16])
            count = r.choice([4, 8, 16])
            self.arrays.append((name, count, elem, base))
            size = count * elem
            base += (size + 63) // 64 * 64 + r.choice([0, 64])
        for n, w in self.secrets:
            self.lines.append(f"secret {n}:u{w};")
        for name, count, elem, b in self.arrays:
            self.lines.append(f"array {name}[{count}]:{elem} @0x{b:03x};")

    def secret(self) -> str:
        return self.rng.choice(self.secrets)[0]

    def leaky_index(self, count: int) -> str:
        r = self.rng
        s = self.secret()
        forms = [f"{s} & {count - 1}", f"({s} >> 1) & {count - 1}", f"({s} + {r.randint(0, 7)}) & {count - 1}"]
        if self.lets:
            forms.append(f"{r.choice(self.lets)} & {count - 1}")
        return r.choice(forms)

    def safe_index(self, elem: int) -> str | None:
        # secret offsets that never leave the array's first 16-byte line
        span = 16 // elem
        if span < 2:
            return None
        return f"{self.secret()} & {span - 1}"

    def access(self, depth: int, out: list[str]):
        r = self.rng
        name, count, elem, _ = r.choice(self.arrays)
        op = "load" if r.random() < 0.8 else "store"
        roll = r.random()
        if roll < 0.45:
            idx = str(r.randrange(count))
        elif self.safe:
            idx = self.safe_index(elem) or "0"
        else:
            idx = self.leaky_index(count)
        out.append("  " * depth + f"{op} {name}[{idx}]")
        self.budget -= 1

    def block(self, depth: int, out: list[str], n_stmts: int):
        r = self.rng
        for _ in range(n_stmts):
            if self.budget <= 0:
                return
            roll = r.random()
            if roll < 0.55 or depth >= 2:
                self.access(depth, out)
            elif roll < 0.7 and self.budget >= 2:
                self.loop(depth, out)
            elif (roll < 0.9 or depth > 0) and self.budget >= 2:
                self.branch(depth, out)
            elif depth > 0:
                self.access(depth, out)
            else:
                # top level only: bindings made inside an arm end with it
                v = f"v{len(self.lets)}"
                s = self.secret()
                out.append("  " * depth + f"let {v} = {s} ^ {r.randint(1, 15)}")
                self.lets.append(v)

    def loop(self, depth: int, out: list[str]):
        r = self.rng
        name, count, elem, _ = r.choice(self.arrays)
        trips = min(r.randint(2, 4), self.budget, count)
        out.append("  " * depth + f"for i in 0..{trips} {{")
        out.append("  " * (depth + 1) + f"load {name}[i]")
        self.budget -= trips
        out.append("  " * depth + "}")

    def branch(self, depth: int, out: list[str]):
        r = self.rng
        s = self.secret()
        width = dict(self.secrets)[s]
        cond = r.choice([f"{s} < {r.randint(1, (1 << width) - 1)}", f"({s} & 1) == 0", f"{s} == {r.randrange(1 << width)}"])
        out.append("  " * depth + f"if ({cond}) {{")
        if self.safe:
            # both arms perform the same constant accesses
            arm: list[str] = []
            n = min(r.randint(1, 2), self.budget // 2)
            for _ in range(max(n, 1)):
                name, count, _, _ = r.choice(self.arrays)
                arm.append(f"load {name}[{r.randrange(count)}]")
            self.budget -= 2 * len(arm)
            out += ["  " * (depth + 1) + a for a in arm]
            out.append("  " * depth + "} else {")
            out += ["  " * (depth + 1) + a for a in arm]
        else:
            self.block(depth + 1, out, r.randint(1, 2))
            out.append("  " * depth + "} else {")
            self.block(depth + 1, out, r.randint(0, 2))
        out.append("  " * depth + "}")


def random_program(rng: random.Random, max_accesses: int = 20, safe: bool | None = None) -> str:
    """Source text of a random program with at most ``max_accesses`` accesses.

    ``safe=True`` restricts secret influence to block-invariant offsets and
    branches whose arms touch the same blocks; such programs are usually,
    but not always, side-channel free.
    """
    if safe is None:
        safe = rng.random() < 0.5
    g = _Gen(rng, max_accesses, safe)
    g.header()
    body: list[str] = []
    g.block(0, body, rng.randint(3, 14))
    if not any(line.strip().startswith(("load", "store")) for line in body):
        name = g.arrays[0][0]
        body.append(f"load {name}[0]")
    return "\n".join(g.lines + body) + "\n"


def random_corpus(seed: int, count: int, max_accesses: int = 20) -> list[str]:
    rng = random.Random(seed)
    return [random_program(rng, max_accesses) for _ in range(count)]
