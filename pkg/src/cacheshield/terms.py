"""Typed term language shared by the symbolic layer and the solver backend.

Terms are immutable trees over booleans, unbounded integers and fixed-width
bitvectors.  The smart constructors fold constants and drop neutral elements,
which keeps statically known parts of the cache formulas small.  Terms print
to SMT-LIB 2 syntax and can be parsed back from it, so the same objects are
used for solver queries, concrete evaluation and on-disk patch monitors.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping


@dataclass(frozen=True)
class Sort:
    kind: str  # "Bool" | "Int" | "BV"
    width: int = 0

    def smt(self) -> str:
        if self.kind == "BV":
            return f"(_ BitVec {self.width})"
        return self.kind

    def __str__(self) -> str:
        return self.smt()


BOOL = Sort("Bool")
INT = Sort("Int")


def bv(width: int) -> Sort:
    return Sort("BV", width)


class TermError(ValueError):
    pass


class Term:
    """A node of the term tree.

    ``op`` is "var", "const" or an SMT-LIB function symbol.  ``params`` holds
    the variable name, the constant value, or indexed-operator indices.
    """

    __slots__ = ("op", "args", "sort", "params", "_text")

    def __init__(self, op: str, args: tuple, sort: Sort, params: tuple = ()):
        self.op = op
        self.args = args
        self.sort = sort
        self.params = params
        self._text = None

    # structural identity goes through the printed form
    def __eq__(self, other):
        return isinstance(other, Term) and self.smt() == other.smt()

    def __hash__(self):
        return hash(self.smt())

    def __repr__(self):
        return f"Term({self.smt()})"

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    @property
    def value(self):
        if self.op != "const":
            raise TermError(f"not a constant: {self.smt()}")
        return self.params[0]

    @property
    def name(self) -> str:
        if self.op != "var":
            raise TermError(f"not a variable: {self.smt()}")
        return self.params[0]

    def smt(self) -> str:
        if self._text is None:
            self._text = _print(self)
        return self._text

    def free_vars(self) -> set[str]:
        out: set[str] = set()
        stack = [self]
        seen: set[int] = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.op == "var":
                out.add(t.params[0])
            else:
                stack.extend(t.args)
        return out


_SYMBOL_RE = re.compile(r"^[A-Za-z_~!@$%^&*+=<>.?/-][A-Za-z0-9_~!@$%^&*+=<>.?/-]*$")


def _print(t: Term) -> str:
    if t.op == "var":
        name = t.params[0]
        return name if _SYMBOL_RE.match(name) else f"|{name}|"
    if t.op == "const":
        v = t.params[0]
        if t.sort == BOOL:
            return "true" if v else "false"
        if t.sort == INT:
            return str(v) if v >= 0 else f"(- {-v})"
        return f"(_ bv{v} {t.sort.width})"
    head = t.op
    if t.op == "extract":
        head = f"(_ extract {t.params[0]} {t.params[1]})"
    elif t.op == "zero_extend":
        head = f"(_ zero_extend {t.params[0]})"
    return "(" + head + " " + " ".join(a.smt() for a in t.args) + ")"


# ---------------------------------------------------------------------------
# constructors

TRUE = Term("const", (), BOOL, (True,))
FALSE = Term("const", (), BOOL, (False,))


def var(name: str, sort: Sort) -> Term:
    return Term("var", (), sort, (name,))


def const(value, sort: Sort) -> Term:
    if sort == BOOL:
        return TRUE if value else FALSE
    if sort.kind == "BV":
        value = int(value) & ((1 << sort.width) - 1)
    return Term("const", (), sort, (int(value),))


def boolval(b: bool) -> Term:
    return TRUE if b else FALSE


def bvconst(value: int, width: int) -> Term:
    return const(value, bv(width))


def intconst(value: int) -> Term:
    return const(value, INT)


def Not(a: Term) -> Term:
    if a.is_const:
        return boolval(not a.value)
    if a.op == "not":
        return a.args[0]
    return Term("not", (a,), BOOL)


def And(*args) -> Term:
    items = _flatten(args, "and")
    out = []
    for a in items:
        if a.is_const:
            if not a.value:
                return FALSE
            continue
        out.append(a)
    if not out:
        return TRUE
    if len(out) == 1:
        return out[0]
    return Term("and", tuple(out), BOOL)


def Or(*args) -> Term:
    items = _flatten(args, "or")
    out = []
    for a in items:
        if a.is_const:
            if a.value:
                return TRUE
            continue
        out.append(a)
    if not out:
        return FALSE
    if len(out) == 1:
        return out[0]
    return Term("or", tuple(out), BOOL)


def _flatten(args, op) -> list[Term]:
    items: list[Term] = []
    for a in args:
        if isinstance(a, Term):
            if a.op == op:
                items.extend(a.args)
            else:
                items.append(a)
        else:
            items.extend(_flatten(tuple(a), op))
    return items


def Implies(a: Term, b: Term) -> Term:
    return Or(Not(a), b)


def Ite(c: Term, a: Term, b: Term) -> Term:
    if c.is_const:
        return a if c.value else b
    if a.sort == BOOL and a.is_const and b.is_const:
        if a.value and not b.value:
            return c
        if b.value and not a.value:
            return Not(c)
    if a.smt() == b.smt():
        return a
    return Term("ite", (c, a, b), a.sort)


def Eq(a: Term, b: Term) -> Term:
    if a.sort != b.sort:
        raise TermError(f"sort mismatch in =: {a.sort} vs {b.sort}")
    if a.is_const and b.is_const:
        return boolval(a.value == b.value)
    if a.sort == BOOL:
        if a.is_const:
            return b if a.value else Not(b)
        if b.is_const:
            return a if b.value else Not(a)
    return Term("=", (a, b), BOOL)


def Distinct(a: Term, b: Term) -> Term:
    return Not(Eq(a, b))


def Sum(args: Iterable[Term]) -> Term:
    items = list(args)
    total = 0
    rest = []
    for a in items:
        if a.sort != INT:
            raise TermError("Sum over non-integer term")
        if a.is_const:
            total += a.value
        else:
            rest.append(a)
    if not rest:
        return intconst(total)
    if total:
        rest.append(intconst(total))
    if len(rest) == 1:
        return rest[0]
    return Term("+", tuple(rest), INT)


def BoolToInt(b: Term) -> Term:
    return Ite(b, intconst(1), intconst(0))


def IntCmp(op: str, a: Term, b: Term) -> Term:
    if a.is_const and b.is_const:
        return boolval(_INT_CMP[op](a.value, b.value))
    return Term(op, (a, b), BOOL)


_INT_CMP = {
    ">=": lambda x, y: x >= y,
    "<=": lambda x, y: x <= y,
    ">": lambda x, y: x > y,
    "<": lambda x, y: x < y,
}


def _mask(w: int) -> int:
    return (1 << w) - 1


def _shl(x: int, s: int, w: int) -> int:
    return (x << s) & _mask(w) if s < w else 0


def _lshr(x: int, s: int, w: int) -> int:
    return x >> s if s < w else 0


_BV_FOLD = {
    "bvadd": lambda x, y, w: (x + y) & _mask(w),
    "bvsub": lambda x, y, w: (x - y) & _mask(w),
    "bvmul": lambda x, y, w: (x * y) & _mask(w),
    "bvand": lambda x, y, w: x & y,
    "bvor": lambda x, y, w: x | y,
    "bvxor": lambda x, y, w: x ^ y,
    "bvshl": _shl,
    "bvlshr": _lshr,
}

_BV_CMP = {
    "bvult": lambda x, y: x < y,
    "bvule": lambda x, y: x <= y,
    "bvugt": lambda x, y: x > y,
    "bvuge": lambda x, y: x >= y,
}

BV_BINOPS = frozenset(_BV_FOLD)
BV_CMPOPS = frozenset(_BV_CMP)


def BVBin(op: str, a: Term, b: Term) -> Term:
    if a.sort != b.sort or a.sort.kind != "BV":
        raise TermError(f"{op} needs equal bitvector sorts")
    w = a.sort.width
    if a.is_const and b.is_const:
        return bvconst(_BV_FOLD[op](a.value, b.value, w), w)
    # neutral elements keep static addresses compact
    if op in ("bvadd", "bvor", "bvxor", "bvsub", "bvshl", "bvlshr") and b.is_const and b.value == 0:
        return a
    if op in ("bvadd", "bvor", "bvxor") and a.is_const and a.value == 0:
        return b
    if op == "bvmul" and b.is_const and b.value == 1:
        return a
    if op == "bvmul" and a.is_const and a.value == 1:
        return b
    if op in ("bvmul", "bvand") and ((a.is_const and a.value == 0) or (b.is_const and b.value == 0)):
        return bvconst(0, w)
    return Term(op, (a, b), a.sort)


def BVCmp(op: str, a: Term, b: Term) -> Term:
    if a.is_const and b.is_const:
        return boolval(_BV_CMP[op](a.value, b.value))
    return Term(op, (a, b), BOOL)


def Extract(hi: int, lo: int, a: Term) -> Term:
    if not (0 <= lo <= hi < a.sort.width):
        raise TermError(f"bad extract [{hi}:{lo}] of width {a.sort.width}")
    if a.is_const:
        return bvconst((a.value >> lo) & _mask(hi - lo + 1), hi - lo + 1)
    return Term("extract", (a,), bv(hi - lo + 1), (hi, lo))


def ZeroExtend(n: int, a: Term) -> Term:
    if n == 0:
        return a
    if a.is_const:
        return bvconst(a.value, a.sort.width + n)
    return Term("zero_extend", (a,), bv(a.sort.width + n), (n,))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(t: Term, env: Mapping[str, object], cache: dict | None = None):
    """Evaluate ``t`` under ``env`` (variable name -> bool/int)."""
    if cache is None:
        cache = {}
    return _eval(t, env, cache)


def _eval(t: Term, env, cache):
    key = id(t)
    if key in cache:
        return cache[key]
    op = t.op
    if op == "const":
        r = t.params[0]
    elif op == "var":
        try:
            r = env[t.params[0]]
        except KeyError:
            raise TermError(f"unbound variable {t.params[0]}") from None
    elif op == "and":
        r = True
        for a in t.args:
            if not _eval(a, env, cache):
                r = False
                break
    elif op == "or":
        r = False
        for a in t.args:
            if _eval(a, env, cache):
                r = True
                break
    elif op == "not":
        r = not _eval(t.args[0], env, cache)
    elif op == "=>":
        r = (not _eval(t.args[0], env, cache)) or bool(_eval(t.args[1], env, cache))
    elif op == "ite":
        r = _eval(t.args[1], env, cache) if _eval(t.args[0], env, cache) else _eval(t.args[2], env, cache)
    elif op == "=":
        r = _eval(t.args[0], env, cache) == _eval(t.args[1], env, cache)
    elif op == "distinct":
        r = _eval(t.args[0], env, cache) != _eval(t.args[1], env, cache)
    elif op == "+":
        r = sum(_eval(a, env, cache) for a in t.args)
    elif op == "-":
        vals = [_eval(a, env, cache) for a in t.args]
        r = -vals[0] if len(vals) == 1 else vals[0] - sum(vals[1:])
    elif op in _INT_CMP:
        r = _INT_CMP[op](_eval(t.args[0], env, cache), _eval(t.args[1], env, cache))
    elif op in _BV_FOLD:
        r = _BV_FOLD[op](_eval(t.args[0], env, cache), _eval(t.args[1], env, cache), t.sort.width)
    elif op in _BV_CMP:
        r = _BV_CMP[op](_eval(t.args[0], env, cache), _eval(t.args[1], env, cache))
    elif op == "extract":
        hi, lo = t.params
        r = (_eval(t.args[0], env, cache) >> lo) & _mask(hi - lo + 1)
    elif op == "zero_extend":
        r = _eval(t.args[0], env, cache)
    else:
        raise TermError(f"cannot evaluate operator {op}")
    cache[key] = r
    return r


# ---------------------------------------------------------------------------
# parsing SMT-LIB terms back into Term objects

_TOKEN_RE = re.compile(r"\s*(?:(\()|(\))|(\|[^|]*\|)|([^\s()|;]+)|(;[^\n]*))")


def parse_sexpr(text: str):
    """Parse one or more s-expressions; returns a list of nested lists/atoms."""
    stack: list[list] = [[]]
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise TermError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        pos = m.end()
        lpar, rpar, quoted, atom, _comment = m.groups()
        if lpar:
            stack.append([])
        elif rpar:
            if len(stack) == 1:
                raise TermError("unbalanced ')'")
            done = stack.pop()
            stack[-1].append(done)
        elif quoted:
            stack[-1].append(quoted[1:-1])
        elif atom:
            stack[-1].append(atom)
    if len(stack) != 1:
        raise TermError("unbalanced '('")
    return stack[0]


def parse_term(text: str, sorts: Mapping[str, Sort]) -> Term:
    exprs = parse_sexpr(text)
    if len(exprs) != 1:
        raise TermError("expected exactly one term")
    return build_term(exprs[0], sorts)


def build_term(e, sorts: Mapping[str, Sort]) -> Term:
    if isinstance(e, str):
        if e == "true":
            return TRUE
        if e == "false":
            return FALSE
        if e.isdigit():
            return intconst(int(e))
        if e.startswith("#b"):
            return bvconst(int(e[2:], 2), len(e) - 2)
        if e.startswith("#x"):
            return bvconst(int(e[2:], 16), 4 * (len(e) - 2))
        if e in sorts:
            return var(e, sorts[e])
        raise TermError(f"unknown symbol {e}")
    if not e:
        raise TermError("empty application")
    head = e[0]
    if isinstance(head, list):
        if head[:2] == ["_", "extract"]:
            return Extract(int(head[2]), int(head[3]), build_term(e[1], sorts))
        if head[:2] == ["_", "zero_extend"]:
            return ZeroExtend(int(head[2]), build_term(e[1], sorts))
        raise TermError(f"unsupported indexed operator {head}")
    if head == "_" and len(e) == 3 and e[1].startswith("bv"):
        return bvconst(int(e[1][2:]), int(e[2]))
    args = [build_term(a, sorts) for a in e[1:]]
    if head == "and":
        return And(*args)
    if head == "or":
        return Or(*args)
    if head == "not":
        return Not(args[0])
    if head == "=>":
        return Implies(args[0], args[1])
    if head == "ite":
        return Ite(*args)
    if head == "=":
        return Eq(args[0], args[1])
    if head == "distinct":
        return Distinct(args[0], args[1])
    if head == "+":
        return Sum(args)
    if head == "-" and len(args) == 1 and args[0].is_const:
        return intconst(-args[0].value)
    if head in _INT_CMP:
        return IntCmp(head, args[0], args[1])
    if head in _BV_FOLD:
        return BVBin(head, args[0], args[1])
    if head in _BV_CMP:
        return BVCmp(head, args[0], args[1])
    raise TermError(f"unsupported operator {head}")
