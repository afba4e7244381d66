"""The analyzable input language: parsing, pretty printing, unrolling and
concrete execution.

A program declares secret inputs and arrays placed at fixed byte addresses,
then runs a body of loads, stores, ``let`` bindings, ``if``/``else`` and
``for`` loops with constant bounds.  All values are 32-bit unsigned words.

Example::

    secret key:u8;
    array T[256]:4 @0x000;
    if (key < 128) { load T[0] } else { load T[key] }
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Iterator, Union

from . import terms as T

WORD = 32
MASK = (1 << WORD) - 1
DEFAULT_UNROLL_LIMIT = 4096
MAX_SECRET_BITS = 20
MAX_SECRET_WIDTH = 16


class ProgramError(ValueError):
    """Malformed program text or an invariant violation."""

    def __init__(self, msg: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        if line is not None:
            msg = f"{line}:{col}: {msg}"
        super().__init__(msg)


class UnrollLimitError(ProgramError):
    pass


class EnumerationLimitError(ProgramError):
    pass


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Name:
    id: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class UnOp:
    op: str
    operand: "Expr"


Expr = Union[Num, Name, BinOp, UnOp]


@dataclass(frozen=True)
class Access:
    kind: str  # "load" | "store"
    array: str
    index: Expr


@dataclass(frozen=True)
class Let:
    name: str
    value: Expr


@dataclass(frozen=True)
class If:
    cond: Expr
    then: tuple
    orelse: tuple = ()


@dataclass(frozen=True)
class For:
    var: str
    lo: Expr
    hi: Expr
    body: tuple


Stmt = Union[Access, Let, If, For]


@dataclass(frozen=True)
class ArrayDecl:
    name: str
    count: int
    elem_size: int
    base: int

    @property
    def end(self) -> int:
        return self.base + self.count * self.elem_size


@dataclass(frozen=True)
class Program:
    secrets: tuple  # of (name, width)
    arrays: tuple  # of ArrayDecl
    body: tuple  # of Stmt
    name: str = "main"

    @property
    def secret_bits(self) -> int:
        return sum(w for _, w in self.secrets)

    def array(self, name: str) -> ArrayDecl:
        for a in self.arrays:
            if a.name == name:
                return a
        raise ProgramError(f"unknown array {name}")


CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")
LOGIC_OPS = ("&&", "||")
# lowest to highest
_PRECEDENCE = [("||",), ("&&",), ("|",), ("^",), ("&",), ("==", "!="),
               ("<", "<=", ">", ">="), ("<<", ">>"), ("+", "-"), ("*",)]


# ---------------------------------------------------------------------------
# tokenizer / parser

_TOKEN_SPEC = [
    ("WS", r"[ \t\r]+"),
    ("NL", r"\n"),
    ("COMMENT", r"#[^\n]*"),
    ("HEX", r"0[xX][0-9a-fA-F]+"),
    ("INT", r"[0-9]+"),
    ("NAME", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("OP", r"\.\.|<<|>>|<=|>=|==|!=|&&|\|\||[-+*&|^<>!~=(){}\[\];:@,]"),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{n}>{p})" for n, p in _TOKEN_SPEC))
_KEYWORDS = {"secret", "array", "load", "store", "let", "if", "else", "for", "in", "program"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ProgramError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "NL":
            line += 1
            line_start = m.end()
        elif kind not in ("WS", "COMMENT"):
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    toks.append(_Tok("EOF", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.tok
        return ProgramError(msg, tok.line, tok.col)

    def accept(self, text: str) -> bool:
        if self.tok.text == text and self.tok.kind in ("OP", "NAME"):
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> _Tok:
        tok = self.tok
        if not self.accept(text):
            raise self.error(f"expected {text!r}, found {tok.text or 'end of input'!r}")
        return tok

    def name(self) -> str:
        tok = self.tok
        if tok.kind != "NAME" or tok.text in _KEYWORDS:
            raise self.error(f"expected identifier, found {tok.text or 'end of input'!r}")
        self.i += 1
        return tok.text

    def integer(self) -> int:
        tok = self.tok
        if tok.kind == "INT":
            self.i += 1
            return int(tok.text)
        if tok.kind == "HEX":
            self.i += 1
            return int(tok.text, 16)
        raise self.error(f"expected integer literal, found {tok.text or 'end of input'!r}")

    # -- top level

    def program(self) -> tuple[str | None, list, list, list]:
        name = None
        secrets: list = []
        arrays: list = []
        body: list = []
        if self.accept("program"):
            name = self.name()
            self.expect(";")
        while self.tok.kind != "EOF":
            if self.accept("secret"):
                start = self.toks[self.i - 1]
                sname = self.name()
                self.expect(":")
                wt = self.tok
                if wt.kind != "NAME" or not re.fullmatch(r"u[0-9]+", wt.text):
                    raise self.error("expected width like u8")
                self.i += 1
                width = int(wt.text[1:])
                if not 1 <= width <= MAX_SECRET_WIDTH:
                    raise self.error(f"secret width must be 1..{MAX_SECRET_WIDTH}", wt)
                self.expect(";")
                secrets.append((sname, width, start))
            elif self.accept("array"):
                start = self.toks[self.i - 1]
                aname = self.name()
                self.expect("[")
                count = self.integer()
                self.expect("]")
                self.expect(":")
                elem = self.integer()
                self.expect("@")
                base = self.integer()
                self.expect(";")
                arrays.append((ArrayDecl(aname, count, elem, base), start))
            else:
                body.append(self.statement())
        return name, secrets, arrays, body

    def block(self) -> tuple:
        self.expect("{")
        out = []
        while not self.accept("}"):
            if self.tok.kind == "EOF":
                raise self.error("unterminated block")
            out.append(self.statement())
        return tuple(out)

    def statement(self):
        tok = self.tok
        if self.accept("load") or self.accept("store"):
            arr = self.name()
            self.expect("[")
            idx = self.expr()
            self.expect("]")
            self.accept(";")
            return _Located(Access(tok.text, arr, idx), tok)
        if self.accept("let"):
            name = self.name()
            self.expect("=")
            value = self.expr()
            self.accept(";")
            return _Located(Let(name, value), tok)
        if self.accept("if"):
            self.expect("(")
            cond = self.expr()
            self.expect(")")
            then = self.block()
            orelse: tuple = ()
            if self.accept("else"):
                if self.tok.text == "if":
                    orelse = (self.statement(),)
                else:
                    orelse = self.block()
            return _Located(If(cond, then, orelse), tok)
        if self.accept("for"):
            v = self.name()
            self.expect("in")
            lo = self.expr()
            self.expect("..")
            hi = self.expr()
            body = self.block()
            return _Located(For(v, lo, hi, body), tok)
        raise self.error(f"expected statement, found {tok.text or 'end of input'!r}")

    # -- expressions

    def expr(self, level: int = 0):
        if level == len(_PRECEDENCE):
            return self.unary()
        left = self.expr(level + 1)
        while self.tok.kind == "OP" and self.tok.text in _PRECEDENCE[level]:
            op = self.tok.text
            self.i += 1
            right = self.expr(level + 1)
            left = BinOp(op, left, right)
        return left

    def unary(self):
        if self.tok.kind == "OP" and self.tok.text in ("!", "-", "~"):
            op = self.tok.text
            self.i += 1
            return UnOp(op, self.unary())
        return self.atom()

    def atom(self):
        tok = self.tok
        if tok.kind in ("INT", "HEX"):
            return Num(self.integer() & MASK)
        if tok.kind == "NAME" and tok.text not in _KEYWORDS:
            self.i += 1
            return Name(tok.text)
        if self.accept("("):
            e = self.expr()
            self.expect(")")
            return e
        raise self.error(f"expected expression, found {tok.text or 'end of input'!r}")


@dataclass
class _Located:
    stmt: object
    tok: _Tok


def parse_program(text: str, name: str | None = None) -> Program:
    """Parse program source into a validated :class:`Program`."""
    pname, secrets, arrays, body = _Parser(text).program()
    seen: set[str] = set()
    for sname, _, tok in secrets:
        if sname in seen:
            raise ProgramError(f"duplicate declaration {sname}", tok.line, tok.col)
        seen.add(sname)
    for decl, tok in arrays:
        if decl.name in seen:
            raise ProgramError(f"duplicate declaration {decl.name}", tok.line, tok.col)
        seen.add(decl.name)
        _check_array(decl, tok)
    decls = [d for d, _ in arrays]
    for a, b in itertools.combinations(arrays, 2):
        if a[0].base < b[0].end and b[0].base < a[0].end:
            tok = b[1]
            raise ProgramError(f"arrays {a[0].name} and {b[0].name} overlap", tok.line, tok.col)
    scope = {s for s, _, _ in secrets}
    stmts = _check_block(body, scope, set(), {d.name for d in decls})
    return Program(
        secrets=tuple((s, w) for s, w, _ in secrets),
        arrays=tuple(decls),
        body=stmts,
        name=pname or name or "main",
    )


def _check_array(decl: ArrayDecl, tok: _Tok) -> None:
    if decl.count <= 0 or decl.elem_size <= 0:
        raise ProgramError(f"array {decl.name} must have positive size", tok.line, tok.col)
    if decl.base % decl.elem_size:
        raise ProgramError(
            f"array {decl.name}: base {decl.base:#x} is not a multiple of element size {decl.elem_size}",
            tok.line, tok.col)
    if decl.end > MASK + 1:
        raise ProgramError(f"array {decl.name} exceeds the 32-bit address space", tok.line, tok.col)


def _expr_names(e) -> set[str]:
    if isinstance(e, Name):
        return {e.id}
    if isinstance(e, BinOp):
        return _expr_names(e.left) | _expr_names(e.right)
    if isinstance(e, UnOp):
        return _expr_names(e.operand)
    return set()


def _check_block(items, scope: set[str], counters: set[str], arrays: set[str]) -> tuple:
    """Resolve identifiers; returns the plain statement tuple.

    ``scope`` is mutated to hold the names visible after the block.
    """
    out = []
    for loc in items:
        s, tok = loc.stmt, loc.tok

        def resolve(e):
            for n in _expr_names(e):
                if n not in scope and n not in counters:
                    raise ProgramError(f"unknown identifier {n}", tok.line, tok.col)

        if isinstance(s, Access):
            if s.array not in arrays:
                raise ProgramError(f"unknown array {s.array}", tok.line, tok.col)
            resolve(s.index)
            out.append(s)
        elif isinstance(s, Let):
            resolve(s.value)
            if s.name in counters or s.name in arrays:
                raise ProgramError(f"cannot assign to {s.name}", tok.line, tok.col)
            scope.add(s.name)
            out.append(s)
        elif isinstance(s, If):
            resolve(s.cond)
            then_scope = set(scope)
            then = _check_block(s.then, then_scope, counters, arrays)
            else_scope = set(scope)
            orelse = _check_block(s.orelse, else_scope, counters, arrays)
            scope |= then_scope & else_scope
            out.append(If(s.cond, then, orelse))
        elif isinstance(s, For):
            for bound in (s.lo, s.hi):
                bad = _expr_names(bound) - counters
                if bad:
                    raise ProgramError(
                        f"non-constant loop bound (references {', '.join(sorted(bad))})", tok.line, tok.col)
            if s.var in scope or s.var in counters:
                raise ProgramError(f"loop variable {s.var} shadows an existing name", tok.line, tok.col)
            inner = set(scope)
            body = _check_block(s.body, inner, counters | {s.var}, arrays)
            out.append(For(s.var, s.lo, s.hi, body))
        else:  # pragma: no cover
            raise ProgramError("unknown statement")
    return tuple(out)


# ---------------------------------------------------------------------------
# pretty printing


def format_expr(e) -> str:
    if isinstance(e, Num):
        return str(e.value)
    if isinstance(e, Name):
        return e.id
    if isinstance(e, UnOp):
        return f"{e.op}{format_expr(e.operand)}" if not isinstance(e.operand, UnOp) else f"{e.op}({format_expr(e.operand)})"
    return f"({format_expr(e.left)} {e.op} {format_expr(e.right)})"


def format_program(p: Program) -> str:
    """Canonical source text; ``parse_program(format_program(p)) == p``."""
    lines = [f"program {p.name};"]
    lines += [f"secret {n}:u{w};" for n, w in p.secrets]
    lines += [f"array {a.name}[{a.count}]:{a.elem_size} @{a.base:#05x};" for a in p.arrays]
    _format_block(p.body, 0, lines)
    return "\n".join(lines) + "\n"


def _format_block(stmts, depth: int, lines: list[str]) -> None:
    pad = "  " * depth
    for s in stmts:
        if isinstance(s, Access):
            lines.append(f"{pad}{s.kind} {s.array}[{format_expr(s.index)}];")
        elif isinstance(s, Let):
            lines.append(f"{pad}let {s.name} = {format_expr(s.value)};")
        elif isinstance(s, If):
            lines.append(f"{pad}if ({format_expr(s.cond)}) {{")
            _format_block(s.then, depth + 1, lines)
            lines.append(f"{pad}}} else {{")
            _format_block(s.orelse, depth + 1, lines)
            lines.append(f"{pad}}}")
        elif isinstance(s, For):
            lines.append(f"{pad}for {s.var} in {format_expr(s.lo)}..{format_expr(s.hi)} {{")
            _format_block(s.body, depth + 1, lines)
            lines.append(f"{pad}}}")


# ---------------------------------------------------------------------------
# concrete semantics (used by the exhaustive oracle)


def _concrete_binop(op: str, a: int, b: int) -> int:
    if op == "+":
        return (a + b) & MASK
    if op == "-":
        return (a - b) & MASK
    if op == "*":
        return (a * b) & MASK
    if op == "&":
        return a & b
    if op == "|":
        return a | b
    if op == "^":
        return a ^ b
    if op == "<<":
        return (a << b) & MASK if b < WORD else 0
    if op == ">>":
        return a >> b if b < WORD else 0
    if op == "==":
        return int(a == b)
    if op == "!=":
        return int(a != b)
    if op == "<":
        return int(a < b)
    if op == "<=":
        return int(a <= b)
    if op == ">":
        return int(a > b)
    if op == ">=":
        return int(a >= b)
    if op == "&&":
        return int(bool(a) and bool(b))
    if op == "||":
        return int(bool(a) or bool(b))
    raise ProgramError(f"unknown operator {op}")


def eval_expr(e, env: dict) -> int:
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Name):
        return env[e.id]
    if isinstance(e, UnOp):
        v = eval_expr(e.operand, env)
        if e.op == "!":
            return int(v == 0)
        if e.op == "-":
            return (-v) & MASK
        return (~v) & MASK
    return _concrete_binop(e.op, eval_expr(e.left, env), eval_expr(e.right, env))


def count_sites(stmts, counters: dict | None = None) -> int:
    """Number of access sites the unroller emits for ``stmts``."""
    counters = counters or {}
    n = 0
    for s in stmts:
        if isinstance(s, Access):
            n += 1
        elif isinstance(s, If):
            n += count_sites(s.then, counters) + count_sites(s.orelse, counters)
        elif isinstance(s, For):
            lo, hi = eval_expr(s.lo, counters), eval_expr(s.hi, counters)
            for v in range(lo, hi):
                n += count_sites(s.body, {**counters, s.var: v})
    return n


def execute(p: Program, secrets: dict) -> list[tuple[int, int]]:
    """Run ``p`` concretely; returns ``(site index, byte address)`` per executed access.

    Site indices are 1-based and agree with :func:`unroll`: a skipped branch
    arm still consumes the indices of the sites it contains.
    """
    env = {n: secrets[n] & ((1 << w) - 1) for n, w in p.secrets}
    out: list[tuple[int, int]] = []
    site = [0]

    def run(stmts, env):
        for s in stmts:
            if isinstance(s, Access):
                site[0] += 1
                arr = p.array(s.array)
                idx = eval_expr(s.index, env)
                out.append((site[0], (arr.base + idx * arr.elem_size) & MASK))
            elif isinstance(s, Let):
                env[s.name] = eval_expr(s.value, env)
            elif isinstance(s, If):
                counters = {k: v for k, v in env.items()}
                if eval_expr(s.cond, env):
                    inner = dict(env)
                    run(s.then, inner)
                    site[0] += count_sites(s.orelse, counters)
                else:
                    site[0] += count_sites(s.then, counters)
                    inner = dict(env)
                    run(s.orelse, inner)
                for k in list(env):
                    env[k] = inner[k]
                for k, v in inner.items():
                    if k not in env and _defined_in_both(s, k):
                        env[k] = v
            elif isinstance(s, For):
                lo, hi = eval_expr(s.lo, env), eval_expr(s.hi, env)
                for v in range(lo, hi):
                    inner = dict(env)
                    inner[s.var] = v
                    run(s.body, inner)
                    for k in list(env):
                        env[k] = inner[k]

    run(p.body, env)
    return out


def _assigned(stmts) -> set[str]:
    names: set[str] = set()
    for s in stmts:
        if isinstance(s, Let):
            names.add(s.name)
        elif isinstance(s, If):
            names |= _assigned(s.then) & _assigned(s.orelse)
    return names


def _defined_in_both(s: If, name: str) -> bool:
    return name in _assigned(s.then) and name in _assigned(s.orelse)


def enumerate_secrets(p: Program, limit_bits: int = MAX_SECRET_BITS) -> Iterator[dict]:
    """Every secret assignment exactly once, lexicographically ascending."""
    if p.secret_bits > limit_bits:
        raise EnumerationLimitError(
            f"secret domain has {p.secret_bits} bits; exhaustive enumeration is limited to {limit_bits}")
    names = [n for n, _ in p.secrets]
    for values in itertools.product(*(range(1 << w) for _, w in p.secrets)):
        yield dict(zip(names, values))


# ---------------------------------------------------------------------------
# symbolic unrolling

BV32 = T.bv(WORD)


@dataclass(frozen=True)
class AccessSite:
    index: int
    guard: T.Term  # Bool term over secrets and SSA variables
    address: T.Term  # BV32 term
    kind: str

    @property
    def static_address(self) -> int | None:
        return self.address.value if self.address.is_const else None

    def static_block(self, line_size: int) -> int | None:
        a = self.static_address
        return None if a is None else a // line_size


@dataclass
class UnrolledTrace:
    program: Program
    accesses: list[AccessSite]
    definitions: list[tuple[T.Term, T.Term]] = field(default_factory=list)  # SSA var := term

    @property
    def n(self) -> int:
        return len(self.accesses)

    def secret_vars(self) -> list[T.Term]:
        return [T.var(n, T.bv(w)) for n, w in self.program.secrets]

    def concrete(self, secrets: dict) -> tuple[list[bool], list[int]]:
        """Evaluate every site's guard and address under a secret assignment."""
        env: dict = {n: secrets[n] & ((1 << w) - 1) for n, w in self.program.secrets}
        cache: dict = {}
        for v, t in self.definitions:
            env[v.name] = T.evaluate(t, env, cache)
        guards = [bool(T.evaluate(a.guard, env, cache)) for a in self.accesses]
        addrs = [T.evaluate(a.address, env, cache) for a in self.accesses]
        return guards, addrs


class _Unroller:
    def __init__(self, p: Program, limit: int):
        self.p = p
        self.limit = limit
        self.accesses: list[AccessSite] = []
        self.defs: list[tuple[T.Term, T.Term]] = []
        self.counter = 0

    def fresh(self, hint: str, t: T.Term) -> T.Term:
        if t.is_const or t.op == "var":
            return t
        self.counter += 1
        v = T.var(f"{hint}!{self.counter}", t.sort)
        self.defs.append((v, t))
        return v

    def word(self, e, env) -> T.Term:
        t = self.term(e, env)
        return T.Ite(t, T.bvconst(1, WORD), T.bvconst(0, WORD)) if t.sort == T.BOOL else t

    def cond(self, e, env) -> T.Term:
        t = self.term(e, env)
        return t if t.sort == T.BOOL else T.Distinct(t, T.bvconst(0, WORD))

    def term(self, e, env) -> T.Term:
        if isinstance(e, Num):
            return T.bvconst(e.value, WORD)
        if isinstance(e, Name):
            return env[e.id]
        if isinstance(e, UnOp):
            if e.op == "!":
                return T.Not(self.cond(e.operand, env))
            x = self.word(e.operand, env)
            if e.op == "-":
                return T.BVBin("bvsub", T.bvconst(0, WORD), x)
            return T.BVBin("bvxor", x, T.bvconst(MASK, WORD))
        op = e.op
        if op in LOGIC_OPS:
            a, b = self.cond(e.left, env), self.cond(e.right, env)
            return T.And(a, b) if op == "&&" else T.Or(a, b)
        a, b = self.word(e.left, env), self.word(e.right, env)
        if op == "==":
            return T.Eq(a, b)
        if op == "!=":
            return T.Distinct(a, b)
        cmp = {"<": "bvult", "<=": "bvule", ">": "bvugt", ">=": "bvuge"}
        if op in cmp:
            return T.BVCmp(cmp[op], a, b)
        binop = {"+": "bvadd", "-": "bvsub", "*": "bvmul", "&": "bvand", "|": "bvor",
                 "^": "bvxor", "<<": "bvshl", ">>": "bvlshr"}[op]
        return T.BVBin(binop, a, b)

    def run(self, stmts, env: dict, path: list[T.Term]) -> None:
        for s in stmts:
            if isinstance(s, Access):
                if len(self.accesses) >= self.limit:
                    raise UnrollLimitError(f"unrolled program exceeds {self.limit} accesses")
                arr = self.p.array(s.array)
                idx = self.word(s.index, env)
                addr = T.BVBin("bvadd", T.bvconst(arr.base, WORD),
                               T.BVBin("bvmul", idx, T.bvconst(arr.elem_size, WORD)))
                self.accesses.append(AccessSite(len(self.accesses) + 1, T.And(*path), addr, s.kind))
            elif isinstance(s, Let):
                env[s.name] = self.fresh(s.name, self.word(s.value, env))
            elif isinstance(s, If):
                c = self.fresh("c", self.cond(s.cond, env))
                then_env, else_env = dict(env), dict(env)
                self.run(s.then, then_env, path + [c])
                self.run(s.orelse, else_env, path + [T.Not(c)])
                for k in set(then_env) & set(else_env):
                    if k in env or _defined_in_both(s, k):
                        a, b = then_env[k], else_env[k]
                        env[k] = a if a == b else self.fresh(k, T.Ite(c, a, b))
            elif isinstance(s, For):
                consts = {k: v.value for k, v in env.items() if v.is_const}
                lo, hi = eval_expr(s.lo, consts), eval_expr(s.hi, consts)
                for i in range(lo, hi):
                    inner = dict(env)
                    inner[s.var] = T.bvconst(i, WORD)
                    self.run(s.body, inner, path)
                    for k in list(env):
                        env[k] = inner[k]


def unroll(p: Program, limit: int = DEFAULT_UNROLL_LIMIT) -> UnrolledTrace:
    """Fully unroll ``p`` into guarded access sites in execution order."""
    u = _Unroller(p, limit)
    env = {n: T.ZeroExtend(WORD - w, T.var(n, T.bv(w))) for n, w in p.secrets}
    u.run(p.body, env, [])
    return UnrolledTrace(p, u.accesses, u.defs)
