"""Solver-facing formulas and an SMT-LIB 2 subprocess backend.

Any solver that reads SMT-LIB 2 on stdin and supports ``check-sat-assuming``
and ``get-unsat-core`` works.  The binary is taken from the ``solver``
argument, else the ``CACHESHIELD_SOLVER`` environment variable, else ``z3``
on ``PATH``.
"""

from __future__ import annotations

import os
import select
import shlex
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from . import terms as T

SOLVER_ENV = "CACHESHIELD_SOLVER"
DEFAULT_TIMEOUT = 60.0


class SolverError(RuntimeError):
    """The backend is missing or violated the protocol."""


class FormulaError(ValueError):
    pass


class Formula:
    """Declarations plus assertions, some of which carry a label for core tracking."""

    def __init__(self):
        self.decls: dict[str, T.Sort] = {}
        self.assertions: list[tuple[T.Term, str | None]] = []
        self._labels: set[str] = set()

    def declare(self, name: str, sort: T.Sort) -> T.Term:
        old = self.decls.get(name)
        if old is not None and old != sort:
            raise FormulaError(f"{name} redeclared as {sort} (was {old})")
        self.decls[name] = sort
        return T.var(name, sort)

    def add(self, term: T.Term, label: str | None = None) -> None:
        if term.sort != T.BOOL:
            raise FormulaError("assertions must be boolean")
        missing = term.free_vars() - self.decls.keys()
        if missing:
            raise FormulaError(f"undeclared variables: {sorted(missing)}")
        if label is not None:
            if label in self._labels or label in self.decls:
                raise FormulaError(f"duplicate label {label}")
            self._labels.add(label)
        if term.is_const and term.value and label is None:
            return
        self.assertions.append((term, label))

    @property
    def labels(self) -> list[str]:
        return [lbl for _, lbl in self.assertions if lbl is not None]

    def copy(self) -> "Formula":
        f = Formula()
        f.decls = dict(self.decls)
        f.assertions = list(self.assertions)
        f._labels = set(self._labels)
        return f

    def __len__(self):
        return len(self.assertions)


@dataclass
class Sat:
    model: dict

    def __getitem__(self, name):
        return self.model[name]


@dataclass
class Unsat:
    core: frozenset = frozenset()


@dataclass
class Unknown:
    reason: str


SolveResult = Union[Sat, Unsat, Unknown]


# ---------------------------------------------------------------------------
# text protocol


def _sym(name: str) -> str:
    return T.var(name, T.BOOL).smt()


HEADER = [
    "(set-option :print-success false)",
    "(set-option :produce-models true)",
    "(set-option :produce-unsat-cores true)",
    "(set-logic ALL)",
]


def _script_body(f: Formula, assumptions: Mapping[str, T.Term] | None = None) -> tuple[list[str], list[str]]:
    lines = []
    for name, sort in f.decls.items():
        lines.append(f"(declare-fun {_sym(name)} () {sort.smt()})")
    labels = []
    for term, label in f.assertions:
        if label is None:
            lines.append(f"(assert {term.smt()})")
        else:
            labels.append(label)
            lines.append(f"(declare-fun {_sym(label)} () Bool)")
            lines.append(f"(assert (=> {_sym(label)} {term.smt()}))")
    for label, term in (assumptions or {}).items():
        if label in f.decls or label in labels:
            raise FormulaError(f"duplicate label {label}")
        missing = term.free_vars() - f.decls.keys()
        if missing:
            raise FormulaError(f"undeclared variables in assumption {label}: {sorted(missing)}")
        labels.append(label)
        lines.append(f"(declare-fun {_sym(label)} () Bool)")
        lines.append(f"(assert (=> {_sym(label)} {term.smt()}))")
    return lines, labels


def emit_backend_text(f: Formula, assumptions: Mapping[str, T.Term] | None = None) -> str:
    """Serialize ``f`` (and labeled assumptions) as an SMT-LIB 2 script ending in a check."""
    body, labels = _script_body(f, assumptions)
    return "\n".join(HEADER + body + [_check_cmd(labels)]) + "\n"


def _check_cmd(labels: Sequence[str]) -> str:
    if not labels:
        return "(check-sat)"
    return "(check-sat-assuming (" + " ".join(_sym(lbl) for lbl in labels) + "))"


def _parse_value(v):
    if isinstance(v, str):
        if v == "true":
            return True
        if v == "false":
            return False
        if v.startswith("#b"):
            return int(v[2:], 2)
        if v.startswith("#x"):
            return int(v[2:], 16)
        return int(v)
    if len(v) == 2 and v[0] == "-":
        return -_parse_value(v[1])
    if len(v) == 3 and v[0] == "_" and v[1].startswith("bv"):
        return int(v[1][2:])
    raise SolverError(f"unsupported model value {v!r}")


def resolve_solver(solver: str | None = None) -> list[str]:
    spec = solver or os.environ.get(SOLVER_ENV) or "z3"
    argv = shlex.split(spec)
    exe = shutil.which(argv[0])
    if exe is None:
        raise SolverError(f"solver binary not found: {argv[0]}")
    argv[0] = exe
    if len(argv) == 1:
        base = os.path.basename(exe)
        if "z3" in base:
            argv += ["-in", "-smt2"]
        elif "cvc5" in base or "cvc4" in base:
            argv += ["--lang=smt2", "--incremental"]
    return argv


class _Process:
    """One interactive solver subprocess."""

    def __init__(self, argv: list[str], timeout: float, log: Path | None):
        self.timeout = timeout
        self.log = log
        self.transcript: list[str] = []
        try:
            self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                         stderr=subprocess.STDOUT, bufsize=0)
        except OSError as e:
            raise SolverError(f"cannot start solver {argv[0]}: {e}") from e
        self.buf = b""
        self.deadline = time.monotonic() + timeout

    def send(self, text: str) -> None:
        self.transcript.append(text.rstrip("\n"))
        try:
            self.proc.stdin.write(text.encode())
            self.proc.stdin.flush()
        except BrokenPipeError as e:
            raise SolverError("solver exited unexpectedly") from e

    def read(self):
        """Read one s-expression (or atom) response, or None on timeout."""
        while True:
            expr = self._take()
            if expr is not None:
                self.transcript.append(f"; -> {expr}")
                return expr
            remaining = self.deadline - time.monotonic()
            if remaining <= 0:
                return None
            ready, _, _ = select.select([self.proc.stdout], [], [], remaining)
            if not ready:
                return None
            chunk = os.read(self.proc.stdout.fileno(), 65536)
            if not chunk:
                raise SolverError(f"solver closed its output: {self.buf.decode(errors='replace')!r}")
            self.buf += chunk

    def _take(self):
        text = self.buf.decode(errors="replace")
        i = 0
        while i < len(text) and text[i].isspace():
            i += 1
        if i == len(text):
            return None
        if text[i] != "(":
            j = i
            while j < len(text) and not text[j].isspace():
                j += 1
            if j == len(text):
                return None
            self.buf = text[j:].encode()
            return text[i:j]
        depth = 0
        in_str = False
        for j in range(i, len(text)):
            c = text[j]
            if in_str:
                if c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "(":
                depth += 1
            elif c == ")":
                depth -= 1
                if depth == 0:
                    self.buf = text[j + 1:].encode()
                    return text[i:j + 1]
        return None

    def check(self, cmd: str) -> str:
        self.send(cmd + "\n")
        resp = self.read()
        if resp is None:
            return "timeout"
        if resp.startswith("(error"):
            raise SolverError(f"solver error: {resp}")
        if resp not in ("sat", "unsat", "unknown"):
            raise SolverError(f"unexpected solver response: {resp}")
        return resp

    def query(self, cmd: str):
        self.send(cmd + "\n")
        resp = self.read()
        if resp is None:
            return None
        if resp.startswith("(error"):
            raise SolverError(f"solver error: {resp}")
        return T.parse_sexpr(resp)[0]

    def close(self):
        try:
            if self.proc.poll() is None:
                try:
                    self.proc.stdin.write(b"(exit)\n")
                    self.proc.stdin.flush()
                except OSError:
                    pass
                self.proc.kill()
            self.proc.wait()
        finally:
            for stream in (self.proc.stdin, self.proc.stdout):
                try:
                    stream.close()
                except OSError:
                    pass
            if self.log is not None:
                self.log.write_text("\n".join(self.transcript) + "\n")


@dataclass
class Solver:
    """SMT-LIB 2 backend; each :meth:`check` runs in a fresh solver process."""

    command: str | None = None
    timeout: float = DEFAULT_TIMEOUT
    log_dir: str | None = None
    queries: int = field(default=0, init=False)
    argv: list = field(default=None, init=False)

    def __post_init__(self):
        self.argv = resolve_solver(self.command)
        if self.log_dir:
            Path(self.log_dir).mkdir(parents=True, exist_ok=True)

    def _open(self) -> _Process:
        self.queries += 1
        log = Path(self.log_dir) / f"query_{self.queries:05d}.smt2" if self.log_dir else None
        return _Process(self.argv, self.timeout, log)

    def check(self, f: Formula, assumptions: Mapping[str, T.Term] | None = None,
              values: Iterable[str] | None = None, minimize_core: bool = False) -> SolveResult:
        """Decide ``f`` together with the labeled ``assumptions``.

        On Sat the model holds ``values`` (default: every declared variable).
        On Unsat the core is a set of labels from ``f`` and ``assumptions``;
        with ``minimize_core`` it is reduced until every label is necessary.
        """
        body, labels = _script_body(f, assumptions)
        p = self._open()
        try:
            p.send("\n".join(HEADER + body) + "\n")
            res = p.check(_check_cmd(labels))
            if res == "timeout":
                return Unknown("timeout")
            if res == "unknown":
                reason = p.query("(get-info :reason-unknown)")
                return Unknown(str(reason))
            if res == "sat":
                names = list(values) if values is not None else list(f.decls)
                model = {}
                if names:
                    resp = p.query("(get-value (" + " ".join(_sym(n) for n in names) + "))")
                    if resp is None:
                        return Unknown("timeout")
                    for name, val in resp:
                        model[name] = _parse_value(val)
                    missing = set(names) - model.keys()
                    if missing:
                        raise SolverError(f"model lacks values for {sorted(missing)}")
                return Sat(model)
            if not labels:
                return Unsat(frozenset())
            resp = p.query("(get-unsat-core)")
            if resp is None:
                return Unknown("timeout")
            core = set(resp)
            if minimize_core:
                for lbl in sorted(core):
                    if lbl not in core:
                        continue
                    trial = sorted(core - {lbl})
                    r = p.check(_check_cmd(trial) if trial else "(check-sat)")
                    if r == "unsat":
                        smaller = p.query("(get-unsat-core)") if trial else []
                        core = set(smaller) if smaller is not None else set(trial)
                    elif r == "timeout":
                        break
            return Unsat(frozenset(core))
        finally:
            p.close()

    def session(self) -> "Session":
        return Session(self._open())


class Session:
    """Incremental solver process for batches of related checks (push/pop)."""

    def __init__(self, proc: _Process):
        self.p = proc
        self.p.send("\n".join(HEADER) + "\n")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.p.close()

    def load(self, f: Formula) -> None:
        body, labels = _script_body(f)
        if labels:
            raise FormulaError("sessions take unlabeled formulas only")
        self.p.send("\n".join(body) + "\n")

    def push(self):
        self.p.send("(push 1)\n")

    def pop(self):
        self.p.send("(pop 1)\n")

    def add(self, term: T.Term):
        self.p.send(f"(assert {term.smt()})\n")

    def check(self, names: Sequence[str] = ()) -> SolveResult:
        self.p.deadline = time.monotonic() + self.p.timeout
        res = self.p.check("(check-sat)")
        if res == "timeout":
            return Unknown("timeout")
        if res != "sat":
            return Unsat() if res == "unsat" else Unknown("unknown")
        model = {}
        if names:
            resp = self.p.query("(get-value (" + " ".join(_sym(n) for n in names) + "))")
            for name, val in resp:
                model[name] = _parse_value(val)
        return Sat(model)


def check_sat(f: Formula, assumptions: Mapping[str, T.Term] | None = None,
              solver: Solver | None = None, **kw) -> SolveResult:
    return (solver or Solver()).check(f, assumptions, **kw)
