"""Command-line front end: verify, patch, quantify, simulate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from .cache import CacheConfig, CacheConfigError, map_address, observe
from .metrics import MetricsError, Prior, metrics_block
from .oracle import concrete_run, oracle_classes
from .patch import SynthesisError, dump_patches, load_patches, run_monitoring_system
from .program import ProgramError, count_sites, parse_program, unroll
from .solver import DEFAULT_TIMEOUT, Solver, SolverError
from .symbolic import FormulaSizeError, execute_symbolic
from .verifier import run_cegar_system

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_ERROR = 2
EXIT_PARTIAL = 3

VERDICT_EXIT = {"verified": EXIT_OK, "violation": EXIT_VIOLATION, "inconclusive": EXIT_ERROR}

log = logging.getLogger("cacheshield")


class UsageError(Exception):
    pass


def _read_program(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read program: {e}") from None
    return parse_program(text, Path(path).stem)


def _read_cache(path: str) -> CacheConfig:
    if not Path(path).is_file():
        raise UsageError(f"cache config not found: {path}")
    return CacheConfig.load(path)


def _solver(args) -> Solver:
    log_dir = str(Path(args.out) / "queries") if args.out else None
    return Solver(args.solver, args.timeout, log_dir)


def _emit(args, name: str, report: dict, text_lines: list[str]) -> None:
    structured = json.dumps(report, indent=1, sort_keys=False)
    if args.format == "json":
        print(structured)
    else:
        print("\n".join(text_lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(structured + "\n")


def _load_prior(path: str | None, report) -> Prior:
    if path is None:
        return Prior.uniform(report)
    with open(path) as fh:
        raw = json.load(fh)
    # {"1,2": "1/4", ...}: comma separated secret values -> probability
    probs = {tuple(int(x) for x in k.split(",")): Fraction(v) for k, v in raw.items()}
    return Prior.from_mapping(report, probs)


# ---------------------------------------------------------------------------
# commands


def cmd_verify(args) -> int:
    p = _read_program(args.program)
    cfg = _read_cache(args.cache)
    sys_ = execute_symbolic(unroll(p, args.unroll_limit), cfg)
    if args.out and args.dump:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "system.txt").write_text(sys_.dump())
    outcome = run_cegar_system(sys_, args.model, _solver(args))
    report = {"command": "verify", "program": p.name, "model": args.model, "cache": cfg.as_dict()}
    report.update(outcome.to_dict())
    lines = [f"verdict: {outcome.verdict}",
             f"rounds: {outcome.rounds}",
             f"predicates tracked: {outcome.tracked} of {outcome.universe}"]
    for w in report.get("witnesses", []):
        secret = ", ".join(f"{k}={v}" for k, v in w["secret"].items())
        lines.append(f"witness {secret}: observation {w['observation']}")
    if outcome.reason:
        lines.append(f"reason: {outcome.reason}")
    _emit(args, "verify", report, lines)
    return VERDICT_EXIT[outcome.verdict]


def _oracle_metrics(p, cfg, model, patches=None):
    rep = oracle_classes(p, cfg, model, patches)
    return rep, metrics_block(rep)


def cmd_patch(args) -> int:
    p = _read_program(args.program)
    cfg = _read_cache(args.cache)
    t = unroll(p, args.unroll_limit)
    res = run_monitoring_system(execute_symbolic(t, cfg), args.model, _solver(args))
    report = {"command": "patch", "program": p.name, "model": args.model, "cache": cfg.as_dict(),
              "verdict": res.outcome.verdict, "complete": res.complete,
              "classes": [{"observation": str(e.observation), "monitors": len(e.monitors)} for e in res.omega],
              "patches": [x.to_dict() for x in res.patches]}
    if res.reference is not None:
        report["reference"] = str(res.reference)
    if res.note:
        report["note"] = res.note
    lines = [f"verdict: {res.outcome.verdict}", f"classes explored: {len(res.omega)}"
             + ("" if res.complete else " (partial)")]
    for x in res.patches:
        acts = ", ".join(f"({a.at}, {a.kind})" for a in x.actions) or "none"
        lines.append(f"class {x.observation}: actions {acts}")
    if res.note:
        lines.append(f"note: {res.note}")

    single = None
    try:
        before, mb = _oracle_metrics(p, cfg, args.model)
        after, ma = _oracle_metrics(p, cfg, args.model, res.patches)
        report["metrics_before"], report["metrics_after"] = mb, ma
        single = after.num_classes == 1
        lines.append(f"classes before/after patching: {before.num_classes} / {after.num_classes}")
    except ProgramError as e:  # secret domain too large to enumerate
        lines.append(f"oracle skipped: {e}")

    patch_text = dump_patches(res.patches, args.model, t.n,
                              {"program": p.name, "cache": cfg.as_dict(), "complete": res.complete})
    target = args.patches or (str(Path(args.out) / "patches.json") if args.out else None)
    if target:
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        Path(target).write_text(patch_text + "\n")
        lines.append(f"patch file: {target}")
    _emit(args, "patch", report, lines)
    if res.outcome.verdict == "inconclusive" and not res.omega.entries:
        return EXIT_ERROR
    if not res.complete or single is False:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_quantify(args) -> int:
    p = _read_program(args.program)
    cfg = _read_cache(args.cache)
    patches = None
    if args.patches:
        model, patches = load_patches(Path(args.patches).read_text())
        if patches and model != args.model:
            raise UsageError(f"patch file targets the {model} attacker, not {args.model}")
        if int(json.loads(Path(args.patches).read_text())["sites"]) != count_sites(p.body):
            raise UsageError("patch file was synthesized for a different program")
    rep = oracle_classes(p, cfg, args.model, patches)
    m = metrics_block(rep, _load_prior(args.prior, rep))
    report = {"command": "quantify", "program": p.name, "model": args.model, "cache": cfg.as_dict(),
              "patched": bool(patches), **m,
              "class_sizes": {str(o): len(v) for o, v in sorted(rep.classes.items())}}
    lines = [f"classes: {m['classes']}",
             f"channel capacity: {m['capacity_bits']:.6f} bits",
             f"shannon entropy: prior {m['shannon_prior']:.6f}, remaining {m['shannon_remaining']:.6f}",
             f"min entropy: prior {m['min_prior']:.6f}, remaining {m['min_remaining']:.6f}"]
    _emit(args, "quantify", report, lines)
    return EXIT_OK


def _parse_secrets(p, items: list[str]) -> dict:
    widths = dict(p.secrets)
    out = {}
    for item in items:
        name, _, val = item.partition("=")
        if name not in widths or not val:
            raise UsageError(f"bad --secret {item!r}; expected NAME=VALUE for one of {sorted(widths)}")
        v = int(val, 0)
        if not 0 <= v < (1 << widths[name]):
            raise UsageError(f"secret {name}={v} outside u{widths[name]}")
        out[name] = v
    missing = set(widths) - out.keys()
    if missing:
        raise UsageError(f"missing --secret for {sorted(missing)}")
    return out


def cmd_simulate(args) -> int:
    p = _read_program(args.program)
    cfg = _read_cache(args.cache)
    secrets = _parse_secrets(p, args.secret or [])
    n = count_sites(p.body)
    run = concrete_run(p, cfg, secrets, n)
    t = unroll(p, args.unroll_limit)
    guards, addrs = t.concrete(secrets)
    rows = []
    for i in range(n):
        block, s, tag = map_address(cfg, addrs[i])
        rows.append({"index": i + 1, "executed": guards[i], "address": addrs[i], "block": block,
                     "set": s, "tag": tag, "result": ("miss" if run.site_misses[i] else "hit") if guards[i] else "-"})
    report = {"command": "simulate", "program": p.name, "cache": cfg.as_dict(), "secret": secrets,
              "accesses": rows, "time": str(observe("time", run.misses)),
              "trace": str(observe("trace", run.misses))}
    lines = ["idx guard   address  block  set  tag  result"]
    for r in rows:
        lines.append(f"{r['index']:>3} {str(r['executed']).lower():<5} {r['address']:#10x} {r['block']:>6} "
                     f"{r['set']:>4} {r['tag']:>4}  {r['result']}")
    lines += [f"time observation: {report['time']}", f"trace observation: {report['trace']}"]
    _emit(args, "simulate", report, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cacheshield",
                                 description="Verify and patch cache side channels in small programs.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--program", required=True, help="program source file")
    common.add_argument("--cache", required=True, help="cache config (YAML or JSON)")
    common.add_argument("--out", help="directory for reports and solver scripts")
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("--unroll-limit", type=int, default=4096)
    solving = argparse.ArgumentParser(add_help=False)
    solving.add_argument("--solver", help="SMT-LIB 2 solver command (default: $CACHESHIELD_SOLVER or z3)")
    solving.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT, help="seconds per solver query")
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", choices=("time", "trace"), required=True, help="attack model")

    sub = ap.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", parents=[common, solving, model], help="prove or refute side-channel freedom")
    v.add_argument("--dump", action="store_true", help="write the symbolic system to OUT/system.txt")
    v.set_defaults(func=cmd_verify)
    pt = sub.add_parser("patch", parents=[common, solving, model], help="explore classes and synthesize patches")
    pt.add_argument("--patches", help="where to write the patch file (default OUT/patches.json)")
    pt.set_defaults(func=cmd_patch)
    q = sub.add_parser("quantify", parents=[common, model], help="leakage metrics from exhaustive simulation")
    q.add_argument("--patches", help="patch file to apply before measuring")
    q.add_argument("--prior", help='JSON prior: {"v1,v2": "p", ...} in secret declaration order')
    q.set_defaults(func=cmd_quantify)
    s = sub.add_parser("simulate", parents=[common], help="dump one concrete execution")
    s.add_argument("--secret", action="append", metavar="NAME=VALUE")
    s.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ProgramError, CacheConfigError, SolverError, FormulaSizeError,
            SynthesisError, MetricsError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
