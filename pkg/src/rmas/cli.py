"""Command-line driver: check, compile, build, verify, gen-cm, async2sync.

Every run emits a reproducible report (input digests, effective config,
result); exit codes are a total function of the outcome:

    0  success / property holds        4  state bound exceeded
    1  usage error                     5  successor relation rejected
    2  parse or resolution failure     6  well-formedness findings
    3  exploration truncated          10  property violated
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from fractions import Fraction
from typing import Optional

from .data import DataObject, INTEGER, RATIONAL, mk_integer, mk_rational
from .dsl import ParseError, parse_spec, serialize_spec
from .builder import (
    BuildConfig,
    ConfigError,
    MODE_CONCRETE,
    MODES,
    StateBoundExceeded,
    SuccRejected,
    TransitionSystem,
    build_transition_system,
    export,
)
from .generators import (
    ASYNC_DISORDERED,
    ASYNC_ORDERED,
    GeneratorError,
    async_to_sync,
    counter_machine_to_rmas,
    parse_counter_program,
)
from .model import RmasSpec, install_institutional
from .mucalc import PropError, flatten_property, model_check, parse_property
from .shallow import compile_shallow, is_shallow
from .wellformed import check_well_formed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_TRUNCATED = 3
EXIT_BOUND = 4
EXIT_SUCC = 5
EXIT_FINDINGS = 6
EXIT_FALSE = 10


class CliError(Exception):
    def __init__(self, msg: str, code: int) -> None:
        super().__init__(msg)
        self.code = code


def _digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _read(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_USAGE)


class Report:
    def __init__(self, command: str, inputs: list[str]) -> None:
        self.data = {
            "command": command,
            "inputs": {p: _digest(p) for p in inputs},
            "config": {},
            "result": {},
            "exit": EXIT_OK,
        }

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return json.dumps(self.data, sort_keys=True, indent=2) + "\n"
        lines = [f"command: {self.data['command']}"]
        for p, d in sorted(self.data["inputs"].items()):
            lines.append(f"input: {p} sha256={d}")
        for k, v in sorted(self.data["config"].items()):
            lines.append(f"config: {k}={v}")
        for k, v in sorted(self.data["result"].items()):
            if isinstance(v, list):
                for item in v:
                    lines.append(f"{k}: {item}")
            else:
                lines.append(f"{k}: {v}")
        lines.append(f"exit: {self.data['exit']}")
        return "\n".join(lines) + "\n"


def _parse_pools(spec: RmasSpec, entries: list[str]) -> dict[str, tuple[DataObject, ...]]:
    pools: dict[str, tuple[DataObject, ...]] = {}
    for entry in entries:
        if "=" not in entry:
            raise CliError(f"--pool wants TYPE=v1,v2,..., got {entry!r}", EXIT_USAGE)
        tname, raw = entry.split("=", 1)
        tdef = spec.types.get(tname)
        if tdef is None:
            raise CliError(f"--pool names unknown type {tname!r}", EXIT_USAGE)
        values = []
        for piece in raw.split(","):
            piece = piece.strip().strip('"')
            if not piece:
                continue
            try:
                if tdef.carrier == RATIONAL:
                    values.append(mk_rational(tname, Fraction(piece)))
                elif tdef.carrier == INTEGER:
                    values.append(mk_integer(tname, int(piece)))
                else:
                    values.append(DataObject(tname, piece))
            except ValueError:
                raise CliError(f"bad pool value {piece!r} for type {tname}", EXIT_USAGE)
        pools[tname] = tuple(values)
    return pools


def _load_spec(path: str) -> RmasSpec:
    text = _read(path)
    try:
        return install_institutional(parse_spec(text))
    except ParseError as e:
        raise CliError(f"{path}: {e}", EXIT_PARSE)


def _build_config(args, spec: RmasSpec) -> BuildConfig:
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(_read(args.config))
        except json.JSONDecodeError as e:
            raise CliError(f"bad config file: {e}", EXIT_USAGE)
    mode = args.mode or file_cfg.get("mode") or MODE_CONCRETE
    if mode not in MODES:
        raise CliError(f"unknown mode {mode!r}", EXIT_USAGE)
    pool_entries = list(file_cfg.get("pools", []))
    pool_entries += args.pool or []
    workers = int(os.environ.get("RMAS_THREADS", "1") or "1")

    def pick(flag, key):
        return flag if flag is not None else file_cfg.get(key)

    return BuildConfig(
        mode=mode,
        state_bound=pick(args.state_bound, "state_bound"),
        max_states=pick(args.max_states, "max_states"),
        max_depth=pick(args.max_depth, "max_depth"),
        pools=_parse_pools(spec, pool_entries),
        workers=max(1, workers),
    )


def _echo_config(report: Report, config: BuildConfig) -> None:
    report.data["config"] = {
        "mode": config.mode,
        "state_bound": config.state_bound,
        "max_states": config.max_states,
        "max_depth": config.max_depth,
        "pools": {
            t: [str(o.value) for o in vs] for t, vs in sorted(config.pools.items())
        },
    }


def _run_build(spec: RmasSpec, config: BuildConfig, report: Report) -> TransitionSystem:
    built_spec = spec
    if config.mode != MODE_CONCRETE and not is_shallow(spec):
        built_spec = compile_shallow(spec)
        report.data["result"]["compiled"] = True
    try:
        ts = build_transition_system(built_spec, config)
    except StateBoundExceeded as e:
        raise CliError(str(e), EXIT_BOUND)
    except SuccRejected as e:
        raise CliError(str(e), EXIT_SUCC)
    except ConfigError as e:
        raise CliError(str(e), EXIT_USAGE)
    report.data["result"].update(ts.stats)
    report.data["result"]["truncated"] = ts.truncated
    return ts


def _require_clean(spec: RmasSpec, report: Report) -> None:
    wf = check_well_formed(spec)
    if not wf.ok:
        report.data["result"]["findings"] = [str(f) for f in wf.findings]
        raise CliError(f"{len(wf.findings)} well-formedness findings", EXIT_FINDINGS)


def _write_out(args, data: bytes) -> None:
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.buffer.write(data)


# -- subcommands ----------------------------------------------------------------


def cmd_check(args, report: Report) -> int:
    spec = _load_spec(args.spec)
    wf = check_well_formed(spec)
    report.data["result"]["findings"] = [str(f) for f in wf.findings]
    report.data["result"]["work"] = wf.work
    return EXIT_OK if wf.ok else EXIT_FINDINGS


def cmd_compile(args, report: Report) -> int:
    spec = _load_spec(args.spec)
    _require_clean(spec, report)
    out = compile_shallow(spec)
    report.data["result"]["shallow"] = is_shallow(out)
    _write_out(args, serialize_spec(out).encode())
    return EXIT_OK


def cmd_build(args, report: Report) -> int:
    spec = _load_spec(args.spec)
    _require_clean(spec, report)
    config = _build_config(args, spec)
    _echo_config(report, config)
    ts = _run_build(spec, config, report)
    if args.out:
        _write_out(args, export(ts, args.format))
    return EXIT_TRUNCATED if ts.truncated else EXIT_OK


def cmd_verify(args, report: Report) -> int:
    spec = _load_spec(args.spec)
    _require_clean(spec, report)
    config = _build_config(args, spec)
    _echo_config(report, config)
    built_spec = spec
    if config.mode != MODE_CONCRETE and not is_shallow(spec):
        built_spec = compile_shallow(spec)
    try:
        prop = parse_property(_read(args.property), built_spec)
        if config.flat:
            prop = flatten_property(prop)
    except (ParseError, PropError) as e:
        raise CliError(f"{args.property}: {e}", EXIT_PARSE)
    try:
        ts = build_transition_system(built_spec, config)
    except StateBoundExceeded as e:
        raise CliError(str(e), EXIT_BOUND)
    except SuccRejected as e:
        raise CliError(str(e), EXIT_SUCC)
    except ConfigError as e:
        raise CliError(str(e), EXIT_USAGE)
    report.data["result"].update(ts.stats)
    report.data["result"]["truncated"] = ts.truncated
    if ts.truncated:
        return EXIT_TRUNCATED
    verdict = model_check(ts, built_spec, prop)
    report.data["result"]["verdict"] = verdict.truth
    report.data["result"]["iterations"] = verdict.iterations
    return EXIT_OK if verdict.truth else EXIT_FALSE


def cmd_gen_cm(args, report: Report) -> int:
    try:
        prog = parse_counter_program(_read(args.program))
        spec = counter_machine_to_rmas(prog)
    except GeneratorError as e:
        raise CliError(str(e), EXIT_PARSE)
    report.data["result"]["instructions"] = len(prog.instructions)
    _write_out(args, serialize_spec(spec).encode())
    return EXIT_OK


def cmd_async2sync(args, report: Report) -> int:
    spec = _load_spec(args.spec)
    _require_clean(spec, report)
    try:
        out = async_to_sync(spec, args.async_mode)
    except GeneratorError as e:
        raise CliError(str(e), EXIT_USAGE)
    report.data["result"]["async_mode"] = args.async_mode
    _write_out(args, serialize_spec(out).encode())
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rmas",
        description="parse, transform, explore, and verify relational multiagent systems",
    )
    ap.add_argument("--report", choices=("json", "text"), default="text")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def add_build_flags(p):
        p.add_argument("--mode", choices=MODES, default=None)
        p.add_argument("--state-bound", dest="state_bound", type=int, default=None)
        p.add_argument("--max-states", dest="max_states", type=int, default=None)
        p.add_argument("--max-depth", dest="max_depth", type=int, default=None)
        p.add_argument("--pool", action="append", metavar="TYPE=v1,v2,...")
        p.add_argument("--config", default=None, help="JSON config file; flags override")

    p = sub.add_parser("check", help="well-formedness check")
    p.add_argument("spec")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("compile", help="compile facets away (shallow form)")
    p.add_argument("spec")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("build", help="construct a transition system")
    p.add_argument("spec")
    add_build_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("dot", "jsonl"), default="jsonl")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("verify", help="model-check a property")
    p.add_argument("spec")
    p.add_argument("property")
    add_build_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-cm", help="encode a two-counter machine")
    p.add_argument("program")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_cm)

    p = sub.add_parser("async2sync", help="buffer-based asynchronous simulation")
    p.add_argument("spec")
    p.add_argument("--async-mode", dest="async_mode",
                   choices=(ASYNC_ORDERED, ASYNC_DISORDERED), default=ASYNC_DISORDERED)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_async2sync)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    inputs = [p for p in (getattr(args, "spec", None), getattr(args, "property", None),
                          getattr(args, "program", None)) if p]
    for p in inputs:
        if not os.path.exists(p):
            sys.stderr.write(f"error: no such file: {p}\n")
            return EXIT_USAGE
    report = Report(args.cmd, inputs)
    try:
        code = args.func(args, report)
    except CliError as e:
        report.data["result"]["error"] = str(e)
        code = e.code
    report.data["exit"] = code
    sys.stderr.write(report.render(args.report))
    return code


if __name__ == "__main__":
    sys.exit(main())
