"""Command-line front end: ``gadgets``, ``chain`` and ``verify``.

Exit codes: 0 success, 2 input/load error, 3 unsatisfiable compile,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .compiler import (
    Arg, Catalog, ChainError, Constraints, SyscallGoal, compile_chain, default_data_vaddr,
    staging_layout,
)
from .elf import ElfError, read_elf, writable_regions
from .payload import FORMATS, PayloadFormatError, layout, pack_words, render, words_from_file
from .scanner import ScanConfig, find_gadgets
from .semantics import summarize
from .verifier import RegionCollision, init_state, run, verify_goal

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_UNSAT = 3
EXIT_VERIFY = 4

log = logging.getLogger("ropchain")


class InputError(Exception):
    pass


def parse_int(text: str) -> int:
    try:
        v = int(text, 16) if text.lower().startswith("0x") else int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError(f"out of u64 range: {text!r}")
    return v


def parse_arg(text: str) -> Arg:
    kind, sep, body = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected imm:<u64> or data:<...>, got {text!r}")
    if kind == "imm":
        return Arg.imm(parse_int(body))
    if kind == "data":
        if body.lower().startswith("0x"):
            try:
                blob = bytes.fromhex(body[2:])
            except ValueError:
                raise argparse.ArgumentTypeError(f"bad hex data: {body!r}")
        else:
            blob = body.encode() + b"\0"  # C strings: NUL appended
        if not blob:
            raise argparse.ArgumentTypeError("empty data argument")
        return Arg.ptr(blob)
    raise argparse.ArgumentTypeError(f"unknown argument kind {kind!r}")


def parse_bad_bytes(text: str) -> frozenset:
    out = set()
    for tok in filter(None, (t.strip() for t in text.split(","))):
        try:
            b = int(tok, 16)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad byte {tok!r} is not hex")
        if not 0 <= b <= 0xFF:
            raise argparse.ArgumentTypeError(f"bad byte {tok!r} out of range")
        out.add(b)
    if len(out) >= 256:
        raise argparse.ArgumentTypeError("every byte value is forbidden")
    return frozenset(out)


def _positive(text: str) -> int:
    v = parse_int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ropchain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="cmd", required=True)

    def scan_flags(sp):
        sp.add_argument("--max-instr", type=_positive, default=ScanConfig.max_instructions)
        sp.add_argument("--max-lookback", type=_positive, default=ScanConfig.max_lookback_bytes)

    def goal_flags(sp):
        sp.add_argument("--syscall", type=parse_int, required=True, help="syscall number (rax)")
        sp.add_argument("--arg", type=parse_arg, action="append", default=[],
                        help="imm:<u64> or data:<string|0xHEX>, repeat in ABI order")
        sp.add_argument("--base", type=parse_int, default=0, help="load base offset")
        sp.add_argument("--data-addr", type=parse_int, default=None,
                        help="staging address for data arguments")

    g = sub.add_parser("gadgets", help="list gadgets")
    g.add_argument("binary")
    scan_flags(g)
    g.add_argument("--json", action="store_true")

    c = sub.add_parser("chain", help="compile a syscall chain")
    c.add_argument("binary")
    scan_flags(c)
    goal_flags(c)
    c.add_argument("--bad-bytes", type=parse_bad_bytes, default=frozenset())
    c.add_argument("--max-words", type=_positive, default=256)
    c.add_argument("--format", choices=FORMATS, default="hex")
    c.add_argument("--out", default=None)

    v = sub.add_parser("verify", help="emulate a payload and check the goal")
    v.add_argument("binary")
    v.add_argument("payload")
    goal_flags(v)
    v.add_argument("--trace", action="store_true", help="one JSON line per executed instruction")
    return p


def _goal(ns) -> SyscallGoal:
    if len(ns.arg) > 6:
        raise InputError("at most 6 --arg values")
    return SyscallGoal(ns.syscall, tuple(ns.arg))


def cmd_gadgets(ns, out) -> int:
    image = read_elf(ns.binary)
    cfg = ScanConfig(ns.max_instr, ns.max_lookback)
    gadgets = find_gadgets(image, cfg)
    if ns.json:
        doc = []
        for g in gadgets:
            eff = summarize(g)
            doc.append({
                "vaddr": f"{g.vaddr:#x}",
                "text": g.text,
                "tags": sorted(str(t) for t in eff.tags),
                "stack_delta": eff.stack_delta,
            })
        out.write(json.dumps(doc, indent=1) + "\n")
    else:
        for g in gadgets:
            out.write(f"{g.vaddr:#x}: {g.text}\n")
    return EXIT_OK


def cmd_chain(ns, out) -> int:
    image = read_elf(ns.binary)
    goal = _goal(ns)
    catalog = Catalog.from_image(image, ScanConfig(ns.max_instr, ns.max_lookback))
    cons = Constraints(ns.bad_bytes, ns.data_addr, ns.max_words, ns.base)
    chain = compile_chain(goal, catalog, cons)
    data = render(layout(chain, ns.base), ns.format)
    if ns.out:
        with open(ns.out, "wb") as f:
            f.write(data)
    elif hasattr(out, "buffer"):
        out.flush()
        out.buffer.write(data)
        out.buffer.flush()
    else:
        out.write(data.decode("latin-1"))
    return EXIT_OK


def cmd_verify(ns, out) -> int:
    image = read_elf(ns.binary)
    goal = _goal(ns)
    try:
        with open(ns.payload, "rb") as f:
            words = words_from_file(f.read())
    except OSError as exc:
        raise InputError(f"cannot read payload: {exc}")
    cons = Constraints(data_vaddr=ns.data_addr, base_offset=ns.base)
    staged = {}
    if any(a.is_pointer for a in goal.args):
        staged = staging_layout(goal, default_data_vaddr(writable_regions(image), cons, goal))
    state = init_state(image, pack_words(words), trace=ns.trace, base_offset=ns.base)
    outcome = run(state)
    if ns.trace:
        for stepno, rip, text in state.trace:
            out.write(json.dumps({"step": stepno, "rip": f"{rip:#x}", "insn": text}) + "\n")
    report = verify_goal(outcome, goal, staged)
    out.write(str(report) + "\n")
    return EXIT_OK if report.passed else EXIT_VERIFY


COMMANDS = {"gadgets": cmd_gadgets, "chain": cmd_chain, "verify": cmd_verify}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    if ns.verbose:
        logging.basicConfig(level=logging.DEBUG, stream=err)
    try:
        return COMMANDS[ns.cmd](ns, out)
    except ElfError as exc:
        err.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_INPUT
    except ChainError as exc:
        err.write(f"error: {exc.token}: {exc}\n")
        return EXIT_UNSAT
    except (InputError, PayloadFormatError, RegionCollision, ValueError) as exc:
        err.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_INPUT
    except OSError as exc:
        err.write(f"error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
