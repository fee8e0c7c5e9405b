"""Backward gadget search from ret / ret imm16 / syscall terminators."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .elf import Elf64Image, executable_regions
from .x86 import FIRST_BYTES, Instruction, Ret, RetImm, Syscall, decode_at, is_terminator

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScanConfig:
    max_instructions: int = 5
    max_lookback_bytes: int = 20

    def __post_init__(self):
        if self.max_instructions < 1:
            raise ValueError("max_instructions must be >= 1")
        if self.max_lookback_bytes < 1:
            raise ValueError("max_lookback_bytes must be >= 1")


@dataclass(frozen=True)
class Gadget:
    vaddr: int
    instrs: tuple

    @property
    def terminator(self):
        return self.instrs[-1].op

    @property
    def byte_len(self) -> int:
        return sum(i.len for i in self.instrs)

    @property
    def text(self) -> str:
        return "; ".join(i.text() for i in self.instrs)

    def __str__(self) -> str:
        return f"{self.vaddr:#x}: {self.text}"


def find_terminators(data: bytes, vaddr: int = 0) -> list:
    """All (vaddr, kind) where a terminator encoding starts; overlaps included."""
    out = []
    n = len(data)
    for off in _terminator_offsets(data):
        b = data[off]
        if b == 0xC3:
            out.append((vaddr + off, Ret()))
        elif b == 0xC2:
            if off + 3 <= n:
                out.append((vaddr + off, RetImm(data[off + 1] | (data[off + 2] << 8))))
        elif off + 1 < n and data[off + 1] == 0x05:
            out.append((vaddr + off, Syscall()))
    return out


def _terminator_offsets(data: bytes) -> list:
    offs = []
    for needle in (b"\xc3", b"\xc2", b"\x0f\x05"):
        i = data.find(needle)
        while i != -1:
            offs.append(i)
            i = data.find(needle, i + 1)
    offs.sort()
    return offs


def _term_len(data, off):
    b = data[off]
    if b == 0xC3:
        return 1
    if b == 0xC2:
        return 3 if off + 3 <= len(data) else 0
    return 2


def _scan_spans(data: bytes, cfg: ScanConfig):
    """Yield (start, end, ops) for every gadget in ``data``, unordered.

    ``ops`` is the tuple of decoded ops; it identifies the gadget's text
    without building Instruction objects.
    """
    n = len(data)
    max_n = cfg.max_instructions
    lookback = cfg.max_lookback_bytes
    first_ok = FIRST_BYTES
    cache = {}
    for t in _terminator_offsets(data):
        tlen = _term_len(data, t)
        if tlen == 0:
            continue
        res = decode_at(data, t, n)
        if res is None:
            continue
        end = t + tlen
        # ops[o]: decoded ops on the path o -> t, terminator included
        ops = {t: (res[0],)}
        lo = max(0, t - lookback)
        for o in range(t - 1, lo - 1, -1):
            if data[o] not in first_ok:
                continue
            res = cache.get(o)
            if res is None:
                res = decode_at(data, o, n) or False
                cache[o] = res
            if res is False:
                continue
            op, ln = res
            nxt = o + ln
            if nxt > t or is_terminator(op):
                continue
            tail = ops.get(nxt)
            if tail is None or len(tail) >= max_n:
                continue
            ops[o] = (op,) + tail
        for o, key in ops.items():
            yield o, end, key


def scan_region(data: bytes, vaddr: int, cfg: ScanConfig = ScanConfig()) -> list:
    """Gadgets in one region, not deduplicated, in ascending vaddr order."""
    spans = sorted((s, e) for s, e, _ in _scan_spans(data, cfg))
    return [_materialize(data, vaddr, s, e) for s, e in spans]


def _materialize(data, vaddr, start, end) -> Gadget:
    instrs = []
    pos = start
    while pos < end:
        op, ln = decode_at(data, pos, end)
        instrs.append(Instruction(vaddr + pos, op, bytes(data[pos:pos + ln])))
        pos += ln
    return Gadget(vaddr + start, tuple(instrs))


def dedup(gadgets) -> list:
    """Keep the lowest-vaddr gadget per normalized text; result sorted by vaddr."""
    best = {}
    for g in gadgets:
        key = g.text
        cur = best.get(key)
        if cur is None or g.vaddr < cur.vaddr:
            best[key] = g
    return sorted(best.values(), key=lambda g: (g.vaddr, g.byte_len))


def find_gadgets(image: Elf64Image, cfg: ScanConfig = ScanConfig()) -> list:
    """Deduplicated gadgets of every executable region.

    Duplicates are dropped on op tuples first so that only survivors are
    materialized; the text-keyed pass afterwards catches distinct op tuples
    that render identically.
    """
    best = {}
    for vaddr, data in executable_regions(image):
        count = 0
        for s, e, key in _scan_spans(data, cfg):
            count += 1
            cur = best.get(key)
            if cur is None or vaddr + s < cur[0]:
                best[key] = (vaddr + s, vaddr, data, s, e)
        log.debug("region %#x: %d raw gadgets", vaddr, count)
    return dedup(_materialize(data, vaddr, s, e) for _, vaddr, data, s, e in best.values())
