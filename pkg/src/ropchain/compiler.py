"""Goal-directed ROP chain synthesis for a single Linux x86-64 syscall.

The chain is built in three phases: stage pointer data in writable memory
with write-what-where gadgets, load rax and the argument registers in a
clobber-safe order, then transfer to a syscall gadget.
"""

from __future__ import annotations

import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from .elf import Elf64Image, writable_regions
from .scanner import Gadget, ScanConfig, find_gadgets
from .semantics import (
    Arith, GadgetEffect, LoadConst, MoveReg, StackPivot, StoreMem, SyscallTrigger, Unusable,
    ZeroReg, evaluate, split_const, stack_offset, summarize,
)
from .x86 import MASK64, Reg, RetImm, Syscall

log = logging.getLogger(__name__)

SYSCALL_ARG_REGS = (Reg.RDI, Reg.RSI, Reg.RDX, Reg.R10, Reg.R8, Reg.R9)
MAX_ALTERNATIVES = 32
MASK_DRAWS = 10_000
DEFAULT_FILLER_BYTE = 0x41
DATA_OFFSET = 0x100


class ChainError(Exception):
    """Compile failure; the class name is the stable token reported by the CLI."""

    @property
    def token(self) -> str:
        return type(self).__name__


class NoSyscallGadget(ChainError):
    pass


class RegisterUnreachable(ChainError):
    def __init__(self, reg):
        super().__init__(f"no gadget route loads {reg}")
        self.reg = reg


class ImmediateUnencodable(ChainError):
    pass


class CyclicClobber(ChainError):
    def __init__(self, conflicts):
        desc = ", ".join(f"{r}->{{{', '.join(map(str, sorted(c)))}}}"
                         for r, c in sorted(conflicts.items()))
        super().__init__(f"no clobber-free order: {desc}")
        self.conflicts = conflicts


class ChainTooLong(ChainError):
    pass


class NoWritePrimitive(ChainError):
    pass


class NoWritableRegion(ChainError):
    pass


class BadByteViolation(ChainError):
    pass


# -- goal / constraint types -----------------------------------------------------


@dataclass(frozen=True)
class Arg:
    value: int = 0
    data: Optional[bytes] = None

    @classmethod
    def imm(cls, value: int) -> "Arg":
        if not 0 <= value <= MASK64:
            raise ValueError(f"immediate {value:#x} out of u64 range")
        return cls(value=value)

    @classmethod
    def ptr(cls, data: bytes) -> "Arg":
        if not data:
            raise ValueError("data pointer payload must be non-empty")
        return cls(data=bytes(data))

    @property
    def is_pointer(self) -> bool:
        return self.data is not None

    def __str__(self):
        return f"data:{self.data!r}" if self.is_pointer else f"imm:{self.value:#x}"


@dataclass(frozen=True)
class SyscallGoal:
    number: int
    args: tuple = ()

    def __post_init__(self):
        if len(self.args) > 6:
            raise ValueError("at most 6 syscall arguments")
        object.__setattr__(self, "args", tuple(self.args))


@dataclass(frozen=True)
class Constraints:
    bad_bytes: frozenset = frozenset()
    data_vaddr: Optional[int] = None
    max_chain_words: int = 256
    base_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bad_bytes", frozenset(self.bad_bytes))
        if len(self.bad_bytes) >= 256:
            raise ValueError("bad_bytes must leave at least one byte value allowed")

    def clean(self, word: int) -> bool:
        if not self.bad_bytes:
            return True
        return not any(b in self.bad_bytes for b in (word & MASK64).to_bytes(8, "little"))

    @property
    def filler(self) -> int:
        b = DEFAULT_FILLER_BYTE
        while b in self.bad_bytes:
            b = (b + 1) & 0xFF
        return int.from_bytes(bytes([b]) * 8, "little")


# -- catalog -------------------------------------------------------------------


@dataclass(frozen=True)
class Entry:
    gadget: Gadget
    effect: GadgetEffect

    @property
    def vaddr(self) -> int:
        return self.gadget.vaddr


class Catalog:
    """Summarized gadgets plus the image facts the compiler needs."""

    def __init__(self, entries: Iterable[Entry], writable: Iterable = ()):
        self.entries = sorted(entries, key=lambda e: e.vaddr)
        self.writable = sorted(writable)

    @classmethod
    def from_gadgets(cls, gadgets, writable=()) -> "Catalog":
        return cls((Entry(g, summarize(g)) for g in gadgets), writable)

    @classmethod
    def from_image(cls, image: Elf64Image, cfg: ScanConfig = ScanConfig()) -> "Catalog":
        return cls.from_gadgets(find_gadgets(image, cfg), writable_regions(image))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _is_chainable(e: Entry) -> bool:
    """Ret-terminated, constant stack motion, and memory-silent apart from
    the stack (so it cannot fault on a wild access)."""
    eff = e.effect
    if StackPivot in eff.tags or Unusable in eff.tags or not eff.exact:
        return False
    term = eff.terminator
    if isinstance(term, Syscall):
        return False
    if isinstance(term, RetImm) and term.imm % 8:
        return False
    if eff.stack_delta % 8 or eff.reads:
        return False
    return all(stack_offset(a) is not None for a, _, _ in eff.writes)


def _pref(e: Entry):
    eff = e.effect
    return (isinstance(eff.terminator, RetImm), len(eff.clobbers), eff.stack_delta, e.vaddr)


# -- chain types ---------------------------------------------------------------


@dataclass(frozen=True)
class ChainStep:
    gadget: Gadget
    effect: GadgetEffect
    stack_words: tuple = ()
    annotations: tuple = ()

    @property
    def word_count(self) -> int:
        return 1 + len(self.stack_words)


@dataclass(frozen=True)
class Chain:
    steps: tuple
    filler: int = DEFAULT_FILLER_BYTE * 0x0101010101010101
    staged: dict = field(default_factory=dict)

    @property
    def final(self) -> ChainStep:
        return self.steps[-1]

    def __len__(self):
        return len(self.steps)

    def word_count(self) -> int:
        n = 0
        prev = None
        for st in self.steps:
            n += st.word_count
            if prev is not None and isinstance(prev.effect.terminator, RetImm):
                n += prev.effect.terminator.imm // 8
            prev = st
        return n


def make_step(entry: Entry, slots: dict, filler: int) -> ChainStep:
    """Fill the gadget's stack words; ``slots`` maps entry-rsp offset -> (value, note)."""
    eff = entry.effect
    nwords = eff.ret_offset // 8
    words = [filler] * nwords
    notes = ["padding"] * nwords
    for off, (value, note) in slots.items():
        if off % 8 or not 0 <= off < eff.ret_offset:
            raise ValueError(f"slot {off} unusable in {entry.gadget}")
        words[off // 8] = value
        notes[off // 8] = note
    return ChainStep(entry.gadget, eff, tuple(words), tuple(notes))


def syscall_step(entry: Entry) -> ChainStep:
    return ChainStep(entry.gadget, entry.effect, (), ())


_SIM_RSP = 0xF00D_0000_0000_0000  # stand-in entry rsp for each step


def simulate(steps, known: Optional[dict] = None):
    """Propagate concrete register values through step effects.

    Returns (registers, memory writes, clobbered set).  Unknown values are
    absent from the register map.
    """
    regs = dict(known or {})
    writes = []
    clobbered = set()
    for st in steps:
        words = st.stack_words

        def read64(addr, _rsp=_SIM_RSP, _words=words):
            off = addr - _rsp
            if off % 8 == 0 and 0 <= off // 8 < len(_words):
                return _words[off // 8]
            return None

        env = dict(regs)
        env[Reg.RSP] = _SIM_RSP
        for addr, val, _ in st.effect.writes:
            if stack_offset(addr) is None:
                a = evaluate(addr, env, read64)
                v = evaluate(val, env, read64)
                writes.append((a, v))
        new = {}
        for r, e in st.effect.out.items():
            if r == Reg.RSP:
                continue
            new[r] = evaluate(e, env, read64)
            clobbered.add(r)
        for r, v in new.items():
            if v is None:
                regs.pop(r, None)
            else:
                regs[r] = v & MASK64
    return regs, writes, clobbered


@dataclass(frozen=True)
class Plan:
    reg: Reg
    value: int
    steps: tuple
    clobbers: frozenset
    strategy: str

    def __str__(self):
        return f"{self.reg}={self.value:#x} via {self.strategy} ({len(self.steps)} steps)"


# -- the compiler ----------------------------------------------------------------


class _Planner:
    def __init__(self, catalog: Catalog, constraints: Constraints):
        self.catalog = catalog
        self.cons = constraints
        self.filler = constraints.filler
        usable = [e for e in catalog if _is_chainable(e)]
        self.chainable = sorted(usable, key=_pref)
        # same indexes ignoring bad bytes, for RegisterUnreachable diagnostics
        self.loaders_any = self._index(self.chainable)
        clean = [e for e in self.chainable if self._addr_ok(e)]
        self.loaders, self.movers, self.zeroers, self.xors, self.adders = self._index(clean)

    def _addr_ok(self, e: Entry) -> bool:
        return self.cons.clean(e.vaddr + self.cons.base_offset)

    @staticmethod
    def _index(entries):
        loaders, movers, zeroers, xors, adders = {}, {}, {}, {}, {}
        for e in entries:
            ret_off = e.effect.ret_offset
            for t in sorted(e.effect.tags, key=str):
                if isinstance(t, LoadConst) and t.offset % 8 == 0 and 0 <= t.offset < ret_off:
                    loaders.setdefault(t.reg, []).append((e, t.offset))
                elif isinstance(t, MoveReg):
                    movers.setdefault(t.dst, []).append((e, t.src))
                elif isinstance(t, ZeroReg):
                    zeroers.setdefault(t.reg, []).append(e)
                elif isinstance(t, Arith) and t.kind == "xor":
                    xors.setdefault(t.dst, []).append((e, t.src))
                elif isinstance(t, Arith) and t.kind == "add":
                    adders.setdefault(t.dst, []).append((e, t.src))
        return loaders, movers, zeroers, xors, adders

    # -- immediates --

    def load_clean(self, reg: Reg, value: int) -> Iterator[tuple]:
        """Strategies 1 and 2: the value itself goes on the stack."""
        if not self.cons.clean(value):
            return
        for e, off in self.loaders.get(reg, ()):
            yield "direct", (make_step(e, {off: (value, f"immediate {reg}")}, self.filler),)
        for mv, donor in self.movers.get(reg, ()):
            for e, off in self.loaders.get(donor, ())[:4]:
                yield "donor", (make_step(e, {off: (value, f"immediate {donor}")}, self.filler),
                                make_step(mv, {}, self.filler))

    def find_mask(self, value: int) -> Optional[int]:
        clean = self.cons.clean
        rng = random.Random(value ^ 0x5EED)
        for _ in range(MASK_DRAWS):
            m = rng.getrandbits(64)
            if clean(m) and clean(value ^ m):
                return m
        bad = self.cons.bad_bytes
        out = bytearray()
        for vb in value.to_bytes(8, "little"):
            for mb in itertools.chain(range(1, 256), (0,)):
                if mb not in bad and (vb ^ mb) not in bad:
                    out.append(mb)
                    break
            else:
                return None
        return int.from_bytes(out, "little")

    def _candidates(self, reg: Reg, value: int) -> Iterator[tuple]:
        yield from ((s, st) for s, st in self.load_clean(reg, value) if s == "direct")
        if value == 0:
            for z in self.zeroers.get(reg, ()):
                yield "zero", (make_step(z, {}, self.filler),)
        yield from ((s, st) for s, st in self.load_clean(reg, value) if s == "donor")

        xors = self.xors.get(reg, ())
        if xors:
            m = self.find_mask(value)
            if m is not None:
                for x, donor in xors:
                    for _, first in itertools.islice(self.load_clean(reg, m), 4):
                        for _, second in itertools.islice(self.load_clean(donor, value ^ m), 4):
                            yield "xor-split", first + second + (make_step(x, {}, self.filler),)

        for a, donor in self.adders.get(reg, ()):
            for z in self.zeroers.get(reg, ()):
                for _, second in itertools.islice(self.load_clean(donor, value), 4):
                    yield "zero-add", (make_step(z, {}, self.filler),) + second + (
                        make_step(a, {}, self.filler),)

    def immediate_plans(self, reg: Reg, value: int) -> list:
        plans = []
        seen = set()
        for strategy, steps in self._candidates(reg, value):
            regs, _, clobbered = simulate(steps)
            if regs.get(reg) != value:
                continue
            key = tuple((s.gadget.vaddr, s.stack_words) for s in steps)
            if key in seen:
                continue
            seen.add(key)
            plans.append(Plan(reg, value, steps, frozenset(clobbered - {reg}), strategy))
            if len(plans) >= MAX_ALTERNATIVES:
                break
        if not plans:
            if not self._reachable(reg, value):
                raise RegisterUnreachable(reg)
            raise ImmediateUnencodable(f"cannot encode {value:#x} into {reg} "
                                       f"avoiding bytes {sorted(self.cons.bad_bytes)}")
        return plans

    def _reachable(self, reg, value) -> bool:
        loaders, movers, zeroers, _, adders = self.loaders_any
        if reg in loaders:
            return True
        if any(src in loaders for _, src in movers.get(reg, ())):
            return True
        if reg in zeroers and (value == 0 or any(d in loaders for _, d in adders.get(reg, ()))):
            return True
        return False

    # -- data staging --

    def store_gadgets(self):
        out = []
        for e in self.catalog:
            eff = e.effect
            if StackPivot in eff.tags or Unusable in eff.tags or not eff.exact:
                continue
            if isinstance(eff.terminator, Syscall) or eff.reads or eff.stack_delta % 8:
                continue
            if isinstance(eff.terminator, RetImm) and eff.terminator.imm % 8:
                continue
            if not self._addr_ok(e):
                continue
            mem_writes = [w for w in eff.writes if stack_offset(w[0]) is None]
            if len(mem_writes) != 1:
                continue
            for t in sorted(eff.tags, key=str):
                if isinstance(t, StoreMem) and t.base != t.src:
                    base, disp = split_const(mem_writes[0][0])
                    if base is not None and base.reg == t.base:
                        out.append((e, t))
        out.sort(key=lambda p: _pref(p[0]))
        return out


def staging_layout(goal: SyscallGoal, data_vaddr: int) -> dict:
    """Arg index -> staged address, packing each blob on an 8-byte boundary."""
    staged = {}
    cursor = data_vaddr
    for i, arg in enumerate(goal.args):
        if arg.is_pointer:
            staged[i] = cursor
            cursor += (len(arg.data) + 7) // 8 * 8
    return staged


def default_data_vaddr(writable, constraints: Constraints, goal: SyscallGoal) -> int:
    """Runtime staging address: explicit override, else the first writable
    segment big enough, skipping its first 0x100 bytes, shifted by the load base."""
    if constraints.data_vaddr is not None:
        return constraints.data_vaddr
    need = sum((len(a.data) + 7) // 8 * 8 for a in goal.args if a.is_pointer)
    for vaddr, size in writable:
        if size >= DATA_OFFSET + need:
            return (vaddr + DATA_OFFSET + constraints.base_offset) & MASK64
    raise NoWritableRegion("no writable segment large enough for staged data; "
                           "pass data_vaddr explicitly")


def plan_data_writes(goal: SyscallGoal, catalog: Catalog, constraints: Constraints,
                     _planner: Optional[_Planner] = None):
    if not any(a.is_pointer for a in goal.args):
        return {}, []
    planner = _planner or _Planner(catalog, constraints)
    data_vaddr = default_data_vaddr(catalog.writable, constraints, goal)
    staged = staging_layout(goal, data_vaddr)

    words = []
    for i, arg in enumerate(goal.args):
        if arg.is_pointer:
            blob = arg.data + b"\0" * (-len(arg.data) % 8)
            for j in range(0, len(blob), 8):
                words.append((staged[i] + j, int.from_bytes(blob[j:j + 8], "little")))

    stores = planner.store_gadgets()
    if not stores:
        raise NoWritePrimitive("no usable mov [reg+disp], reg gadget")
    last_err = None
    for entry, tag in stores[:MAX_ALTERNATIVES]:
        try:
            steps = []
            for addr, word in words:
                needed = {
                    tag.base: planner.immediate_plans(tag.base, (addr - tag.disp) & MASK64),
                    tag.src: planner.immediate_plans(tag.src, word),
                }
                for plan in order_assignments(needed):
                    steps.extend(plan.steps)
                steps.append(make_step(entry, {}, planner.filler))
            _, writes, _ = simulate(steps)
            if not _writes_match(writes, words):
                raise ImmediateUnencodable("staging simulation disagrees with plan")
            return staged, steps
        except ChainError as exc:
            log.debug("store gadget %s rejected: %s", entry.gadget, exc)
            last_err = exc
    raise last_err


def _writes_match(writes, words) -> bool:
    final = {}
    for a, v in writes:
        final[a] = v
    return all(final.get(a) == w for a, w in words)


def order_assignments(needed: dict) -> list:
    """Pick one plan per register and an order in which no plan clobbers a
    register finalized before it.  Permutations are tried in lexicographic
    register order, so the result is deterministic."""
    regs = sorted(needed)
    for perm in itertools.permutations(regs):
        finalized = set()
        chosen = []
        for r in perm:
            for plan in needed[r]:
                if not (plan.clobbers & finalized):
                    chosen.append(plan)
                    finalized.add(r)
                    break
            else:
                break
        else:
            return chosen
    conflicts = {}
    for r in regs:
        hit = set()
        for plan in needed[r]:
            hit |= plan.clobbers & set(regs)
        conflicts[r] = hit
    raise CyclicClobber(conflicts)


def _syscall_entry(planner: _Planner, targets) -> Entry:
    cands = []
    for e in planner.catalog:
        eff = e.effect
        if SyscallTrigger not in eff.tags or Unusable in eff.tags or StackPivot in eff.tags:
            continue
        if eff.stack_delta != 0 or eff.reads or not planner._addr_ok(e):
            continue
        if any(stack_offset(a) is None for a, _, _ in eff.writes):
            continue
        if eff.clobbers & set(targets):
            continue
        cands.append(e)
    if not cands:
        raise NoSyscallGadget("no clean, side-effect-free syscall gadget")
    return min(cands, key=lambda e: (e.gadget.byte_len, e.vaddr))


def encode_immediate(value: int, reg: Reg, catalog: Catalog,
                     constraints: Constraints = Constraints()) -> list:
    return list(_Planner(catalog, constraints).immediate_plans(reg, value)[0].steps)


def compile_chain(goal: SyscallGoal, catalog: Catalog,
                  constraints: Constraints = Constraints()) -> Chain:
    planner = _Planner(catalog, constraints)
    targets = {Reg.RAX: goal.number & MASK64}
    staged = {}
    if any(a.is_pointer for a in goal.args):
        staged = staging_layout(goal, default_data_vaddr(catalog.writable, constraints, goal))
    for i, arg in enumerate(goal.args):
        targets[SYSCALL_ARG_REGS[i]] = staged[i] if arg.is_pointer else arg.value

    sc = _syscall_entry(planner, targets)
    staged, stage_steps = plan_data_writes(goal, catalog, constraints, planner)

    needed = {r: planner.immediate_plans(r, v) for r, v in targets.items()}
    ordered = order_assignments(needed)
    log.debug("register order: %s", ", ".join(map(str, ordered)))

    steps = list(stage_steps)
    for plan in ordered:
        steps.extend(plan.steps)
    steps.append(syscall_step(sc))

    regs, _, _ = simulate(steps)
    wrong = {r: regs.get(r) for r, v in targets.items() if regs.get(r) != v}
    if wrong:  # pragma: no cover - plans are individually simulated
        raise CyclicClobber({r: set() for r in wrong})

    chain = Chain(tuple(steps), planner.filler, staged)
    if chain.word_count() > constraints.max_chain_words:
        raise ChainTooLong(f"{chain.word_count()} words > limit {constraints.max_chain_words}")

    from .payload import check_bad_bytes, layout
    bad = check_bad_bytes(layout(chain, constraints.base_offset), constraints.bad_bytes)
    if bad:
        raise BadByteViolation(f"{len(bad)} forbidden bytes in rendered payload")
    return chain
