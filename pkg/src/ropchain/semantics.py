"""Symbolic summaries of gadgets and the capability tags derived from them.

Every register starts as ``InitReg(r)``.  Stack reads at a known constant
offset from the entry rsp become ``StackSlot(k)``; any other memory read is
``MemAt(addr)``.  Distinct symbolic bases are assumed not to alias.  When two
accesses share a base and partially overlap the summary is marked inexact
and the gadget tagged ``Unusable``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .x86 import (
    MASK32, MASK64, AddRegReg, Leave, MovLoad, MovRegImm64, MovRegReg, MovStore, Nop,
    PopReg, PushReg, Reg, Ret, RetImm, SubRegReg, Syscall, XorRegReg,
)

RSP = Reg.RSP


# -- expressions ---------------------------------------------------------------


@dataclass(frozen=True)
class InitReg:
    reg: Reg

    def __str__(self):
        return str(self.reg)


@dataclass(frozen=True)
class StackSlot:
    offset: int

    def __str__(self):
        return f"stack[{self.offset:+#x}]"


@dataclass(frozen=True)
class Const:
    value: int

    def __str__(self):
        return f"{self.value:#x}"


@dataclass(frozen=True)
class Add:
    a: object
    b: object

    def __str__(self):
        return f"({self.a} + {self.b})"


@dataclass(frozen=True)
class Sub:
    a: object
    b: object

    def __str__(self):
        return f"({self.a} - {self.b})"


@dataclass(frozen=True)
class Xor:
    a: object
    b: object

    def __str__(self):
        return f"({self.a} ^ {self.b})"


@dataclass(frozen=True)
class Trunc32ZeroExtend:
    a: object

    def __str__(self):
        return f"zx32({self.a})"


@dataclass(frozen=True)
class MemAt:
    addr: object

    def __str__(self):
        return f"mem[{self.addr}]"


def mk_add(a, b):
    if isinstance(a, Const) and isinstance(b, Const):
        return Const((a.value + b.value) & MASK64)
    if isinstance(a, Const):
        a, b = b, a
    if isinstance(b, Const):
        if b.value == 0:
            return a
        if isinstance(a, Add) and isinstance(a.b, Const):
            return mk_add(a.a, Const((a.b.value + b.value) & MASK64))
    return Add(a, b)


def mk_sub(a, b):
    if a == b:
        return Const(0)
    if isinstance(b, Const):
        return mk_add(a, Const(-b.value & MASK64))
    return Sub(a, b)


def mk_xor(a, b):
    if a == b:
        return Const(0)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value ^ b.value)
    if isinstance(a, Const) and a.value == 0:
        return b
    if isinstance(b, Const) and b.value == 0:
        return a
    return Xor(a, b)


def mk_trunc(a):
    if isinstance(a, Const):
        return Const(a.value & MASK32)
    if isinstance(a, Trunc32ZeroExtend):
        return a
    return Trunc32ZeroExtend(a)


def split_const(e):
    """Decompose e as (base, c) with e == base + c; base None for constants."""
    if isinstance(e, Const):
        return None, e.value
    if isinstance(e, Add) and isinstance(e.b, Const):
        return e.a, e.b.value
    return e, 0


def _signed(v):
    return v - (1 << 64) if v & (1 << 63) else v


def stack_offset(e) -> Optional[int]:
    base, c = split_const(e)
    if base == InitReg(RSP):
        return _signed(c)
    return None


def rsp_plus(k: int):
    return mk_add(InitReg(RSP), Const(k & MASK64))


def depth(e) -> int:
    if isinstance(e, (Add, Sub, Xor)):
        return 1 + max(depth(e.a), depth(e.b))
    if isinstance(e, Trunc32ZeroExtend):
        return 1 + depth(e.a)
    if isinstance(e, MemAt):
        return 1 + depth(e.addr)
    return 0


def evaluate(e, regs, read64: Callable[[int], Optional[int]]) -> Optional[int]:
    """Concrete value of ``e``; ``regs`` maps Reg -> int (missing means unknown).

    ``read64`` gives the 64-bit word of *initial* memory at an address, or None.
    """
    if isinstance(e, Const):
        return e.value
    if isinstance(e, InitReg):
        return regs.get(e.reg)
    if isinstance(e, StackSlot):
        rsp = regs.get(RSP)
        return None if rsp is None else read64((rsp + e.offset) & MASK64)
    if isinstance(e, MemAt):
        a = evaluate(e.addr, regs, read64)
        return None if a is None else read64(a)
    if isinstance(e, Trunc32ZeroExtend):
        a = evaluate(e.a, regs, read64)
        return None if a is None else a & MASK32
    a = evaluate(e.a, regs, read64)
    b = evaluate(e.b, regs, read64)
    if a is None or b is None:
        return None
    if isinstance(e, Add):
        return (a + b) & MASK64
    if isinstance(e, Sub):
        return (a - b) & MASK64
    return a ^ b


# -- tags --------------------------------------------------------------------


@dataclass(frozen=True)
class LoadConst:
    reg: Reg
    offset: int

    def __str__(self):
        return f"LoadConst({self.reg},{self.offset})"


@dataclass(frozen=True)
class MoveReg:
    dst: Reg
    src: Reg

    def __str__(self):
        return f"MoveReg({self.dst},{self.src})"


@dataclass(frozen=True)
class LoadMem:
    dst: Reg
    base: Reg
    disp: int = 0

    def __str__(self):
        return f"LoadMem({self.dst},{self.base},{self.disp})"


@dataclass(frozen=True)
class StoreMem:
    base: Reg
    src: Reg
    disp: int = 0

    def __str__(self):
        return f"StoreMem({self.base},{self.src},{self.disp})"


@dataclass(frozen=True)
class Arith:
    kind: str  # "add" | "sub" | "xor"
    dst: Reg
    src: Reg

    def __str__(self):
        return f"Arith({self.kind},{self.dst},{self.src})"


@dataclass(frozen=True)
class ZeroReg:
    reg: Reg

    def __str__(self):
        return f"ZeroReg({self.reg})"


@dataclass(frozen=True)
class _Flag:
    name: str

    def __str__(self):
        return self.name


SyscallTrigger = _Flag("SyscallTrigger")
StackPivot = _Flag("StackPivot")
Unusable = _Flag("Unusable")


# -- summaries -----------------------------------------------------------------


@dataclass(frozen=True)
class GadgetEffect:
    out: dict
    stack_delta: Optional[int]      # None when rsp ends at a non-constant offset
    writes: tuple                   # ((addr, value, 64), ...) in program order
    reads: tuple                    # non-stack load addresses
    next_rip: object                # where the terminator transfers control
    exact: bool
    tags: frozenset = field(default=frozenset())
    terminator: object = None

    @property
    def clobbers(self) -> frozenset:
        """Registers left changed; rsp is accounted for by stack_delta instead."""
        return frozenset(r for r, e in self.out.items() if e != InitReg(r) and r != RSP)

    def value(self, reg: Reg):
        return self.out.get(reg, InitReg(reg))

    @property
    def ret_offset(self) -> Optional[int]:
        """Entry-rsp offset of the word popped as the next return address."""
        return stack_offset_of_slot(self.next_rip)

    def describe(self) -> str:
        parts = [f"{r} = {e}" for r, e in sorted(self.out.items()) if e != InitReg(r)]
        parts += [f"[{a}] = {v}" for a, v, _ in self.writes]
        return "; ".join(parts)


def stack_offset_of_slot(e) -> Optional[int]:
    return e.offset if isinstance(e, StackSlot) else None


class _SymState:
    def __init__(self):
        self.regs = {r: InitReg(r) for r in Reg}
        self.writes = []
        self.reads = []
        self.exact = True

    def load(self, addr):
        base, c = split_const(addr)
        for w_addr, w_val, _ in reversed(self.writes):
            if w_addr == addr:
                return w_val
            w_base, wc = split_const(w_addr)
            if w_base == base:
                d = _signed((c - wc) & MASK64)
                if -8 < d < 8:
                    self.exact = False
                    break
        off = stack_offset(addr)
        if off is not None:
            return StackSlot(off)
        self.reads.append(addr)
        return MemAt(addr)

    def store(self, addr, value):
        self.writes.append((addr, value, 64))

    def pop(self):
        rsp = self.regs[RSP]
        v = self.load(rsp)
        self.regs[RSP] = mk_add(rsp, Const(8))
        return v


def summarize(gadget) -> GadgetEffect:
    st = _SymState()
    regs = st.regs
    next_rip = None
    for ins in gadget.instrs:
        op = ins.op
        if isinstance(op, PopReg):
            regs[op.reg] = st.pop()
        elif isinstance(op, PushReg):
            v = regs[op.reg]
            regs[RSP] = mk_sub(regs[RSP], Const(8))
            st.store(regs[RSP], v)
        elif isinstance(op, MovRegReg):
            v = regs[op.src]
            regs[op.dst] = mk_trunc(v) if op.width == 32 else v
        elif isinstance(op, MovRegImm64):
            regs[op.dst] = Const(op.imm)
        elif isinstance(op, MovStore):
            st.store(mk_add(regs[op.base], Const(op.disp & MASK64)), regs[op.src])
        elif isinstance(op, MovLoad):
            regs[op.dst] = st.load(mk_add(regs[op.base], Const(op.disp & MASK64)))
        elif isinstance(op, AddRegReg):
            regs[op.dst] = mk_add(regs[op.dst], regs[op.src])
        elif isinstance(op, SubRegReg):
            regs[op.dst] = mk_sub(regs[op.dst], regs[op.src])
        elif isinstance(op, XorRegReg):
            v = mk_xor(regs[op.dst], regs[op.src])
            regs[op.dst] = mk_trunc(v) if op.width == 32 else v
        elif isinstance(op, Leave):
            regs[RSP] = regs[Reg.RBP]
            regs[Reg.RBP] = st.pop()
        elif isinstance(op, Nop):
            pass
        elif isinstance(op, Ret):
            next_rip = st.pop()
        elif isinstance(op, RetImm):
            next_rip = st.pop()
            regs[RSP] = mk_add(regs[RSP], Const(op.imm))
        elif isinstance(op, Syscall):
            pass
        else:  # pragma: no cover - decoder and summarizer share the subset
            raise TypeError(f"unmodelled op {op!r}")

    out = {r: e for r, e in regs.items() if e != InitReg(r)}
    delta = stack_offset(regs[RSP])
    eff = GadgetEffect(
        out=out,
        stack_delta=delta,
        writes=tuple(st.writes),
        reads=tuple(st.reads),
        next_rip=next_rip,
        exact=st.exact,
        terminator=gadget.terminator,
    )
    return _with_tags(eff)


def _with_tags(eff: GadgetEffect) -> GadgetEffect:
    return GadgetEffect(eff.out, eff.stack_delta, eff.writes, eff.reads, eff.next_rip,
                        eff.exact, frozenset(classify(eff)), eff.terminator)


def classify(eff: GadgetEffect) -> set:
    tags = set()
    term = eff.terminator
    if isinstance(term, Syscall):
        tags.add(SyscallTrigger)
    if eff.stack_delta is None:
        tags.add(StackPivot)
    elif not eff.exact or not _control_ok(eff):
        tags.add(Unusable)

    for r, e in eff.out.items():
        if r == RSP:
            continue
        if isinstance(e, StackSlot):
            tags.add(LoadConst(r, e.offset))
        elif isinstance(e, InitReg) and e.reg != RSP:
            tags.add(MoveReg(r, e.reg))
        elif e == Const(0):
            tags.add(ZeroReg(r))
        elif isinstance(e, MemAt):
            base, c = split_const(e.addr)
            if isinstance(base, InitReg) and base.reg != RSP:
                tags.add(LoadMem(r, base.reg, _signed(c)))
        elif isinstance(e, (Add, Sub, Xor)):
            kind = {Add: "add", Sub: "sub", Xor: "xor"}[type(e)]
            a, b = e.a, e.b
            if a == InitReg(r) and isinstance(b, InitReg) and b.reg not in (r, RSP):
                tags.add(Arith(kind, r, b.reg))
            elif kind != "sub" and b == InitReg(r) and isinstance(a, InitReg) \
                    and a.reg not in (r, RSP):
                tags.add(Arith(kind, r, a.reg))

    for addr, val, _ in eff.writes:
        base, c = split_const(addr)
        if isinstance(base, InitReg) and base.reg != RSP and isinstance(val, InitReg) \
                and val.reg != RSP:
            tags.add(StoreMem(base.reg, val.reg, _signed(c)))
    return tags


def _control_ok(eff: GadgetEffect) -> bool:
    """Ret-style gadgets must take the next address from the payload and must
    not scribble over payload words that later gadgets will consume."""
    term = eff.terminator
    if isinstance(term, Syscall):
        return eff.stack_delta >= 0
    ret_off = eff.ret_offset
    imm = term.imm if isinstance(term, RetImm) else 0
    if ret_off is None or eff.stack_delta < 8 or ret_off != eff.stack_delta - 8 - imm:
        return False
    for addr, _, _ in eff.writes:
        off = stack_offset(addr)
        if off is not None and off + 8 > ret_off:
            return False
    return True


def summarize_all(gadgets) -> list:
    return [(g, summarize(g)) for g in gadgets]
