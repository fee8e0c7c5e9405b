"""Concrete emulator for the decoder subset, used as the oracle for chains.

The syscall instruction is trapped, never performed: reaching it ends the
run and the machine state is reported for inspection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .elf import Elf64Image
from .x86 import (
    MASK32, MASK64, AddRegReg, Leave, MovLoad, MovRegImm64, MovRegReg, MovStore, Nop,
    PopReg, PushReg, Reg, Ret, RetImm, SubRegReg, Syscall, XorRegReg, decode_at,
)

DEFAULT_STACK_BASE = 0x7FFFF0000000
DEFAULT_STACK_SIZE = 0x10000
DEFAULT_BUDGET = 10_000

SYSCALL_ARG_REGS = (Reg.RDI, Reg.RSI, Reg.RDX, Reg.R10, Reg.R8, Reg.R9)


class EmulatorError(Exception):
    pass


class RegionCollision(EmulatorError):
    pass


class _Fault(Exception):
    def __init__(self, kind, addr=None):
        super().__init__(kind)
        self.kind = kind
        self.addr = addr


class Memory:
    """Sparse byte store layered over the image's segments.

    Reads fall through: bytes written during the run, then segment contents
    (zero-fill honoured), then the optional ``backing`` callable.  Anything
    left is a wild read.
    """

    def __init__(self, image: Optional[Elf64Image], stack_base: int, stack_size: int,
                 backing: Optional[Callable[[int], int]] = None, wild_writes: bool = False,
                 bias: int = 0):
        self.image = image
        self.bias = bias
        self.segments = image.segments if image is not None else ()
        self.stack_base = stack_base
        self.stack_size = stack_size
        self.backing = backing
        self.wild_writes = wild_writes
        self.written = {}

    def copy(self) -> "Memory":
        m = Memory(self.image, self.stack_base, self.stack_size, self.backing, self.wild_writes,
                   self.bias)
        m.written = dict(self.written)
        return m

    def in_stack(self, addr: int) -> bool:
        return self.stack_base <= addr < self.stack_base + self.stack_size

    def read_byte(self, addr: int) -> int:
        v = self.written.get(addr)
        if v is not None:
            return v
        for seg in self.segments:
            if seg.contains(addr - self.bias):
                rel = addr - self.bias - seg.vaddr
                if rel < seg.file_size:
                    return self.image.raw[seg.file_offset + rel]
                return 0
        if self.backing is not None:
            return self.backing(addr)
        raise _Fault("WildRead", addr)

    def read64(self, addr: int) -> int:
        return int.from_bytes(bytes(self.read_byte((addr + i) & MASK64) for i in range(8)),
                              "little")

    def writable(self, addr: int) -> bool:
        if self.wild_writes or self.in_stack(addr):
            return True
        return any(s.writable and s.contains(addr - self.bias) for s in self.segments)

    def write64(self, addr: int, value: int):
        for i in range(8):
            a = (addr + i) & MASK64
            if not self.writable(a):
                raise _Fault("BadWrite", a)
        for i, b in enumerate(struct.pack("<Q", value & MASK64)):
            self.written[(addr + i) & MASK64] = b

    def write_bytes(self, addr: int, data: bytes):
        for i, b in enumerate(data):
            self.written[addr + i] = b


@dataclass
class MachineState:
    regs: list
    mem: Memory
    rip: Optional[int] = None
    steps: int = 0
    write_log: list = field(default_factory=list)
    trace: Optional[list] = None

    def reg(self, r: Reg) -> int:
        return self.regs[r]

    def reg_map(self) -> dict:
        return {r: self.regs[r] for r in Reg}


@dataclass(frozen=True)
class ReachedSyscall:
    state: MachineState
    ok = True


@dataclass(frozen=True)
class Fault:
    kind: str
    rip: Optional[int]
    step: int
    addr: Optional[int] = None
    ok = False

    def __str__(self):
        where = f" at {self.addr:#x}" if self.addr is not None else ""
        rip = f"{self.rip:#x}" if self.rip is not None else "?"
        return f"Fault({self.kind}{where}, rip={rip}, step={self.step})"


@dataclass(frozen=True)
class Budget:
    steps: int
    ok = False


def _overlaps(a0, a1, b0, b1):
    return a0 < b1 and b0 < a1


def init_state(image: Elf64Image, payload: bytes, stack_vaddr: Optional[int] = None,
               seed: Optional[dict] = None, stack_base: int = DEFAULT_STACK_BASE,
               stack_size: int = DEFAULT_STACK_SIZE, trace: bool = False,
               base_offset: int = 0) -> MachineState:
    """Copy the payload to the stack and point rsp at it.

    The payload sits mid-region by default so that pushes below rsp have room.
    ``base_offset`` is the load bias: segments appear at vaddr + base_offset.
    """
    for seg in image.segments:
        lo = seg.vaddr + base_offset
        if _overlaps(stack_base, stack_base + stack_size, lo, lo + seg.mem_size):
            raise RegionCollision(f"stack region {stack_base:#x} overlaps segment {seg.vaddr:#x}")
    if stack_vaddr is None:
        stack_vaddr = stack_base + stack_size // 2
    if not (stack_base <= stack_vaddr and stack_vaddr + len(payload) <= stack_base + stack_size):
        raise RegionCollision(
            f"payload of {len(payload)} bytes at {stack_vaddr:#x} does not fit the stack region")
    mem = Memory(image, stack_base, stack_size, bias=base_offset)
    mem.write_bytes(stack_vaddr, payload)
    regs = [0] * 16
    for r, v in (seed or {}).items():
        regs[Reg(r)] = v & MASK64
    regs[Reg.RSP] = stack_vaddr
    return MachineState(regs, mem, trace=[] if trace else None)


def _fetch(state: MachineState, rip: int):
    mem = state.mem
    for seg in mem.segments:
        lo = seg.vaddr + mem.bias
        if seg.executable and lo <= rip < lo + seg.file_size:
            start = seg.file_offset + (rip - lo)
            end = seg.file_offset + seg.file_size
            return decode_at(mem.image.raw, start, end)
    raise _Fault("BadRip", rip)


def step(state: MachineState):
    """Execute one instruction at ``state.rip``.  Returns the op executed."""
    regs = state.regs
    mem = state.mem
    rip = state.rip
    res = _fetch(state, rip)
    if res is None:
        raise _Fault("Opaque", rip)
    op, ln = res
    if state.trace is not None:
        state.trace.append((state.steps, rip, op.text()))
    state.steps += 1
    nxt = (rip + ln) & MASK64

    def push(v):
        regs[Reg.RSP] = (regs[Reg.RSP] - 8) & MASK64
        mem.write64(regs[Reg.RSP], v)
        state.write_log.append((regs[Reg.RSP], v & MASK64))

    def pop():
        v = mem.read64(regs[Reg.RSP])
        regs[Reg.RSP] = (regs[Reg.RSP] + 8) & MASK64
        return v

    if isinstance(op, PopReg):
        regs[op.reg] = pop()
    elif isinstance(op, PushReg):
        push(regs[op.reg])
    elif isinstance(op, MovRegReg):
        v = regs[op.src]
        regs[op.dst] = v & MASK32 if op.width == 32 else v
    elif isinstance(op, MovRegImm64):
        regs[op.dst] = op.imm
    elif isinstance(op, MovStore):
        addr = (regs[op.base] + op.disp) & MASK64
        mem.write64(addr, regs[op.src])
        state.write_log.append((addr, regs[op.src]))
    elif isinstance(op, MovLoad):
        regs[op.dst] = mem.read64((regs[op.base] + op.disp) & MASK64)
    elif isinstance(op, AddRegReg):
        regs[op.dst] = (regs[op.dst] + regs[op.src]) & MASK64
    elif isinstance(op, SubRegReg):
        regs[op.dst] = (regs[op.dst] - regs[op.src]) & MASK64
    elif isinstance(op, XorRegReg):
        v = regs[op.dst] ^ regs[op.src]
        regs[op.dst] = v & MASK32 if op.width == 32 else v
    elif isinstance(op, Leave):
        regs[Reg.RSP] = regs[Reg.RBP]
        regs[Reg.RBP] = pop()
    elif isinstance(op, Nop):
        pass
    elif isinstance(op, Ret):
        state.rip = pop()
    elif isinstance(op, RetImm):
        state.rip = pop()
        regs[Reg.RSP] = (regs[Reg.RSP] + op.imm) & MASK64
    elif isinstance(op, Syscall):
        pass
    if not isinstance(op, (Ret, RetImm, Syscall)):
        state.rip = nxt
    return op


def run(state: MachineState, budget: int = DEFAULT_BUDGET):
    """Dispatch from the payload: pop rip, execute until the first syscall."""
    try:
        if state.rip is None:
            rsp = state.regs[Reg.RSP]
            state.rip = state.mem.read64(rsp)
            state.regs[Reg.RSP] = (rsp + 8) & MASK64
        while True:
            if state.steps >= budget:
                return Budget(state.steps)
            op = step(state)
            if isinstance(op, Syscall):
                return ReachedSyscall(state)
    except _Fault as f:
        return Fault(f.kind, state.rip, state.steps, f.addr)


def run_gadget(state: MachineState, gadget):
    """Execute exactly the gadget's instructions starting at its vaddr."""
    state.rip = gadget.vaddr
    for _ in gadget.instrs:
        step(state)
    return state


# -- goal checking -------------------------------------------------------------


@dataclass
class Report:
    passed: bool
    diffs: list = field(default_factory=list)
    reason: str = ""

    def __str__(self):
        if self.passed:
            return "PASS"
        lines = [f"FAIL: {self.reason}" if self.reason else "FAIL"]
        lines += [f"  {d}" for d in self.diffs]
        return "\n".join(lines)


def verify_goal(outcome, goal, staged: dict) -> Report:
    if isinstance(outcome, Budget):
        return Report(False, reason=f"budget-exhausted after {outcome.steps} steps")
    if isinstance(outcome, Fault):
        return Report(False, reason=str(outcome))
    st = outcome.state
    diffs = []
    if st.regs[Reg.RAX] != goal.number:
        diffs.append(f"rax = {st.regs[Reg.RAX]:#x}, expected {goal.number:#x}")
    for i, arg in enumerate(goal.args):
        reg = SYSCALL_ARG_REGS[i]
        got = st.regs[reg]
        if arg.data is None:
            if got != arg.value:
                diffs.append(f"{reg} = {got:#x}, expected {arg.value:#x}")
            continue
        want_addr = staged[i]
        if got != want_addr:
            diffs.append(f"{reg} = {got:#x}, expected staged pointer {want_addr:#x}")
        for j, want in enumerate(arg.data):
            try:
                b = st.mem.read_byte(want_addr + j)
            except _Fault:
                b = None
            if b != want:
                shown = "unmapped" if b is None else f"{b:#04x}"
                diffs.append(f"mem[{want_addr + j:#x}] = {shown}, expected {want:#04x}")
    if diffs:
        return Report(False, diffs, "state mismatch at syscall")
    return Report(True)
