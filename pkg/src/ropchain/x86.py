"""Decoder/encoder for the small x86-64 instruction subset that gadgets may use.

Anything outside the subset decodes to ``None`` (opaque).  A gadget
containing an opaque byte is discarded, so the subset has to be closed:
every accepted encoding must be modelled exactly by the semantics and the
emulator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Union


class Reg(IntEnum):
    RAX = 0
    RCX = 1
    RDX = 2
    RBX = 3
    RSP = 4
    RBP = 5
    RSI = 6
    RDI = 7
    R8 = 8
    R9 = 9
    R10 = 10
    R11 = 11
    R12 = 12
    R13 = 13
    R14 = 14
    R15 = 15

    @property
    def name64(self) -> str:
        return self.name.lower()

    @property
    def name32(self) -> str:
        if self >= 8:
            return self.name.lower() + "d"
        return "e" + self.name.lower()[1:]

    def render(self, width: int = 64) -> str:
        return self.name64 if width == 64 else self.name32

    def __repr__(self) -> str:
        return self.name64

    __str__ = __repr__

    @classmethod
    def parse(cls, name: str) -> "Reg":
        return cls[name.strip().upper()]


MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1


class OperandOutOfRange(ValueError):
    pass


# -- ops ---------------------------------------------------------------------


@dataclass(frozen=True)
class Ret:
    def text(self) -> str:
        return "ret"


@dataclass(frozen=True)
class RetImm:
    imm: int

    def text(self) -> str:
        return f"ret {self.imm:#x}"


@dataclass(frozen=True)
class Syscall:
    def text(self) -> str:
        return "syscall"


@dataclass(frozen=True)
class PopReg:
    reg: Reg

    def text(self) -> str:
        return f"pop {self.reg}"


@dataclass(frozen=True)
class PushReg:
    reg: Reg

    def text(self) -> str:
        return f"push {self.reg}"


@dataclass(frozen=True)
class MovRegReg:
    dst: Reg
    src: Reg
    width: int = 64

    def text(self) -> str:
        return f"mov {self.dst.render(self.width)}, {self.src.render(self.width)}"


@dataclass(frozen=True)
class MovRegImm64:
    dst: Reg
    imm: int

    def text(self) -> str:
        return f"mov {self.dst}, {self.imm:#x}"


def _mem_text(base: Reg, disp: int) -> str:
    if disp == 0:
        return f"qword ptr [{base}]"
    sign = "-" if disp < 0 else "+"
    return f"qword ptr [{base} {sign} {abs(disp):#x}]"


@dataclass(frozen=True)
class MovStore:
    base: Reg
    disp: int
    src: Reg

    def text(self) -> str:
        return f"mov {_mem_text(self.base, self.disp)}, {self.src}"


@dataclass(frozen=True)
class MovLoad:
    dst: Reg
    base: Reg
    disp: int

    def text(self) -> str:
        return f"mov {self.dst}, {_mem_text(self.base, self.disp)}"


@dataclass(frozen=True)
class AddRegReg:
    dst: Reg
    src: Reg

    def text(self) -> str:
        return f"add {self.dst}, {self.src}"


@dataclass(frozen=True)
class SubRegReg:
    dst: Reg
    src: Reg

    def text(self) -> str:
        return f"sub {self.dst}, {self.src}"


@dataclass(frozen=True)
class XorRegReg:
    dst: Reg
    src: Reg
    width: int = 64

    def text(self) -> str:
        return f"xor {self.dst.render(self.width)}, {self.src.render(self.width)}"


@dataclass(frozen=True)
class Leave:
    def text(self) -> str:
        return "leave"


@dataclass(frozen=True)
class Nop:
    def text(self) -> str:
        return "nop"


Op = Union[
    Ret, RetImm, Syscall, PopReg, PushReg, MovRegReg, MovRegImm64, MovStore,
    MovLoad, AddRegReg, SubRegReg, XorRegReg, Leave, Nop,
]

TERMINATORS = (Ret, RetImm, Syscall)


def is_terminator(op) -> bool:
    return isinstance(op, TERMINATORS)


@dataclass(frozen=True)
class Instruction:
    vaddr: int
    op: Op
    raw: bytes

    @property
    def len(self) -> int:
        return len(self.raw)

    @property
    def end(self) -> int:
        return self.vaddr + len(self.raw)

    def text(self) -> str:
        return self.op.text()

    def __str__(self) -> str:
        return f"{self.vaddr:#x}: {self.text()}"


@dataclass(frozen=True)
class Opaque:
    """Decode failure at ``offset`` bytes into the input."""
    offset: int


# -- decoding ------------------------------------------------------------------

# Bytes that can begin a subset instruction; everything else is opaque on
# sight.  The scanner uses this table as a cheap prefilter.
FIRST_BYTES = frozenset(
    list(range(0x40, 0x60)) + [0x0F, 0x31, 0x89, 0x90, 0xC2, 0xC3, 0xC9]
)

_MODRM_OPS = (0x89, 0x8B, 0x01, 0x29, 0x31)


def decode_at(buf, pos: int, end: Optional[int] = None):
    """Decode the instruction at ``buf[pos]`` without reading past ``end``.

    Returns ``(op, length)`` or ``None``.  This is the hot path for the
    scanner, so it avoids building Instruction objects.
    """
    if end is None:
        end = len(buf)
    if pos >= end:
        return None
    b = buf[pos]
    p = pos
    rex = 0
    if 0x40 <= b <= 0x4F:
        rex = b
        p += 1
        if p >= end:
            return None
        b = buf[p]
        if rex & 0x02:  # REX.X: no subset form uses an index register
            return None
    else:
        if b == 0xC3:
            return Ret(), 1
        if b == 0x90:
            return Nop(), 1
        if b == 0xC9:
            return Leave(), 1
        if b == 0xC2:
            if pos + 3 > end:
                return None
            return RetImm(buf[pos + 1] | (buf[pos + 2] << 8)), 3
        if b == 0x0F:
            if pos + 2 <= end and buf[pos + 1] == 0x05:
                return Syscall(), 2
            return None

    if 0x50 <= b <= 0x5F:
        if rex not in (0, 0x41):
            return None
        r = Reg((b & 7) | (8 if rex else 0))
        length = p - pos + 1
        return (PopReg(r) if b >= 0x58 else PushReg(r)), length

    w = rex & 0x08
    if 0xB8 <= b <= 0xBF:
        if rex not in (0x48, 0x49):
            return None
        if p + 9 > end:
            return None
        imm = int.from_bytes(buf[p + 1:p + 9], "little")
        return MovRegImm64(Reg((b & 7) | ((rex & 1) << 3)), imm), p + 9 - pos

    if b not in _MODRM_OPS:
        return None
    if p + 2 > end:
        return None
    modrm = buf[p + 1]
    mod = modrm >> 6
    reg = Reg(((modrm >> 3) & 7) | ((rex & 4) << 1))
    rm_low = modrm & 7
    rm = Reg(rm_low | ((rex & 1) << 3))
    if mod == 3:
        n = p + 2 - pos
        if w:
            if b == 0x89:
                return MovRegReg(rm, reg), n
            if b == 0x8B:
                return MovRegReg(reg, rm), n
            if b == 0x01:
                return AddRegReg(rm, reg), n
            if b == 0x29:
                return SubRegReg(rm, reg), n
            return XorRegReg(rm, reg), n
        if b == 0x89:
            return MovRegReg(rm, reg, 32), n
        if b == 0x31:
            return XorRegReg(rm, reg, 32), n
        return None

    # memory operand: [base], [base + disp8], [base + disp32]
    if not w or b not in (0x89, 0x8B):
        return None
    if rm_low == 4 or (mod == 0 and rm_low == 5):
        return None
    q = p + 2
    if mod == 0:
        disp = 0
    elif mod == 1:
        if q + 1 > end:
            return None
        disp = buf[q] - 256 if buf[q] & 0x80 else buf[q]
        q += 1
    else:
        if q + 4 > end:
            return None
        disp = int.from_bytes(buf[q:q + 4], "little", signed=True)
        q += 4
    if b == 0x89:
        return MovStore(rm, disp, reg), q - pos
    return MovLoad(reg, rm, disp), q - pos


def decode_one(data: bytes, vaddr: int = 0) -> Union[Instruction, Opaque]:
    res = decode_at(data, 0)
    if res is None:
        return Opaque(0)
    op, n = res
    return Instruction(vaddr, op, bytes(data[:n]))


def decode_run(data: bytes, vaddr: int = 0) -> Union[list, Opaque]:
    """Decode ``data`` completely, or report where decoding got stuck."""
    out = []
    pos = 0
    n = len(data)
    while pos < n:
        res = decode_at(data, pos, n)
        if res is None:
            return Opaque(pos)
        op, length = res
        out.append(Instruction(vaddr + pos, op, bytes(data[pos:pos + length])))
        pos += length
    return out


# -- encoding ------------------------------------------------------------------


def _rex(w: bool, r: int, b: int) -> int:
    return 0x40 | (8 if w else 0) | ((r >> 3) << 2) | (b >> 3)


def _modrm_rr(opcode: int, dst: Reg, src: Reg, wide: bool) -> bytes:
    modrm = 0xC0 | ((src & 7) << 3) | (dst & 7)
    rex = _rex(wide, src, dst)
    if rex == 0x40:
        return bytes([opcode, modrm])
    return bytes([rex, opcode, modrm])


def _modrm_mem(opcode: int, reg: Reg, base: Reg, disp: int) -> bytes:
    if base & 7 == 4:
        raise OperandOutOfRange(f"{base} as base needs a SIB byte")
    if not -(1 << 31) <= disp < (1 << 31):
        raise OperandOutOfRange(f"displacement {disp:#x} does not fit in 32 bits")
    if disp == 0 and base & 7 != 5:
        mod, tail = 0, b""
    elif -128 <= disp < 128:
        mod, tail = 1, struct.pack("<b", disp)
    else:
        mod, tail = 2, struct.pack("<i", disp)
    modrm = (mod << 6) | ((reg & 7) << 3) | (base & 7)
    return bytes([_rex(True, reg, base), opcode, modrm]) + tail


def encode_one(op: Op) -> bytes:
    if isinstance(op, Ret):
        return b"\xc3"
    if isinstance(op, RetImm):
        if not 0 <= op.imm <= 0xFFFF:
            raise OperandOutOfRange(f"ret immediate {op.imm:#x}")
        return b"\xc2" + struct.pack("<H", op.imm)
    if isinstance(op, Syscall):
        return b"\x0f\x05"
    if isinstance(op, Leave):
        return b"\xc9"
    if isinstance(op, Nop):
        return b"\x90"
    if isinstance(op, (PopReg, PushReg)):
        base = 0x58 if isinstance(op, PopReg) else 0x50
        opc = base + (op.reg & 7)
        return bytes([0x41, opc]) if op.reg >= 8 else bytes([opc])
    if isinstance(op, MovRegReg):
        return _modrm_rr(0x89, op.dst, op.src, op.width == 64)
    if isinstance(op, XorRegReg):
        return _modrm_rr(0x31, op.dst, op.src, op.width == 64)
    if isinstance(op, AddRegReg):
        return _modrm_rr(0x01, op.dst, op.src, True)
    if isinstance(op, SubRegReg):
        return _modrm_rr(0x29, op.dst, op.src, True)
    if isinstance(op, MovRegImm64):
        if not 0 <= op.imm <= MASK64:
            raise OperandOutOfRange(f"immediate {op.imm:#x}")
        return bytes([0x48 | (op.dst >> 3), 0xB8 + (op.dst & 7)]) + struct.pack("<Q", op.imm)
    if isinstance(op, MovStore):
        return _modrm_mem(0x89, op.src, op.base, op.disp)
    if isinstance(op, MovLoad):
        return _modrm_mem(0x8B, op.dst, op.base, op.disp)
    raise TypeError(f"not a subset op: {op!r}")


def assemble(ops) -> bytes:
    return b"".join(encode_one(op) for op in ops)
