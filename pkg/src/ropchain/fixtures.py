"""Synthetic ELF binaries with known gadget content.

These are small, section-less executables assembled from the decoder's own
encoder.  Gadgets are separated by int3 bytes (opaque to the decoder), so no
gadget can span two snippets.
"""

from __future__ import annotations

import random

from .elf import PF_R, PF_W, PF_X, SegmentSpec, build_elf
from .x86 import (
    AddRegReg, Leave, MovLoad, MovRegImm64, MovRegReg, MovStore, Nop, PopReg, PushReg, Reg,
    Ret, RetImm, SubRegReg, Syscall, XorRegReg, assemble,
)

R = Reg
INT3 = 0xCC

MINIMAL_CODE_VADDR = 0x401000
MINIMAL_DATA_VADDR = 0x404000

# Code and data addresses for the rich fixture avoid 0x00 and 0x0a in every
# byte, so payloads can be built under those bad-byte sets.
RICH_CODE_VADDR = 0x4141414141411000
RICH_ZOO_VADDR = 0x4141414141450000
RICH_DATA_VADDR = 0x4242424242420000

MINIMAL_GADGETS = [
    [PopReg(R.RAX), Ret()],
    [PopReg(R.RDI), Ret()],
    [PopReg(R.RSI), Ret()],
    [PopReg(R.RDX), Ret()],
    [PopReg(R.R10), Ret()],
    [MovStore(R.RDI, 0, R.RSI), Ret()],
    [XorRegReg(R.RSI, R.RSI), Ret()],
    [Syscall()],
]

RICH_GADGETS = MINIMAL_GADGETS + [
    [PopReg(R.R8), Ret()],
    [PopReg(R.R9), Ret()],
    [PopReg(R.RCX), Ret()],
    [PopReg(R.RBX), Ret()],
    [PopReg(R.RSI), PopReg(R.R15), Ret()],
    [PopReg(R.RBX), PopReg(R.RBP), PopReg(R.R12), Ret()],
    [PopReg(R.R8), RetImm(8)],
    [MovRegReg(R.RAX, R.RBX), Ret()],
    [MovRegReg(R.RDX, R.RCX), Ret()],
    [MovRegReg(R.R10, R.RCX), Ret()],
    [MovRegReg(R.R9, R.RBX), Ret()],
    [MovRegReg(R.RAX, R.RCX, 32), Ret()],
    [PushReg(R.RSI), PopReg(R.RDI), Ret()],
    [XorRegReg(R.RAX, R.RAX), Ret()],
    [XorRegReg(R.RAX, R.RAX, 32), Ret()],
    [XorRegReg(R.RDX, R.RDX, 32), Ret()],
    [XorRegReg(R.RAX, R.RCX), Ret()],
    [XorRegReg(R.RDI, R.RCX), Ret()],
    [XorRegReg(R.RSI, R.RCX), Ret()],
    [XorRegReg(R.RDX, R.RBX), Ret()],
    [XorRegReg(R.R10, R.RCX), Ret()],
    [XorRegReg(R.R8, R.RCX), Ret()],
    [XorRegReg(R.R9, R.RBX), Ret()],
    [AddRegReg(R.RAX, R.RCX), Ret()],
    [SubRegReg(R.RAX, R.RCX), Ret()],
    [AddRegReg(R.RDI, R.RBX), Nop(), Ret()],
    [MovStore(R.RDX, 8, R.RAX), Ret()],
    [MovStore(R.RCX, -0x10, R.RBX), PopReg(R.RBP), Ret()],
    [MovLoad(R.RAX, R.RDI, 0), Ret()],
    [MovLoad(R.RBX, R.RSI, 0x40), Ret()],
    [MovRegImm64(R.RAX, 0x3B), Ret()],
    [Leave(), Ret()],
    [PopReg(R.RSP), Ret()],
    [PushReg(R.RAX), Ret()],
    [MovRegReg(R.RBP, R.RSP), PopReg(R.RDI), Leave(), Ret()],
    [Nop(), Ret()],
    [PopReg(R.RAX), Syscall()],
]


def _clean_addr(addr: int, bad) -> bool:
    return not any(b in bad for b in addr.to_bytes(8, "little"))


def layout_snippets(snippets, vaddr: int, bad=frozenset()) -> tuple:
    """Concatenate encoded snippets separated by int3, keeping every snippet
    byte at an address free of ``bad``.  Returns (code bytes, start vaddrs)."""
    code = bytearray([INT3])
    starts = []
    for snip in snippets:
        enc = snip if isinstance(snip, bytes) else assemble(snip)
        while not all(_clean_addr(vaddr + len(code) + i, bad) for i in range(len(enc))):
            code.append(INT3)
        starts.append(vaddr + len(code))
        code += enc
        code.append(INT3)
    return bytes(code), starts


def minimal_elf(with_syscall: bool = True) -> bytes:
    """The 8-gadget catalog: pop rax/rdi/rsi/rdx/r10, mov [rdi],rsi,
    xor rsi,rsi and syscall."""
    snippets = MINIMAL_GADGETS if with_syscall else MINIMAL_GADGETS[:-1]
    code, _ = layout_snippets(snippets, MINIMAL_CODE_VADDR)
    return build_elf([
        SegmentSpec(MINIMAL_CODE_VADDR, code, PF_R | PF_X),
        SegmentSpec(MINIMAL_DATA_VADDR, b"\0" * 0x10, PF_R | PF_W, 0x1000),
    ], entry=MINIMAL_CODE_VADDR)


def random_subset_ops(rng: random.Random, n: int) -> list:
    """Random encodable subset ops (operands in range, no SIB bases)."""
    regs = list(Reg)
    bases = [r for r in regs if r & 7 != 4]
    out = []
    for _ in range(n):
        k = rng.randrange(14)
        a, b = rng.choice(regs), rng.choice(regs)
        if k == 0:
            out.append(Ret())
        elif k == 1:
            out.append(RetImm(rng.choice([0, 8, 16, rng.randrange(0x10000)])))
        elif k == 2:
            out.append(Syscall())
        elif k == 3:
            out.append(PopReg(a))
        elif k == 4:
            out.append(PushReg(a))
        elif k == 5:
            out.append(MovRegReg(a, b, rng.choice([32, 64])))
        elif k == 6:
            out.append(MovRegImm64(a, rng.getrandbits(64)))
        elif k == 7:
            out.append(MovStore(rng.choice(bases), _rand_disp(rng), b))
        elif k == 8:
            out.append(MovLoad(a, rng.choice(bases), _rand_disp(rng)))
        elif k == 9:
            out.append(AddRegReg(a, b))
        elif k == 10:
            out.append(SubRegReg(a, b))
        elif k == 11:
            out.append(XorRegReg(a, b, rng.choice([32, 64])))
        elif k == 12:
            out.append(Leave())
        else:
            out.append(Nop())
    return out


def _rand_disp(rng):
    return rng.choice([0, rng.randrange(-128, 128), rng.randrange(-(1 << 31), 1 << 31)])


def zoo_code(seed: int = 7, nsnippets: int = 120) -> bytes:
    """Random short instruction runs, each ending in a terminator."""
    rng = random.Random(seed)
    snippets = []
    for _ in range(nsnippets):
        body = [op for op in random_subset_ops(rng, rng.randrange(1, 5))
                if not isinstance(op, (Ret, RetImm, Syscall))]
        snippets.append(body + [rng.choice([Ret(), Ret(), Ret(), RetImm(8), Syscall()])])
    code, _ = layout_snippets(snippets, RICH_ZOO_VADDR)
    return code


def rich_elf(bad=frozenset({0x00, 0x0A}), zoo: bool = True) -> bytes:
    code, _ = layout_snippets(RICH_GADGETS, RICH_CODE_VADDR, bad)
    specs = [SegmentSpec(RICH_CODE_VADDR, code, PF_R | PF_X)]
    if zoo:
        specs.append(SegmentSpec(RICH_ZOO_VADDR, zoo_code(), PF_R | PF_X))
    specs.append(SegmentSpec(RICH_DATA_VADDR, b"\0" * 0x20, PF_R | PF_W, 0x1000))
    return build_elf(specs, entry=RICH_CODE_VADDR)


def no_write_elf() -> bytes:
    """pop gadgets and syscall but no write-what-where primitive."""
    snippets = [g for g in MINIMAL_GADGETS if not isinstance(g[0], MovStore)]
    code, _ = layout_snippets(snippets, MINIMAL_CODE_VADDR)
    return build_elf([
        SegmentSpec(MINIMAL_CODE_VADDR, code, PF_R | PF_X),
        SegmentSpec(MINIMAL_DATA_VADDR, b"\0" * 0x10, PF_R | PF_W, 0x1000),
    ], entry=MINIMAL_CODE_VADDR)
