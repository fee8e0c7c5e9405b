"""Minimal ELF64 (little-endian, x86-64) reader built on PT_LOAD segments.

Section headers are never consulted, so stripped binaries load the same as
unstripped ones.  ``build_elf`` is the inverse used for synthetic fixtures.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

ELF_MAGIC = b"\x7fELF"
ELFCLASS64 = 2
ELFDATA2LSB = 1
EM_X86_64 = 0x3E
PT_LOAD = 1

PF_X = 1
PF_W = 2
PF_R = 4

_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")
EHDR_SIZE = _EHDR.size  # 64
PHDR_SIZE = _PHDR.size  # 56


class ElfError(Exception):
    """Base class; ``str(type(exc).__name__)`` is the stable error token."""


class BadMagic(ElfError):
    pass


class Not64Bit(ElfError):
    pass


class NotLittleEndian(ElfError):
    pass


class WrongMachine(ElfError):
    pass


class Truncated(ElfError):
    pass


class BadSegment(ElfError):
    pass


class NoExecutableSegment(ElfError):
    pass


@dataclass(frozen=True)
class Segment:
    vaddr: int
    file_offset: int
    file_size: int
    mem_size: int
    flags: int

    @property
    def readable(self) -> bool:
        return bool(self.flags & PF_R)

    @property
    def writable(self) -> bool:
        return bool(self.flags & PF_W)

    @property
    def executable(self) -> bool:
        return bool(self.flags & PF_X)

    @property
    def perms(self) -> str:
        return ("r" if self.readable else "-") + ("w" if self.writable else "-") + (
            "x" if self.executable else "-")

    def contains(self, addr: int) -> bool:
        return self.vaddr <= addr < self.vaddr + self.mem_size


@dataclass(frozen=True)
class Elf64Image:
    entry_point: int
    segments: tuple
    raw: bytes = field(repr=False)

    def segment_bytes(self, seg: Segment) -> bytes:
        return self.raw[seg.file_offset:seg.file_offset + seg.file_size]


def load_elf(data: bytes) -> Elf64Image:
    data = bytes(data)
    if len(data) < 4:
        raise Truncated(f"file is {len(data)} bytes, too short for an ELF header")
    if data[:4] != ELF_MAGIC:
        raise BadMagic(f"bad magic {data[:4].hex()}")
    if len(data) < EHDR_SIZE:
        raise Truncated(f"ELF header needs {EHDR_SIZE} bytes, file has {len(data)}")

    (ident, _e_type, machine, _version, entry, phoff, _shoff, _flags, _ehsize,
     phentsize, phnum, _shentsize, _shnum, _shstrndx) = _EHDR.unpack_from(data)
    if ident[4] != ELFCLASS64:
        raise Not64Bit(f"EI_CLASS={ident[4]}")
    if ident[5] != ELFDATA2LSB:
        raise NotLittleEndian(f"EI_DATA={ident[5]}")
    if machine != EM_X86_64:
        raise WrongMachine(f"e_machine={machine:#x}")
    if phnum and phentsize != PHDR_SIZE:
        raise BadSegment(f"e_phentsize={phentsize}, expected {PHDR_SIZE}")
    if phoff + phnum * PHDR_SIZE > len(data):
        raise Truncated("program header table runs past end of file")

    segments = []
    for i in range(phnum):
        (p_type, p_flags, p_offset, p_vaddr, _paddr, p_filesz, p_memsz,
         _align) = _PHDR.unpack_from(data, phoff + i * PHDR_SIZE)
        if p_type != PT_LOAD:
            continue
        if p_offset + p_filesz > len(data):
            raise Truncated(f"segment {i} file range runs past end of file")
        if p_memsz < p_filesz:
            raise BadSegment(f"segment {i}: p_memsz < p_filesz")
        if p_vaddr + p_memsz > 1 << 64:
            raise BadSegment(f"segment {i}: vaddr + memsz overflows")
        segments.append(Segment(p_vaddr, p_offset, p_filesz, p_memsz, p_flags))

    if not any(s.executable for s in segments):
        raise NoExecutableSegment("no PT_LOAD segment has execute permission")
    return Elf64Image(entry, tuple(segments), data)


def read_elf(path) -> Elf64Image:
    with open(path, "rb") as f:
        return load_elf(f.read())


def executable_regions(image: Elf64Image) -> list:
    """(vaddr, bytes) per executable segment, file-backed bytes only."""
    return sorted(
        ((s.vaddr, image.segment_bytes(s)) for s in image.segments if s.executable),
        key=lambda r: r[0],
    )


def writable_regions(image: Elf64Image) -> list:
    return sorted((s.vaddr, s.mem_size) for s in image.segments if s.writable)


# -- fixture emitter -----------------------------------------------------------


@dataclass
class SegmentSpec:
    vaddr: int
    data: bytes
    flags: int = PF_R | PF_X
    mem_size: int = 0  # 0 means len(data)


def build_elf(specs: Iterable[SegmentSpec], entry: int = 0, machine: int = EM_X86_64,
              elf_class: int = ELFCLASS64, data_enc: int = ELFDATA2LSB) -> bytes:
    """Emit a section-less ELF64 executable holding the given PT_LOAD segments."""
    specs = list(specs)
    phoff = EHDR_SIZE
    offset = phoff + PHDR_SIZE * len(specs)
    phdrs = []
    body = b""
    for spec in specs:
        # keep file offset congruent to vaddr mod page size, like a real linker
        pad = (spec.vaddr - offset) % 0x1000
        body += b"\0" * pad
        offset += pad
        mem_size = spec.mem_size or len(spec.data)
        phdrs.append(_PHDR.pack(PT_LOAD, spec.flags, offset, spec.vaddr, spec.vaddr,
                                len(spec.data), mem_size, 0x1000))
        body += spec.data
        offset += len(spec.data)

    ident = ELF_MAGIC + bytes([elf_class, data_enc, 1, 0]) + b"\0" * 8
    ehdr = _EHDR.pack(ident, 2, machine, 1, entry, phoff, 0, 0, EHDR_SIZE,
                      PHDR_SIZE, len(specs), 0, 0, 0)
    return ehdr + b"".join(phdrs) + body
