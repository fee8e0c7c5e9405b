"""Flatten a Chain into stack words and render them for consumers."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

from .x86 import MASK64, RetImm

FORMATS = ("raw", "hex", "json", "script")


class AddressOverflow(ValueError):
    pass


class PayloadFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Role:
    kind: str          # "gadget" | "immediate" | "padding"
    detail: str = ""

    def __str__(self):
        return f"{self.kind} {self.detail}".strip()


@dataclass(frozen=True)
class Payload:
    words: tuple
    roles: tuple
    base_offset: int = 0

    def __len__(self):
        return len(self.words)

    @property
    def raw(self) -> bytes:
        return b"".join(struct.pack("<Q", w) for w in self.words)


def _role_for(note: str) -> Role:
    if note == "padding":
        return Role("padding")
    kind, _, detail = note.partition(" ")
    return Role(kind, detail)


def layout(chain, base_offset: int = 0) -> Payload:
    words, roles = [], []
    prev = None
    for step in chain.steps:
        addr = step.gadget.vaddr + base_offset
        if addr > MASK64:
            raise AddressOverflow(f"{step.gadget.vaddr:#x} + {base_offset:#x} wraps 64 bits")
        words.append(addr)
        roles.append(Role("gadget", f"{step.gadget.vaddr:#x} {step.gadget.text}"))
        if prev is not None and isinstance(prev.effect.terminator, RetImm):
            # ret imm16 of the previous gadget skips these after popping our address
            for _ in range(prev.effect.terminator.imm // 8):
                words.append(chain.filler)
                roles.append(Role("padding", "ret-imm"))
        for w, note in zip(step.stack_words, step.annotations):
            words.append(w)
            roles.append(_role_for(note))
        prev = step
    return Payload(tuple(words), tuple(roles), base_offset)


def check_bad_bytes(payload: Payload, bad_bytes) -> list:
    """(word index, byte offset, value) for every forbidden byte; [] means ok."""
    bad = frozenset(bad_bytes)
    if not bad:
        return []
    hits = []
    for i, w in enumerate(payload.words):
        for j, b in enumerate(struct.pack("<Q", w)):
            if b in bad:
                hits.append((i, j, b))
    return hits


def render(payload: Payload, fmt: str = "raw") -> bytes:
    if fmt == "raw":
        return payload.raw
    if fmt == "hex":
        return "".join(f"{w:016x}\n" for w in payload.words).encode()
    if fmt == "json":
        doc = {
            "words": [str(w) for w in payload.words],
            "roles": [{"kind": r.kind, "detail": r.detail} for r in payload.roles],
            "base_offset": str(payload.base_offset),
        }
        return (json.dumps(doc, indent=2) + "\n").encode()
    if fmt == "script":
        return _script(payload).encode()
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def _script(payload: Payload) -> str:
    lines = [
        "#!/usr/bin/env python3",
        "# ROP payload stub.",
        "# Word 0 overwrites the saved return address.  Prepend whatever",
        "# buffer padding the target needs before it; that part is not generated.",
        f"# load base offset applied to gadget addresses: {payload.base_offset:#x}",
        "import struct",
        "",
        'payload = b""',
    ]
    for i, (w, role) in enumerate(zip(payload.words, payload.roles)):
        lines.append(f'payload += struct.pack("<Q", {w:#018x})  # [{i}] {role}')
    lines += [
        "",
        'if __name__ == "__main__":',
        "    import sys",
        "    sys.stdout.buffer.write(payload)",
        "",
    ]
    return "\n".join(lines)


# -- parsing back ----------------------------------------------------------------


def parse_json(text) -> Payload:
    doc = json.loads(text)
    try:
        words = tuple(int(w) for w in doc["words"])
        roles = tuple(Role(r["kind"], r.get("detail", "")) for r in doc["roles"])
        base = int(doc["base_offset"])
    except (KeyError, TypeError, ValueError) as exc:
        raise PayloadFormatError(f"bad payload json: {exc}") from exc
    return Payload(words, roles, base)


def words_from_raw(data: bytes) -> list:
    if len(data) % 8:
        raise PayloadFormatError(f"raw payload length {len(data)} is not a multiple of 8")
    return [w for (w,) in struct.iter_unpack("<Q", data)]


def words_from_hex(text: str) -> list:
    words = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if len(line) > 16:
            raise PayloadFormatError(f"line {lineno}: more than 16 hex digits")
        try:
            words.append(int(line, 16))
        except ValueError as exc:
            raise PayloadFormatError(f"line {lineno}: {exc}") from exc
    return words


_HEX_CHARS = frozenset(b"0123456789abcdefABCDEF\r\n \t")


def words_from_file(data: bytes) -> list:
    """Auto-detect: a file made only of hex digits and whitespace is hex."""
    if data and all(b in _HEX_CHARS for b in data):
        return words_from_hex(data.decode("ascii"))
    return words_from_raw(data)


def pack_words(words) -> bytes:
    return b"".join(struct.pack("<Q", w & MASK64) for w in words)
