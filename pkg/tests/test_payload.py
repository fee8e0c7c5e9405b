import json
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import image_of
from ropchain.compiler import Catalog, Chain, make_step, syscall_step
from ropchain.payload import (
    AddressOverflow, Payload, PayloadFormatError, Role, check_bad_bytes, layout, pack_words,
    parse_json, render, words_from_file, words_from_hex, words_from_raw,
)

U64 = st.integers(0, (1 << 64) - 1)


def two_step_chain():
    # pop rdi; ret at 0x1000 and syscall at 0x2000
    code = bytearray(b"\xcc" * 0x1010)
    code[0:2] = b"\x5f\xc3"
    code[0x1000:0x1002] = b"\x0f\x05"
    cat = Catalog.from_image(image_of(bytes(code), 0x1000))
    pop = next(e for e in cat if e.vaddr == 0x1000)
    sc = next(e for e in cat if e.vaddr == 0x2000)
    return Chain((make_step(pop, {0: (0x2A, "immediate rdi")}, 0x4141414141414141),
                  syscall_step(sc)))


def test_layout_examples():
    chain = two_step_chain()
    assert layout(chain, 0).words == (0x1000, 0x2A, 0x2000)
    p = layout(chain, 0x555555554000)
    assert p.words == (0x555555555000, 0x2A, 0x555555556000)
    assert [r.kind for r in p.roles] == ["gadget", "immediate", "gadget"]
    assert p.roles[1].detail == "rdi"
    assert len(p.words) == sum(1 + len(s.stack_words) for s in chain.steps)


def test_layout_empty_and_overflow():
    assert layout(Chain(()), 0).words == ()
    with pytest.raises(AddressOverflow):
        layout(two_step_chain(), (1 << 64) - 0x1000)


def test_render_raw_and_hex():
    p = Payload((0x1000,), (Role("gadget"),))
    assert render(p, "raw") == bytes.fromhex("0010000000000000")
    assert render(p, "hex") == b"0000000000001000\n"


def test_render_json_round_trip():
    p = layout(two_step_chain(), 0x10)
    doc = json.loads(render(p, "json"))
    assert set(doc) == {"words", "roles", "base_offset"}
    assert all(isinstance(w, str) for w in doc["words"])
    assert parse_json(render(p, "json")) == p


def test_render_script_annotates_each_word():
    p = layout(two_step_chain(), 0)
    text = render(p, "script").decode()
    assert text.count("struct.pack") == len(p.words)
    assert "immediate rdi" in text
    ns = {}
    exec(compile(text.replace('if __name__ == "__main__":', "if False:"), "stub", "exec"), ns)
    assert ns["payload"] == p.raw


def test_render_unknown_format():
    with pytest.raises(ValueError):
        render(Payload((), ()), "elf")


def test_check_bad_bytes_examples():
    p = Payload((0x1000,), (Role("gadget"),))
    hits = check_bad_bytes(p, {0x00})
    assert hits == [(0, j, 0) for j in (0, 2, 3, 4, 5, 6, 7)]
    assert check_bad_bytes(Payload((0x0101010101010101,), (Role("immediate"),)), {0}) == []
    assert check_bad_bytes(Payload((), ()), {0}) == []


@given(st.lists(U64, max_size=40))
def test_raw_and_hex_parse_back(words):
    p = Payload(tuple(words), tuple(Role("immediate") for _ in words))
    raw = render(p, "raw")
    assert len(raw) == 8 * len(words)
    assert words_from_raw(raw) == words
    assert words_from_hex(render(p, "hex").decode()) == words
    assert words_from_file(render(p, "hex")) == words
    assert pack_words(words) == raw


@given(st.lists(U64, max_size=10), U64)
def test_json_lossless(words, base):
    p = Payload(tuple(words), tuple(Role("immediate", str(i)) for i in range(len(words))), base)
    assert parse_json(render(p, "json")) == p


@given(st.lists(U64, max_size=10), st.sets(st.integers(0, 255)))
def test_bad_byte_scan_matches_bytes(words, bad):
    p = Payload(tuple(words), tuple(Role("immediate") for _ in words))
    raw = p.raw
    expect = [(i // 8, i % 8, b) for i, b in enumerate(raw) if b in bad]
    assert check_bad_bytes(p, bad) == expect


def test_malformed_inputs():
    with pytest.raises(PayloadFormatError):
        words_from_raw(b"\x00" * 7)
    with pytest.raises(PayloadFormatError):
        words_from_hex("00000000000000001\n")
    with pytest.raises(PayloadFormatError):
        parse_json('{"words": ["1"]}')
    # binary that is not all hex digits is treated as raw
    assert words_from_file(struct.pack("<Q", 0xDEAD)) == [0xDEAD]
