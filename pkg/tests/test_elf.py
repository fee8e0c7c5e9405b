import os
import shutil
import struct
import subprocess

import pytest

from ropchain.elf import (
    PF_R, PF_W, PF_X, BadMagic, NoExecutableSegment, NotLittleEndian, Not64Bit, SegmentSpec,
    Truncated, WrongMachine, build_elf, executable_regions, load_elf, writable_regions,
)
from ropchain.fixtures import minimal_elf


def one_rx(code=b"\x5f\xc3" + b"\x90" * 14, **kw):
    return build_elf([SegmentSpec(0x400000, code, PF_R | PF_X)], entry=0x400000, **kw)


def test_minimal_rx_segment():
    img = load_elf(one_rx())
    assert len(img.segments) == 1
    seg = img.segments[0]
    assert seg.executable and seg.readable and not seg.writable
    assert img.entry_point == 0x400000


def test_class_byte_rejected():
    raw = bytearray(one_rx())
    raw[4] = 1
    with pytest.raises(Not64Bit):
        load_elf(bytes(raw))


def test_empty_is_truncated():
    with pytest.raises(Truncated):
        load_elf(b"")


def test_header_errors():
    with pytest.raises(BadMagic):
        load_elf(b"MZ\x90\x00" + b"\0" * 100)
    with pytest.raises(NotLittleEndian):
        load_elf(one_rx(data_enc=2))
    with pytest.raises(WrongMachine):
        load_elf(one_rx(machine=0x03))
    with pytest.raises(Truncated):
        load_elf(one_rx()[:40])


def test_segment_past_eof_truncated():
    raw = one_rx()
    with pytest.raises(Truncated):
        load_elf(raw[:-4])


def test_no_exec_segment():
    raw = build_elf([SegmentSpec(0x600000, b"\0" * 8, PF_R | PF_W)])
    with pytest.raises(NoExecutableSegment):
        load_elf(raw)


def test_non_load_headers_ignored():
    raw = bytearray(build_elf([SegmentSpec(0x400000, b"\xc3", PF_R | PF_X),
                               SegmentSpec(0x600000, b"\0", PF_R | PF_W)]))
    # turn the second program header into PT_NOTE
    struct.pack_into("<I", raw, 64 + 56, 4)
    img = load_elf(bytes(raw))
    assert [s.vaddr for s in img.segments] == [0x400000]


def test_executable_regions_projection_and_order():
    raw = build_elf([
        SegmentSpec(0x401000, b"\xc3" * 4, PF_R | PF_X),
        SegmentSpec(0x600000, b"\0" * 8, PF_R | PF_W, 0x1000),
        SegmentSpec(0x400000, b"\x90" * 16, PF_R | PF_X, 0x2000),
    ])
    img = load_elf(raw)
    regions = executable_regions(img)
    assert [(v, len(d)) for v, d in regions] == [(0x400000, 16), (0x401000, 4)]
    for seg in img.segments:
        if seg.executable:
            assert dict(regions)[seg.vaddr] == img.raw[seg.file_offset:seg.file_offset + seg.file_size]
    assert writable_regions(img) == [(0x600000, 0x1000)]


def test_writable_regions_empty_and_memsize():
    assert writable_regions(load_elf(one_rx())) == []
    img = load_elf(build_elf([SegmentSpec(0x400000, b"\xc3"),
                              SegmentSpec(0x600000, b"\0" * 8, PF_R | PF_W, 0x100)]))
    assert writable_regions(img) == [(0x600000, 0x100)]


def test_round_trip_fields():
    specs = [SegmentSpec(0x400000, b"\xc3" * 33, PF_R | PF_X),
             SegmentSpec(0x7000123, b"abc", PF_R | PF_W, 0x500)]
    img = load_elf(build_elf(specs, entry=0x400010))
    assert img.entry_point == 0x400010
    for spec, seg in zip(specs, img.segments):
        assert seg.vaddr == spec.vaddr
        assert seg.flags == spec.flags
        assert seg.file_size == len(spec.data)
        assert seg.mem_size == (spec.mem_size or len(spec.data))
        assert img.segment_bytes(seg) == spec.data


def test_deterministic():
    assert load_elf(minimal_elf()) == load_elf(minimal_elf())


@pytest.mark.skipif(not os.path.exists("/bin/ls"), reason="no /bin/ls")
def test_real_binary_loads():
    with open("/bin/ls", "rb") as f:
        img = load_elf(f.read())
    assert executable_regions(img)


@pytest.mark.skipif(shutil.which("readelf") is None, reason="readelf not installed")
def test_fixture_agrees_with_readelf(tmp_path):
    path = tmp_path / "fixture"
    path.write_bytes(minimal_elf())
    proc = subprocess.run(["readelf", "-W", "-h", "-l", str(path)],
                          capture_output=True, text=True, check=True)
    assert "Warning" not in proc.stderr and "Error" not in proc.stderr
    assert "ELF64" in proc.stdout and "Advanced Micro Devices X86-64" in proc.stdout
    loads = [ln.split() for ln in proc.stdout.splitlines() if ln.strip().startswith("LOAD")]
    img = load_elf(minimal_elf())
    assert len(loads) == len(img.segments)
    for cols, seg in zip(loads, img.segments):
        assert int(cols[1], 16) == seg.file_offset
        assert int(cols[2], 16) == seg.vaddr
        assert int(cols[4], 16) == seg.file_size
        assert int(cols[5], 16) == seg.mem_size
