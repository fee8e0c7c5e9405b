import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_goal, verify_chain
from ropchain.compiler import (
    Arg, Catalog, Chain, ChainTooLong, Constraints, CyclicClobber, ImmediateUnencodable,
    NoSyscallGadget, NoWritableRegion, NoWritePrimitive, Plan, RegisterUnreachable,
    SyscallGoal, compile_chain, encode_immediate, order_assignments, plan_data_writes,
    simulate, syscall_step,
)
from ropchain.elf import PF_R, PF_W, PF_X, SegmentSpec, build_elf, load_elf
from ropchain.fixtures import MINIMAL_DATA_VADDR, layout_snippets, no_write_elf
from ropchain.payload import check_bad_bytes, layout
from ropchain.semantics import LoadConst, ZeroReg
from ropchain.x86 import MovStore, PopReg, Reg, Ret, RetImm, Syscall

R = Reg
EXECVE = SyscallGoal(59, (Arg.ptr(b"/bin/sh\0"), Arg.imm(0), Arg.imm(0)))
BINSH = bytes.fromhex("2f62696e2f736800")


def image_with(snippets, vaddr=0x401000, data=True):
    code, _ = layout_snippets(snippets, vaddr)
    specs = [SegmentSpec(vaddr, code, PF_R | PF_X)]
    if data:
        specs.append(SegmentSpec(0x404000, b"\0" * 16, PF_R | PF_W, 0x1000))
    return load_elf(build_elf(specs, entry=vaddr))


@pytest.fixture(scope="module")
def minimal_catalog(minimal_image):
    return Catalog.from_image(minimal_image)


@pytest.fixture(scope="module")
def rich_catalog(rich_image):
    return Catalog.from_image(rich_image)


# -- order_assignments --------------------------------------------------------------


def plan(reg, clobbers=()):
    return Plan(reg, 0, (), frozenset(clobbers), "direct")


def test_order_disjoint_uses_index_order():
    got = order_assignments({R.RDI: [plan(R.RDI)], R.RAX: [plan(R.RAX)]})
    assert [p.reg for p in got] == [R.RAX, R.RDI]


def test_order_forced():
    got = order_assignments({R.RDI: [plan(R.RDI, {R.RAX})], R.RAX: [plan(R.RAX)]})
    assert [p.reg for p in got] == [R.RDI, R.RAX]


def test_order_cycle():
    with pytest.raises(CyclicClobber) as ei:
        order_assignments({R.RDI: [plan(R.RDI, {R.RAX})], R.RAX: [plan(R.RAX, {R.RDI})]})
    assert ei.value.token == "CyclicClobber"


def test_order_falls_back_to_alternative_plan():
    alt = plan(R.RAX)
    got = order_assignments({R.RAX: [plan(R.RAX, {R.RDI}), alt], R.RDI: [plan(R.RDI, {R.RAX})]})
    assert [p.reg for p in got] == [R.RDI, R.RAX] and got[1] is alt


@settings(max_examples=80, deadline=None)
@given(st.dictionaries(st.sampled_from([R.RAX, R.RDI, R.RSI, R.RDX, R.R10]),
                       st.lists(st.sets(st.sampled_from(list(Reg))), min_size=1, max_size=2),
                       min_size=1, max_size=5))
def test_order_property(clobber_sets):
    needed = {r: [plan(r, c - {r}) for c in cs] for r, cs in clobber_sets.items()}
    try:
        got = order_assignments(needed)
    except CyclicClobber:
        return
    finalized = set()
    for p in got:
        assert not p.clobbers & finalized
        finalized.add(p.reg)
    assert finalized == set(needed)


# -- immediates -------------------------------------------------------------------


def test_immediate_direct_without_bad_bytes(minimal_catalog):
    steps = encode_immediate(59, R.RAX, minimal_catalog, Constraints())
    assert len(steps) == 1 and steps[0].stack_words == (0x3B,)
    assert LoadConst(R.RAX, 0) in steps[0].effect.tags


def test_immediate_zero_prefers_direct_when_legal(rich_catalog):
    steps = encode_immediate(0, R.RAX, rich_catalog, Constraints())
    assert len(steps) == 1 and steps[0].stack_words == (0,)


def test_immediate_zero_via_zero_reg(rich_catalog):
    steps = encode_immediate(0, R.RAX, rich_catalog, Constraints({0x00}))
    assert len(steps) == 1 and ZeroReg(R.RAX) in steps[0].effect.tags


def test_immediate_xor_split(rich_catalog, rich_image):
    cons = Constraints({0x00})
    steps = encode_immediate(59, R.RAX, rich_catalog, cons)
    assert len(steps) == 3
    words = [w for s in steps for w in s.stack_words]
    assert all(cons.clean(w) for w in words)
    assert simulate(steps)[0][R.RAX] == 59
    # and the emulator agrees
    sc = next(e for e in rich_catalog if e.gadget.text == "syscall")
    chain = Chain(tuple(steps) + (syscall_step(sc),))
    report, payload = verify_chain(rich_image, chain, SyscallGoal(59))
    assert report.passed, str(report)
    assert check_bad_bytes(payload, {0x00}) == []


def test_immediate_unencodable(minimal_catalog):
    # every minimal-fixture address contains 00 bytes
    with pytest.raises(ImmediateUnencodable):
        encode_immediate(59, R.RAX, minimal_catalog, Constraints({0x00}))


def test_register_unreachable(minimal_catalog):
    goal = SyscallGoal(1, tuple(Arg.imm(i) for i in range(5)))
    with pytest.raises(RegisterUnreachable) as ei:
        compile_chain(goal, minimal_catalog)
    assert ei.value.token == "RegisterUnreachable"


# -- data staging -------------------------------------------------------------------


def test_plan_data_writes_binsh(minimal_catalog, minimal_image):
    staged, steps = plan_data_writes(EXECVE, minimal_catalog, Constraints())
    assert staged == {0: MINIMAL_DATA_VADDR + 0x100}
    assert len(steps) == 3
    _, writes, _ = simulate(steps)
    assert writes == [(staged[0], int.from_bytes(BINSH, "little"))]


def test_plan_data_writes_override(minimal_catalog):
    staged, _ = plan_data_writes(EXECVE, minimal_catalog, Constraints(data_vaddr=0x404800))
    assert staged == {0: 0x404800}


def test_plan_data_writes_nothing_to_stage(minimal_catalog):
    assert plan_data_writes(SyscallGoal(60, (Arg.imm(0),)), minimal_catalog,
                            Constraints()) == ({}, [])


def test_no_write_primitive():
    cat = Catalog.from_image(load_elf(no_write_elf()))
    with pytest.raises(NoWritePrimitive):
        plan_data_writes(EXECVE, cat, Constraints())


def test_no_writable_region():
    img = image_with([[PopReg(R.RDI), Ret()], [PopReg(R.RSI), Ret()],
                      [MovStore(R.RDI, 0, R.RSI), Ret()], [Syscall()]], data=False)
    cat = Catalog.from_image(img)
    with pytest.raises(NoWritableRegion):
        plan_data_writes(EXECVE, cat, Constraints())
    staged, _ = plan_data_writes(EXECVE, cat, Constraints(data_vaddr=0x5000))
    assert staged == {0: 0x5000}


# -- whole chains -------------------------------------------------------------------


def test_execve_minimal(minimal_catalog, minimal_image):
    chain = compile_chain(EXECVE, minimal_catalog)
    assert isinstance(chain.final.gadget.terminator, Syscall) and chain.final.stack_words == ()
    for st_ in chain.steps:
        imm = st_.effect.terminator.imm if isinstance(st_.effect.terminator, RetImm) else 0
        if st_ is not chain.final:
            assert 8 * len(st_.stack_words) == st_.effect.stack_delta - 8 - imm
    report, _ = verify_chain(minimal_image, chain, EXECVE)
    assert report.passed, str(report)


def test_exit_three_steps():
    img = image_with([[PopReg(R.RAX), Ret()], [PopReg(R.RDI), Ret()], [Syscall()]])
    goal = SyscallGoal(60, (Arg.imm(0),))
    chain = compile_chain(goal, Catalog.from_image(img))
    assert len(chain.steps) == 3
    assert verify_chain(img, chain, goal)[0].passed


def test_no_syscall_gadget():
    img = image_with([[PopReg(R.RAX), Ret()], [PopReg(R.RDI), Ret()]])
    with pytest.raises(NoSyscallGadget) as ei:
        compile_chain(SyscallGoal(60), Catalog.from_image(img))
    assert ei.value.token == "NoSyscallGadget"


def test_chain_too_long(minimal_catalog):
    with pytest.raises(ChainTooLong):
        compile_chain(EXECVE, minimal_catalog, Constraints(max_chain_words=5))


def test_unlisted_arg_registers_untouched(minimal_catalog):
    chain = compile_chain(SyscallGoal(39), minimal_catalog)
    assert [s.gadget.text for s in chain.steps] == ["pop rax; ret", "syscall"]


def test_ret_imm_only_when_needed():
    img = image_with([[PopReg(R.RAX), Ret()], [PopReg(R.R8), RetImm(0x10)],
                      [PopReg(R.RDI), Ret()], [Syscall()]])
    cat = Catalog.from_image(img)
    goal = SyscallGoal(9, (Arg.imm(7),))
    assert all(not isinstance(s.effect.terminator, RetImm)
               for s in compile_chain(goal, cat).steps)
    # r8 is only reachable through the ret 0x10 gadget; its padding must line up
    img2 = image_with([[PopReg(R.RAX), Ret()], [PopReg(R.R8), RetImm(0x10)], [Syscall()]])
    cat2 = Catalog.from_image(img2)
    steps = encode_immediate(0x1234, R.R8, cat2, Constraints())
    assert isinstance(steps[0].effect.terminator, RetImm)
    sc = next(e for e in cat2 if e.gadget.text == "syscall")
    rax = encode_immediate(77, R.RAX, cat2, Constraints())
    chain = Chain(tuple(steps) + tuple(rax) + (syscall_step(sc),))
    report, payload = verify_chain(img2, chain, SyscallGoal(77))
    assert report.passed, str(report)
    assert [r.kind for r in payload.roles].count("padding") == 2
    assert chain.word_count() == len(payload.words)


def test_bad_bytes_respected(rich_catalog, rich_image):
    cons = Constraints({0x00, 0x0A})
    chain = compile_chain(EXECVE, rich_catalog, cons)
    report, payload = verify_chain(rich_image, chain, EXECVE)
    assert report.passed, str(report)
    assert check_bad_bytes(payload, cons.bad_bytes) == []


def test_filler_avoids_bad_bytes():
    assert Constraints().filler == 0x4141414141414141
    assert Constraints({0x41}).filler == 0x4242424242424242


def test_deterministic(rich_catalog):
    cons = Constraints({0x00, 0x0A})
    a = layout(compile_chain(EXECVE, rich_catalog, cons)).words
    b = layout(compile_chain(EXECVE, rich_catalog, cons)).words
    assert a == b


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1 << 30))
def test_minimal_catalog_sufficiency(minimal_catalog, minimal_image, seed):
    goal = random_goal(random.Random(seed), max_args=4)
    chain = compile_chain(goal, minimal_catalog)
    assert verify_chain(minimal_image, chain, goal)[0].passed


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1 << 30))
def test_rich_random_goals_with_bad_bytes(rich_catalog, rich_image, seed):
    goal = random_goal(random.Random(seed), max_args=6)
    cons = Constraints({0x00, 0x0A})
    try:
        chain = compile_chain(goal, rich_catalog, cons)
    except ImmediateUnencodable:
        return
    report, payload = verify_chain(rich_image, chain, goal)
    assert report.passed, str(report)
    assert check_bad_bytes(payload, cons.bad_bytes) == []


def test_goal_and_constraint_validation():
    with pytest.raises(ValueError):
        SyscallGoal(1, tuple(Arg.imm(0) for _ in range(7)))
    with pytest.raises(ValueError):
        Arg.ptr(b"")
    with pytest.raises(ValueError):
        Constraints(frozenset(range(256)))
