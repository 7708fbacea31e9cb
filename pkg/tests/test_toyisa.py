from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diftsim.annot import (
    COMPILE_TIME_TWIN,
    Annotation,
    InstrClass,
    Opcode,
    PolicyMode,
    lookup_block,
)
from diftsim.errors import (
    MismatchedOrigin,
    MissingBlock,
    ProgramSyntaxError,
    UninstrumentedDynamicAccess,
    UnsupportedStackUpdate,
)
from diftsim.scenario import corpus_path, corpus_programs, load_program
from diftsim.toyisa.analyze import analyze
from diftsim.toyisa.gen import random_program
from diftsim.toyisa.instrument import Strategy, instrument, instrumented_sites, metrics
from diftsim.toyisa.program import (
    CONTROL_OPS,
    MEMORY_OPS,
    InstrEmit,
    Ldr,
    ToyProgram,
    format_program,
    parse_instr,
    parse_program,
)


def stackcopy():
    return load_program(corpus_path("stackcopy.s"))


def test_stackcopy_original_layout():
    p = stackcopy()
    addresses = {type(i).__name__: a for a, i, _ in p.instructions() if isinstance(i, MEMORY_OPS)}
    assert addresses == {"Ldr": 0x10170, "Str": 0x10174}
    assert [b.address for b in p.blocks] == [0x10168, 0x1017C]
    assert p.size_bytes == 28


def test_stackcopy_s1_listing():
    q = instrument(stackcopy(), Strategy.S1)
    emits = [a for a, i, _ in q.instructions() if isinstance(i, InstrEmit)]
    assert emits == [0x10170, 0x10178]
    assert "str sp, [r9]" in format_program(q) and "str r2, [r9]" in format_program(q)


def test_stackcopy_s2_compile_time_block1():
    q = instrument(stackcopy(), Strategy.S2)
    store = analyze(q, PolicyMode.COMPILE_TIME, Strategy.S2)
    block1 = lookup_block(store, 0x10168)
    assert [a.opcode for a in block1] == [Opcode.TagRImm, Opcode.TagRImm, Opcode.TagTRM2, Opcode.TagITR2]
    assert [str(a) for a in block1] == [
        "TagRImm T1,#0", "TagRImm T2,#0", "TagTRM2 CopySrc1 T3,G13,T13,#4", "TagITR2 CopySrc1 T3,T2,#0"]


def test_stackcopy_block2_lookup():
    q = instrument(stackcopy(), Strategy.S1)
    store = analyze(q)
    assert lookup_block(store, 0x10184) == (
        Annotation(Opcode.TagRRR, InstrClass.ArithLogic, dst=0, src1=3, src2=1),)
    # the original address of block 2 falls inside block 1 once instrumented
    with pytest.raises(MissingBlock):
        lookup_block(store, 0x1017C)


def test_runtime_and_compile_time_stores_differ_only_in_opcode():
    q = instrument(load_program(corpus_path("mixed10.s")), Strategy.S2)
    runtime = dict(analyze(q, PolicyMode.RUNTIME).items())
    compiled = dict(analyze(q, PolicyMode.COMPILE_TIME).items())
    assert runtime.keys() == compiled.keys()
    for address, annotations in runtime.items():
        for a, b in zip(annotations, compiled[address], strict=True):
            assert (a.dst, a.src1, a.src2, a.imm, a.cls) == (b.dst, b.src1, b.src2, b.imm, b.cls)
            assert b.opcode == COMPILE_TIME_TWIN.get(a.opcode, a.opcode)


def test_empty_program_gives_empty_store():
    assert len(analyze(ToyProgram("empty", 0x10000, [], "main"))) == 0


def test_analysis_requires_instrumentation():
    with pytest.raises(ProgramSyntaxError):
        analyze(stackcopy())
    with pytest.raises(ProgramSyntaxError):
        analyze(instrument(stackcopy(), Strategy.S1), strategy=Strategy.S2)


def test_uninstrumented_dynamic_access():
    p = parse_program(".instrumented s2\nmain:\n mov r1, #0x20000\n ldr r2, [r1]\n ret\n")
    with pytest.raises(UninstrumentedDynamicAccess):
        analyze(p)


def test_unsupported_stack_update():
    p = instrument(parse_program("main:\n add sp, r1, r2\n ret\n"), Strategy.S2)
    with pytest.raises(UnsupportedStackUpdate):
        analyze(p)


@pytest.mark.parametrize("name,s1,s2", [("stackcopy", 2, 1), ("sponly", 3, 0), ("mixed10", 10, 6)])
def test_added_counts(name, s1, s2):
    p = load_program(corpus_path(f"{name}.s"))
    table = metrics(p, [instrument(p, s) for s in Strategy])
    assert table[Strategy.S1].added_instructions == s1
    assert table[Strategy.S2].added_instructions == s2
    assert table[Strategy.RELATED].added_instructions == 2 * s1


def test_stackcopy_overhead_fraction():
    p = stackcopy()
    m = metrics(p, [instrument(p, Strategy.S1)])[Strategy.S1]
    assert m.overhead == Fraction(8, 28)
    assert round(m.overhead_percent, 1) == 28.6
    assert m.code_size_bytes == 36


def test_sponly_s2_overhead_zero():
    p = load_program(corpus_path("sponly.s"))
    assert metrics(p, [instrument(p, Strategy.S2)])[Strategy.S2].overhead == 0
    assert format_program(instrument(p, Strategy.S2)).count("[r9]") == 0


def test_matrix_ordering():
    p = load_program(corpus_path("matrix.s"))
    table = metrics(p, [instrument(p, s) for s in Strategy])
    o = {s: table[s].overhead for s in Strategy}
    assert o[Strategy.S2] < o[Strategy.S1] < o[Strategy.RELATED]


def test_mismatched_origin():
    a, b = stackcopy(), load_program(corpus_path("mixed10.s"))
    with pytest.raises(MismatchedOrigin):
        metrics(a, [instrument(b, Strategy.S1)])
    with pytest.raises(MismatchedOrigin):
        metrics(a, [a])


def test_already_instrumented():
    with pytest.raises(ProgramSyntaxError):
        instrument(instrument(stackcopy(), Strategy.S1), Strategy.S2)


def test_library_sites_skipped():
    p = load_program(corpus_path("wrapper.s"))
    q = instrument(p, Strategy.S1, library=False)
    assert q.instrumented == "s1-nolib"
    lib_emits = [i for b in q.blocks if b.lib for i in b.instrs if isinstance(i, InstrEmit)]
    assert lib_emits == []
    assert len(instrumented_sites(p, Strategy.S1, library=False)) < len(instrumented_sites(p, Strategy.S1))


def test_parser_errors():
    with pytest.raises(ProgramSyntaxError):
        parse_program("")
    with pytest.raises(ProgramSyntaxError):
        parse_program("main:\n mov r9, #1\n ret\n")
    with pytest.raises(ProgramSyntaxError):
        parse_program("main:\n mov r1, #1\nnext:\n ret\n")
    with pytest.raises(ProgramSyntaxError):
        parse_program("main:\n b nowhere\n")
    with pytest.raises(ProgramSyntaxError):
        parse_program("main:\n mov r1, #1\n")
    with pytest.raises(ProgramSyntaxError):
        parse_instr("ldr r1, r2")


def test_export_parses_as_instr_emit():
    assert parse_instr("str r4, [r9]") == InstrEmit(4)
    assert parse_instr("ldr r1, [sp, #-8]") == Ldr(1, 13, -8)


def test_auto_labels_after_control_transfer():
    p = parse_program("main:\n bnz r1, main\n mov r1, #0\n ret\n")
    assert [b.label for b in p.blocks] == ["main", ".L1"]


@pytest.mark.parametrize("path", corpus_programs())
def test_corpus_text_round_trip(path):
    p = load_program(path)
    again = parse_program(format_program(p), name=p.name)
    assert format_program(again) == format_program(p)
    assert again.fingerprint() == p.fingerprint()
    for s in Strategy:
        q = instrument(p, s)
        assert format_program(parse_program(format_program(q))) == format_program(q)


@pytest.mark.parametrize("path", corpus_programs())
def test_corpus_block_shape(path):
    for s in Strategy:
        q = instrument(load_program(path), s)
        for block in q.blocks:
            assert isinstance(block.instrs[-1], CONTROL_OPS)
            assert not any(isinstance(i, CONTROL_OPS) for i in block.instrs[:-1])
            for i, instr in enumerate(block.instrs):
                if isinstance(instr, InstrEmit):
                    assert isinstance(block.instrs[i + 1], MEMORY_OPS)
                    assert block.instrs[i + 1].base == instr.reg
        addresses = [a for a, _, _ in q.instructions()]
        assert addresses == list(range(q.text_base, q.text_base + 4 * len(addresses), 4))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_site_inclusion(seed):
    p = random_program(random.Random(seed))
    s1 = {a for a, _ in instrumented_sites(p, Strategy.S1)}
    s2 = {a for a, _ in instrumented_sites(p, Strategy.S2)}
    assert s2 <= s1
    assert s1 == {a for a, _ in instrumented_sites(p, Strategy.RELATED)}
    static = {a for a, i in instrumented_sites(p, Strategy.S1) if i.base in (11, 13, 15)}
    assert s1 - s2 == static
