from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diftsim.errors import TmmuFull, TmmuMiss
from diftsim.tagmem import (
    TMMU_ENTRIES,
    TagMemory,
    TagSpace,
    Tmmu,
    fold_tag_range,
    format_mappings,
    parse_mappings,
    read_tag,
    register_mapping,
    translate,
    write_tag,
    write_tag_range,
)


def fresh(*vpns):
    tmmu, mem = Tmmu(), TagMemory()
    for vpn in vpns:
        register_mapping(tmmu, mem, vpn)
    return tmmu, mem


def test_register_one():
    tmmu, mem = fresh(0x10)
    assert tmmu.valid_count == 1
    assert read_tag(tmmu, mem, 0x10ffc) == 0


def test_register_idempotent():
    tmmu, mem = fresh(0x10, 0x10)
    assert tmmu.valid_count == 1
    assert len(mem.pages) == 1


def test_capacity():
    tmmu, mem = fresh(*range(64))
    assert tmmu.valid_count == TMMU_ENTRIES == 64
    with pytest.raises(TmmuFull):
        register_mapping(tmmu, mem, 64)


def test_translate():
    tmmu, mem = fresh(0x10)
    page = tmmu.lookup(0x10).tag_ppn
    assert translate(tmmu, 0x00010170) == (page, 0x5C)
    assert translate(tmmu, 0x00010000) == (page, 0)
    with pytest.raises(TmmuMiss):
        translate(tmmu, 0xDEAD0000)


def test_read_write():
    tmmu, mem = fresh(0x10)
    write_tag(tmmu, mem, 0x10170, 0x1)
    assert read_tag(tmmu, mem, 0x10170) == 0x1
    write_tag(tmmu, mem, 0x10172, 0x9)
    assert read_tag(tmmu, mem, 0x10170) == 0x9


def test_ranges():
    tmmu, mem = fresh(0x10)
    write_tag_range(tmmu, mem, 0x10100, 8, 0x3)
    assert fold_tag_range(tmmu, mem, 0x10100, 8) == 0x3
    assert fold_tag_range(tmmu, mem, 0x10800, 64) == 0
    write_tag(tmmu, mem, 0x10200, 0x1)
    write_tag(tmmu, mem, 0x10204, 0x4)
    assert fold_tag_range(tmmu, mem, 0x10200, 8) == 0x5
    assert fold_tag_range(tmmu, mem, 0x10200, 0) == 0


def test_range_partial_words():
    tmmu, mem = fresh(0x10)
    write_tag_range(tmmu, mem, 0x10103, 2, 0x7)
    assert read_tag(tmmu, mem, 0x10100) == 0x7
    assert read_tag(tmmu, mem, 0x10104) == 0x7
    assert read_tag(tmmu, mem, 0x10108) == 0


def test_range_miss_has_no_partial_effect():
    tmmu, mem = fresh(0x10)
    with pytest.raises(TmmuMiss):
        write_tag_range(tmmu, mem, 0x10ff8, 16, 0x1)
    assert read_tag(tmmu, mem, 0x10ff8) == 0
    assert read_tag(tmmu, mem, 0x10ffc) == 0


def test_mappings_text():
    assert parse_mappings(format_mappings([0x10, 0x7f000])) == [0x10, 0x7f000]
    assert parse_mappings("# code\n00010\n\n20 # data\n") == [0x10, 0x20]


@settings(max_examples=50)
@given(st.lists(st.integers(0, (1 << 20) - 1), min_size=1, max_size=64, unique=True), st.data())
def test_translation_matches_dict(vpns, data):
    space = TagSpace(vpns)
    assert space.tmmu.valid_count == len(vpns)
    shadow = {}
    for _ in range(30):
        vpn = data.draw(st.sampled_from(vpns))
        addr = (vpn << 12) | data.draw(st.integers(0, 0xFFF))
        tag = data.draw(st.integers(0, (1 << 32) - 1))
        space.write(addr, tag)
        shadow[addr & ~3] = tag
    for addr, tag in shadow.items():
        assert space.read(addr) == tag
    assert dict(space.nonzero()) == {a: t for a, t in shadow.items() if t}


@settings(max_examples=50)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.integers(0, 0x1FFF), st.integers(0, 64))
def test_fold_matches_word_loop(tag_bits, start, count):
    space = TagSpace([0x10, 0x11, 0x12])
    for i, bit in enumerate(tag_bits):
        space.write(0x10000 + 4 * i, 1 << bit)
    base = 0x10000 + start
    expected = 0
    for a in range(base, base + count):
        expected |= space.read(a)
    assert space.fold_range(base, count) == expected
