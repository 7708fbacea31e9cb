from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diftsim.errors import BranchBeforeSync, MalformedPacket, TooManyContexts, UnalignedAddress
from diftsim.pft import (
    ASync,
    BranchAddr,
    ContextId,
    Decoder,
    ISync,
    decode_stream,
    encode_packet,
    encode_packets,
    entry_address,
    entry_slot,
    parse_packets,
    read_decoded_file,
    write_decoded_file,
)

T1 = ContextId(0x42, 0x4D2)
T2 = ContextId(0x42, 0x4D3)


def test_async_bytes():
    assert encode_packets([ASync()]) == bytes.fromhex("000000000080")


def test_isync_bytes():
    assert encode_packet(ISync(0x00010000, T1)) == bytes.fromhex("080000010042d20400")


def test_branch_bytes():
    assert encode_packet(BranchAddr(0x10170)) == bytes.fromhex("b070010100")


def test_context_word_layout():
    assert T1.word == 0x0004D242
    assert ContextId.from_word(0x0004D242) == T1
    assert str(T1) == "42:4d2"
    assert ContextId.parse("42:4d3") == T2


def test_unaligned_address_rejected():
    with pytest.raises(UnalignedAddress):
        encode_packet(BranchAddr(0x10172))
    with pytest.raises(UnalignedAddress):
        encode_packet(ISync(0x10001, T1))


def test_single_thread_decode():
    entries, slots = decode_stream(encode_packets([ISync(0x10000, T1), BranchAddr(0x10170)]))
    assert entries == [0x10000, 0x10170]
    assert slots == [T1]


def test_second_context_gets_slot_one():
    data = encode_packets([ISync(0x10000, T1), ISync(0x20000, T2), BranchAddr(0x20040)])
    entries, slots = decode_stream(data)
    assert entries == [0x10000, 0x20001, 0x20041]
    assert slots == [T1, T2]


def test_truncated_branch():
    with pytest.raises(MalformedPacket):
        decode_stream(bytes([0xB0, 0x70]))


def test_truncated_reports_offset():
    data = encode_packets([ISync(0x10000, T1)]) + bytes([0xB0, 0x70])
    with pytest.raises(MalformedPacket, match="offset 9"):
        decode_stream(data)


def test_unknown_header():
    with pytest.raises(MalformedPacket):
        decode_stream(bytes([0x42]))


def test_branch_before_sync():
    with pytest.raises(BranchBeforeSync):
        decode_stream(encode_packets([ASync(), BranchAddr(0x10000)]))


def test_fifth_context():
    packets = [ISync(0x1000 * (k + 1), ContextId(0x42, k + 1)) for k in range(5)]
    with pytest.raises(TooManyContexts):
        decode_stream(encode_packets(packets))


def test_empty_stream():
    assert decode_stream(b"") == ([], [])


@pytest.mark.parametrize("entry,address,slot", [
    (0x20041, 0x20040, 1),
    (0x10170, 0x10170, 0),
    (0x00000003, 0x00000000, 3),
])
def test_entry_fields(entry, address, slot):
    assert entry_address(entry) == address
    assert entry_slot(entry) == slot


def test_chunked_feed_matches_whole():
    data = encode_packets([ASync(), ISync(0x10000, T1), BranchAddr(0x10170), ISync(0x20000, T2),
                           BranchAddr(0x20040), ISync(0x10174, T1)])
    decoder = Decoder()
    entries = []
    for i in range(len(data)):
        entries += decoder.feed(data[i:i + 1])
    decoder.close()
    assert (entries, decoder.slots) == decode_stream(data)


def test_decoded_file_round_trip():
    entries, slots = [0x10000, 0x20001, 0x20041], [T1, T2]
    blob = write_decoded_file(entries, slots)
    assert len(blob) == 4 * (4 + 3)
    assert blob[8:16] == b"\xff" * 8
    assert read_decoded_file(blob) == (entries, slots)


# -- properties -------------------------------------------------------------

contexts = st.builds(ContextId, st.integers(0, 255), st.integers(0, (1 << 24) - 1))
addresses = st.integers(0, (1 << 30) - 1).map(lambda x: x * 4)


@st.composite
def packet_sequences(draw):
    pool = draw(st.lists(contexts, min_size=1, max_size=4, unique=True))
    packets = [ISync(draw(addresses), draw(st.sampled_from(pool)))]
    for _ in range(draw(st.integers(0, 30))):
        kind = draw(st.integers(0, 5))
        if kind == 0:
            packets.append(ASync())
        elif kind == 1:
            packets.append(ISync(draw(addresses), draw(st.sampled_from(pool))))
        else:
            packets.append(BranchAddr(draw(addresses)))
    return packets


def _reference_decode(packets):
    slots, entries, current = [], [], None
    for p in packets:
        if isinstance(p, ISync):
            if p.ctx not in slots:
                slots.append(p.ctx)
            current = slots.index(p.ctx)
            entries.append((p.address, current))
        elif isinstance(p, BranchAddr):
            entries.append((p.address, current))
    return entries, slots


@settings(max_examples=200)
@given(packet_sequences())
def test_round_trip_property(packets):
    data = encode_packets(packets)
    assert parse_packets(data) == packets
    entries, slots = decode_stream(data)
    expected, expected_slots = _reference_decode(packets)
    assert slots == expected_slots
    assert [(entry_address(e), entry_slot(e)) for e in entries] == expected


@settings(max_examples=100)
@given(packet_sequences())
def test_filtering_by_slot(packets):
    entries, slots = decode_stream(encode_packets(packets))
    owner, per_context = None, {c: [] for c in slots}
    for p in packets:
        if isinstance(p, ISync):
            owner = p.ctx
        if isinstance(p, (ISync, BranchAddr)):
            per_context[owner].append(p.address)
    for s, ctx in enumerate(slots):
        assert [entry_address(e) for e in entries if entry_slot(e) == s] == per_context[ctx]
