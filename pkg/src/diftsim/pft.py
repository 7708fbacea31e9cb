"""Simplified program-flow trace: packet encoder, streaming decoder, and the
decoded-trace memory format.

Wire format (all multi-byte fields little-endian)::

    A-sync      00 00 00 00 00 80
    I-sync      08 <address:4> <context word:4>
    branch      B0 <address:4>

Decoded entries are 32-bit words whose two low bits hold the thread slot of
the context that produced them (addresses are always word aligned).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

from .errors import BranchBeforeSync, MalformedPacket, TooManyContexts, UnalignedAddress

ASYNC_BYTES = b"\x00\x00\x00\x00\x00\x80"
ISYNC_HEADER = 0x08
BRANCH_HEADER = 0xB0
MAX_SLOTS = 4
UNUSED_SLOT = 0xFFFFFFFF
ADDRESS_MASK = 0xFFFFFFFC
SLOT_MASK = 0x3


@dataclass(frozen=True, order=True)
class ContextId:
    asid: int
    tid: int

    def __post_init__(self):
        if not 0 <= self.asid < 1 << 8:
            raise ValueError(f"asid {self.asid:#x} does not fit in 8 bits")
        if not 0 <= self.tid < 1 << 24:
            raise ValueError(f"tid {self.tid:#x} does not fit in 24 bits")

    @property
    def word(self) -> int:
        return (self.tid << 8) | self.asid

    @classmethod
    def from_word(cls, word: int) -> "ContextId":
        return cls(asid=word & 0xFF, tid=(word >> 8) & 0xFFFFFF)

    def __str__(self):
        return f"{self.asid:x}:{self.tid:x}"

    @classmethod
    def parse(cls, text: str) -> "ContextId":
        """Parse ``asid:tid`` (hex, as printed by ``str``)."""
        asid, _, tid = text.partition(":")
        return cls(int(asid, 16), int(tid, 16))


@dataclass(frozen=True)
class ASync:
    pass


@dataclass(frozen=True)
class ISync:
    address: int
    ctx: ContextId


@dataclass(frozen=True)
class BranchAddr:
    address: int


TracePacket = Union[ASync, ISync, BranchAddr]


def _check_aligned(address: int):
    if address & 0x3 or not 0 <= address <= 0xFFFFFFFF:
        raise UnalignedAddress(f"trace address {address:#x} is not a 4-byte aligned 32-bit address")


def encode_packet(packet: TracePacket) -> bytes:
    if isinstance(packet, ASync):
        return ASYNC_BYTES
    if isinstance(packet, ISync):
        _check_aligned(packet.address)
        return struct.pack("<BII", ISYNC_HEADER, packet.address, packet.ctx.word)
    if isinstance(packet, BranchAddr):
        _check_aligned(packet.address)
        return struct.pack("<BI", BRANCH_HEADER, packet.address)
    raise TypeError(f"not a trace packet: {packet!r}")


def encode_packets(packets: Iterable[TracePacket]) -> bytes:
    return b"".join(encode_packet(p) for p in packets)


def parse_packets(data: bytes) -> List[TracePacket]:
    """Split a byte stream back into packets (no slot bookkeeping)."""
    packets: List[TracePacket] = []
    pos = 0
    while pos < len(data):
        packet, size = _parse_one(data, pos)
        if packet is None:
            raise MalformedPacket("truncated packet", pos)
        packets.append(packet)
        pos += size
    return packets


def _parse_one(data, pos):
    """Return (packet, size), or (None, 0) if more bytes are needed."""
    header = data[pos]
    if header == 0x00:
        chunk = bytes(data[pos:pos + len(ASYNC_BYTES)])
        if chunk != ASYNC_BYTES[:len(chunk)]:
            raise MalformedPacket("bad A-sync sequence", pos)
        if len(chunk) < len(ASYNC_BYTES):
            return None, 0
        return ASync(), len(ASYNC_BYTES)
    if header == ISYNC_HEADER:
        if len(data) - pos < 9:
            return None, 0
        address, word = struct.unpack_from("<II", data, pos + 1)
        if address & 0x3:
            raise MalformedPacket(f"unaligned I-sync address {address:#x}", pos)
        return ISync(address, ContextId.from_word(word)), 9
    if header == BRANCH_HEADER:
        if len(data) - pos < 5:
            return None, 0
        (address,) = struct.unpack_from("<I", data, pos + 1)
        if address & 0x3:
            raise MalformedPacket(f"unaligned branch address {address:#x}", pos)
        return BranchAddr(address), 5
    raise MalformedPacket(f"unknown header byte {header:#04x}", pos)


class Decoder:
    """Incremental decoder; ``feed`` may be called with arbitrary byte chunks."""

    def __init__(self):
        self.slots: List[ContextId] = []
        self.current_slot = None
        self._pending = bytearray()
        self._offset = 0  # stream offset of _pending[0]

    def feed(self, data: bytes) -> List[int]:
        self._pending += data
        entries = []
        pos = 0
        while pos < len(self._pending):
            packet, size = _parse_one(self._pending, pos)
            if packet is None:
                break
            entry = self._consume(packet, self._offset + pos)
            if entry is not None:
                entries.append(entry)
            pos += size
        del self._pending[:pos]
        self._offset += pos
        return entries

    def _consume(self, packet, offset):
        if isinstance(packet, ASync):
            return None
        if isinstance(packet, ISync):
            if packet.ctx not in self.slots:
                if len(self.slots) == MAX_SLOTS:
                    raise TooManyContexts(
                        f"context {packet.ctx} at byte offset {offset} needs a fifth slot")
                self.slots.append(packet.ctx)
            self.current_slot = self.slots.index(packet.ctx)
            return packet.address | self.current_slot
        if self.current_slot is None:
            raise BranchBeforeSync(f"branch packet at byte offset {offset} before any I-sync")
        return packet.address | self.current_slot

    def close(self):
        if self._pending:
            raise MalformedPacket("truncated packet", self._offset)


def decode_stream(data: bytes) -> Tuple[List[int], List[ContextId]]:
    decoder = Decoder()
    entries = decoder.feed(data)
    decoder.close()
    return entries, list(decoder.slots)


def entry_address(entry: int) -> int:
    return entry & ADDRESS_MASK


def entry_slot(entry: int) -> int:
    return entry & SLOT_MASK


def write_decoded_file(entries: Sequence[int], slots: Sequence[ContextId]) -> bytes:
    """Serialize the decoded-trace memory: 4 context words, then the entries."""
    if len(slots) > MAX_SLOTS:
        raise TooManyContexts(f"{len(slots)} contexts do not fit the slot table")
    table = [c.word for c in slots] + [UNUSED_SLOT] * (MAX_SLOTS - len(slots))
    return struct.pack(f"<{MAX_SLOTS + len(entries)}I", *table, *entries)


def read_decoded_file(data: bytes) -> Tuple[List[int], List[ContextId]]:
    if len(data) < 4 * MAX_SLOTS or len(data) % 4:
        raise MalformedPacket("decoded-trace file is not a whole number of words", len(data))
    words = list(struct.unpack(f"<{len(data) // 4}I", data))
    slots = [ContextId.from_word(w) for w in words[:MAX_SLOTS] if w != UNUSED_SLOT]
    return words[MAX_SLOTS:], slots
