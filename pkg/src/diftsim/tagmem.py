"""Virtual-address tag memory: a 64-entry tag MMU over a pool of tag pages.

One 32-bit tag covers one 4-byte data word; a 4 KiB data page therefore owns
1024 tags. The TMMU maps virtual page numbers to tag pages and is filled once
from the process mappings before anything else runs.
"""
from __future__ import annotations

from array import array
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Tuple

from .errors import TmmuFull, TmmuMiss

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
TAGS_PER_PAGE = PAGE_SIZE // 4
TMMU_ENTRIES = 64
VPN_LIMIT = 1 << 20


@dataclass
class TmmuEntry:
    vpn: int = 0
    tag_ppn: int = 0
    valid: bool = False


class TagMemory:
    """Pool of physical tag pages; unwritten tags read as zero."""

    def __init__(self):
        self.pages: List[array] = []

    def allocate(self) -> int:
        self.pages.append(array("I", bytes(PAGE_SIZE)))
        return len(self.pages) - 1


class Tmmu:
    def __init__(self):
        self.entries = [TmmuEntry() for _ in range(TMMU_ENTRIES)]

    def lookup(self, vpn: int) -> Optional[TmmuEntry]:
        for entry in self.entries:
            if entry.valid and entry.vpn == vpn:
                return entry
        return None

    @property
    def valid_count(self) -> int:
        return sum(e.valid for e in self.entries)


def register_mapping(tmmu: Tmmu, mem: TagMemory, vpn: int) -> Tmmu:
    if not 0 <= vpn < VPN_LIMIT:
        raise ValueError(f"vpn {vpn:#x} exceeds 20 bits")
    if tmmu.lookup(vpn) is not None:
        return tmmu
    for entry in tmmu.entries:
        if not entry.valid:
            entry.vpn, entry.tag_ppn, entry.valid = vpn, mem.allocate(), True
            return tmmu
    raise TmmuFull(f"cannot map vpn {vpn:#x}: all {TMMU_ENTRIES} TMMU entries are in use")


def translate(tmmu: Tmmu, vaddr: int) -> Tuple[int, int]:
    """Return (tag page number, word index within that page)."""
    vaddr &= 0xFFFFFFFF
    entry = tmmu.lookup(vaddr >> PAGE_SHIFT)
    if entry is None:
        raise TmmuMiss(f"no tag page for virtual address {vaddr:#010x}")
    return entry.tag_ppn, (vaddr & (PAGE_SIZE - 1)) >> 2


def read_tag(tmmu: Tmmu, mem: TagMemory, vaddr: int) -> int:
    ppn, index = translate(tmmu, vaddr)
    return mem.pages[ppn][index]


def write_tag(tmmu: Tmmu, mem: TagMemory, vaddr: int, tag: int) -> TagMemory:
    ppn, index = translate(tmmu, vaddr)
    mem.pages[ppn][index] = tag & 0xFFFFFFFF
    return mem


def _range_words(vaddr: int, count_bytes: int) -> range:
    if count_bytes <= 0:
        return range(0)
    first = vaddr & ~0x3
    last = (vaddr + count_bytes - 1) & ~0x3
    return range(first, last + 4, 4)


def write_tag_range(tmmu: Tmmu, mem: TagMemory, vaddr: int, count_bytes: int, tag: int) -> TagMemory:
    locations = [translate(tmmu, a) for a in _range_words(vaddr, count_bytes)]
    for ppn, index in locations:
        mem.pages[ppn][index] = tag & 0xFFFFFFFF
    return mem


def fold_tag_range(tmmu: Tmmu, mem: TagMemory, vaddr: int, count_bytes: int) -> int:
    result = 0
    for a in _range_words(vaddr, count_bytes):
        ppn, index = translate(tmmu, a)
        result |= mem.pages[ppn][index]
    return result


class TagSpace:
    """A TMMU bundled with its page pool, the unit one TMC talks to."""

    def __init__(self, vpns: Iterable[int] = ()):
        self.tmmu = Tmmu()
        self.mem = TagMemory()
        for vpn in vpns:
            self.register(vpn)

    def register(self, vpn: int):
        register_mapping(self.tmmu, self.mem, vpn)

    def read(self, vaddr: int) -> int:
        return read_tag(self.tmmu, self.mem, vaddr)

    def write(self, vaddr: int, tag: int):
        write_tag(self.tmmu, self.mem, vaddr, tag)

    def write_range(self, vaddr: int, count_bytes: int, tag: int):
        write_tag_range(self.tmmu, self.mem, vaddr, count_bytes, tag)

    def fold_range(self, vaddr: int, count_bytes: int) -> int:
        return fold_tag_range(self.tmmu, self.mem, vaddr, count_bytes)

    def nonzero(self) -> Iterator[Tuple[int, int]]:
        """(word address, tag) for every nonzero tag, in address order."""
        mapped = sorted((e.vpn, e.tag_ppn) for e in self.tmmu.entries if e.valid)
        for vpn, ppn in mapped:
            page = self.mem.pages[ppn]
            base = vpn << PAGE_SHIFT
            for index, tag in enumerate(page):
                if tag:
                    yield base + 4 * index, tag


def parse_mappings(text: str) -> List[int]:
    """Process-mappings file: one hexadecimal vpn per line."""
    vpns = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            vpns.append(int(line, 16))
    return vpns


def format_mappings(vpns: Iterable[int]) -> str:
    return "".join(f"{v:05x}\n" for v in vpns)
