"""Toy machine: memory, simulated tagged file system and the scheduler that
produces the trace, instrumentation and kernel-message stream.

Threads are scheduled round-robin and only switch at basic-block boundaries,
once the running thread has executed at least ``quantum`` instructions since
it was scheduled.  Every block entry is traced: an I-sync when a thread starts
or resumes, a branch packet otherwise (fall-through included).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..dispatch import InstrPush, ReadMsg, TraceEntry, WriteMsg
from ..errors import ManifestError, RuntimeFault
from ..pft import ASYNC_BYTES, BranchAddr, ContextId, ISync, encode_packet
from .program import (
    INSTR_SIZE,
    LR,
    PC,
    SP,
    Alu,
    B,
    Bcond,
    Call,
    FAlu,
    FLdr,
    FStr,
    InstrEmit,
    Ldr,
    MovImm,
    Ret,
    Str,
    SysRead,
    SysWrite,
    ToyProgram,
)

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
WORD = 0xFFFFFFFF
DEFAULT_STEP_LIMIT = 1_000_000


# -- memory -----------------------------------------------------------------

class Memory:
    """Sparse byte-addressed memory made of the program's mapped pages."""

    def __init__(self, regions: Sequence[Tuple[int, int]] = ()):
        self.pages: Dict[int, bytearray] = {}
        for base, size in regions:
            self.map(base, size)

    def map(self, base: int, size: int):
        if size <= 0:
            return
        for vpn in range(base >> PAGE_SHIFT, ((base + size - 1) >> PAGE_SHIFT) + 1):
            self.pages.setdefault(vpn, bytearray(PAGE_SIZE))

    def _page(self, address: int) -> bytearray:
        page = self.pages.get((address & WORD) >> PAGE_SHIFT)
        if page is None:
            raise RuntimeFault(f"access to unmapped address {address & WORD:#010x}")
        return page

    def read_word(self, address: int) -> int:
        if address & 0x3:
            raise RuntimeFault(f"unaligned word access at {address & WORD:#010x}")
        page = self._page(address)
        return struct.unpack_from("<I", page, address & (PAGE_SIZE - 1))[0]

    def write_word(self, address: int, value: int):
        if address & 0x3:
            raise RuntimeFault(f"unaligned word access at {address & WORD:#010x}")
        page = self._page(address)
        struct.pack_into("<I", page, address & (PAGE_SIZE - 1), value & WORD)

    def check_range(self, address: int, count: int):
        for a in range(address, address + count, 1):
            if (a & (PAGE_SIZE - 1)) == 0 or a == address:
                self._page(a)

    def read_bytes(self, address: int, count: int) -> bytes:
        self.check_range(address, count)
        return bytes(self._page(a)[a & (PAGE_SIZE - 1)] for a in range(address, address + count))

    def write_bytes(self, address: int, data: bytes):
        self.check_range(address, len(data))
        for i, byte in enumerate(data):
            a = address + i
            self._page(a)[a & (PAGE_SIZE - 1)] = byte

    def words(self) -> Dict[int, int]:
        """Every nonzero word, by address."""
        out = {}
        for vpn in sorted(self.pages):
            page = self.pages[vpn]
            for i, value in enumerate(struct.unpack("<1024I", page)):
                if value:
                    out[(vpn << PAGE_SHIFT) + 4 * i] = value
        return out


def load_memory(p: ToyProgram) -> Memory:
    mem = Memory(p.regions())
    for addr, value in p.words.items():
        mem.write_word(addr, value)
    return mem


# -- simulated tagged file system ----------------------------------------------

@dataclass
class SimFile:
    data: bytes = b""
    tag: int = 0


@dataclass
class SimFileSystem:
    """file id -> contents and tag; the tag plays the role of an extended attribute."""

    files: Dict[str, SimFile] = field(default_factory=dict)

    def get(self, file_id: str) -> SimFile:
        try:
            return self.files[file_id]
        except KeyError:
            raise RuntimeFault(f"no such file {file_id!r}") from None

    def copy(self) -> "SimFileSystem":
        return SimFileSystem({k: SimFile(v.data, v.tag) for k, v in self.files.items()})

    def tags(self) -> Dict[str, int]:
        return {k: v.tag for k, v in sorted(self.files.items())}


def parse_fs_manifest(text: str, base_dir: str = ".") -> SimFileSystem:
    """Lines ``file_id,hex_tag,path``; an empty path gives an empty file."""
    fs = SimFileSystem()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [s.strip() for s in line.split(",")]
        if len(parts) != 3 or not parts[0]:
            raise ManifestError(f"file-system manifest line {lineno}: expected file_id,hex_tag,path")
        file_id, tag_text, path = parts
        try:
            tag = int(tag_text, 16)
        except ValueError:
            raise ManifestError(f"file-system manifest line {lineno}: bad tag {tag_text!r}") from None
        data = b""
        if path:
            full = path if os.path.isabs(path) else os.path.join(base_dir, path)
            try:
                with open(full, "rb") as fh:
                    data = fh.read()
            except OSError as exc:
                raise ManifestError(f"file-system manifest line {lineno}: {exc}") from None
        fs.files[file_id] = SimFile(data, tag & WORD)
    return fs


# -- execution --------------------------------------------------------------

class NullCoprocessor:
    """Stand-in when no DIFT pipeline is attached: acknowledges everything."""

    def on_trace_bytes(self, data: bytes):
        pass

    def on_instrumentation(self, ctx: ContextId, value: int):
        pass

    def on_read(self, msg: ReadMsg) -> bool:
        return True

    def on_write(self, msg: WriteMsg) -> Optional[int]:
        return 0


@dataclass
class ThreadState:
    program: ToyProgram
    ctx: ContextId
    memory: Memory
    regs: List[int] = field(default_factory=lambda: [0] * 16)
    fregs: List[int] = field(default_factory=lambda: [0] * 32)
    pc: int = 0
    exited: bool = False
    killed: bool = False
    instructions: int = 0

    @property
    def done(self) -> bool:
        return self.exited or self.killed


@dataclass
class EventStream:
    pft: bytearray = field(default_factory=bytearray)
    events: list = field(default_factory=list)
    threads: List[ThreadState] = field(default_factory=list)
    fs: Optional[SimFileSystem] = None
    write_replies: List[int] = field(default_factory=list)


def _f32(bits: int) -> np.float32:
    return np.array([bits], dtype=np.uint32).view(np.float32)[0]


def _bits(value) -> int:
    return int(np.array([value], dtype=np.float32).view(np.uint32)[0])


def fp_alu(op: str, a_bits: int, b_bits: int) -> int:
    """IEEE single-precision add/sub/mul on raw register bits."""
    a, b = _f32(a_bits), _f32(b_bits)
    with np.errstate(all="ignore"):
        if op == "add":
            r = a + b
        elif op == "sub":
            r = a - b
        else:
            r = a * b
    return _bits(r)


def alu(op: str, a: int, b: int) -> int:
    if op == "add":
        return (a + b) & WORD
    if op == "sub":
        return (a - b) & WORD
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    return a ^ b


def new_thread(p: ToyProgram, ctx: ContextId) -> ThreadState:
    t = ThreadState(program=p, ctx=ctx, memory=load_memory(p), pc=p.entry_address)
    for reg, value in p.regs_init.items():
        t.regs[reg] = value & WORD
    t.regs[SP] = p.initial_sp & WORD
    return t


class _Runner:
    def __init__(self, threads: List[ThreadState], fs: SimFileSystem, cop, stream: EventStream):
        self.threads = threads
        self.fs = fs
        self.cop = cop
        self.stream = stream

    def emit(self, packet):
        data = encode_packet(packet)
        self.stream.pft += data
        self.stream.events.append(TraceEntry())
        self.cop.on_trace_bytes(data)

    def reg(self, t: ThreadState, r: int, address: int) -> int:
        return address if r == PC else t.regs[r]

    def run_block(self, t: ThreadState) -> int:
        """Execute the block at t.pc; returns the instruction count."""
        block = t.program.block_at(t.pc)
        mem = t.memory
        for i, instr in enumerate(block.instrs):
            address = block.address + INSTR_SIZE * i
            t.instructions += 1
            if isinstance(instr, MovImm):
                t.regs[instr.rd] = instr.imm & WORD
            elif isinstance(instr, Alu):
                b = self.reg(t, instr.rm, address) if instr.rm is not None else instr.imm & WORD
                t.regs[instr.rd] = alu(instr.op, self.reg(t, instr.rn, address), b)
            elif isinstance(instr, Ldr):
                t.regs[instr.rt] = mem.read_word((self.reg(t, instr.base, address) + instr.offset) & WORD)
            elif isinstance(instr, Str):
                mem.write_word((self.reg(t, instr.base, address) + instr.offset) & WORD,
                               self.reg(t, instr.rt, address))
            elif isinstance(instr, FLdr):
                t.fregs[instr.st] = mem.read_word((self.reg(t, instr.base, address) + instr.offset) & WORD)
            elif isinstance(instr, FStr):
                mem.write_word((self.reg(t, instr.base, address) + instr.offset) & WORD, t.fregs[instr.st])
            elif isinstance(instr, FAlu):
                t.fregs[instr.sd] = fp_alu(instr.op, t.fregs[instr.sn], t.fregs[instr.sm])
            elif isinstance(instr, InstrEmit):
                value = self.reg(t, instr.reg, address)
                self.stream.events.append(InstrPush(t.ctx, value))
                self.cop.on_instrumentation(t.ctx, value)
            elif isinstance(instr, SysRead):
                self.sys_read(t, instr)
                if t.killed:
                    return i + 1
            elif isinstance(instr, SysWrite):
                self.sys_write(t, instr)
                if t.killed:
                    return i + 1
            elif isinstance(instr, B):
                t.pc = t.program.label_address(instr.target)
            elif isinstance(instr, Bcond):
                if t.regs[instr.reg]:
                    t.pc = t.program.label_address(instr.target)
                else:
                    t.pc = block.end
            elif isinstance(instr, Call):
                t.regs[LR] = block.end
                t.pc = t.program.label_address(instr.target)
            elif isinstance(instr, Ret):
                if t.regs[LR] == 0:
                    t.exited = True
                else:
                    t.pc = t.regs[LR]
        return len(block.instrs)

    def sys_read(self, t: ThreadState, instr: SysRead):
        f = self.fs.get(instr.file_id)
        buf = t.regs[instr.buf_reg]
        data = f.data[:t.regs[instr.len_reg]]
        t.memory.check_range(buf, len(data))
        msg = ReadMsg(f.tag, buf, len(data), t.ctx)
        self.stream.events.append(msg)
        if not self.cop.on_read(msg):
            t.killed = True
            return
        t.memory.write_bytes(buf, data)

    def sys_write(self, t: ThreadState, instr: SysWrite):
        buf, count = t.regs[instr.buf_reg], t.regs[instr.len_reg]
        data = t.memory.read_bytes(buf, count)
        msg = WriteMsg(buf, count, t.ctx)
        self.stream.events.append(msg)
        reply = self.cop.on_write(msg)
        if reply is None:
            t.killed = True
            return
        self.stream.write_replies.append(reply)
        self.fs.files[instr.file_id] = SimFile(data, reply & WORD)


def execute(programs: Sequence[Tuple[ToyProgram, ContextId]], quantum: int = 1,
            fs: Optional[SimFileSystem] = None, coprocessor=None,
            step_limit: int = DEFAULT_STEP_LIMIT) -> EventStream:
    """Run 1-4 programs to completion, streaming events into ``coprocessor``.

    ``fs`` is updated in place (file contents and tags persist).
    """
    if not 1 <= len(programs) <= 4:
        raise ValueError("execute takes 1 to 4 programs")
    if quantum < 1:
        raise ValueError("quantum must be at least 1")
    contexts = [ctx for _, ctx in programs]
    if len(set(contexts)) != len(contexts):
        raise ValueError("each program needs its own context id")
    fs = fs if fs is not None else SimFileSystem()
    cop = coprocessor if coprocessor is not None else NullCoprocessor()
    stream = EventStream(fs=fs)
    threads = [new_thread(p, ctx) for p, ctx in programs]
    stream.threads = threads
    runner = _Runner(threads, fs, cop, stream)

    stream.pft += ASYNC_BYTES
    cop.on_trace_bytes(ASYNC_BYTES)
    need_sync = [True] * len(threads)
    cur = 0
    since_switch = 0
    total = 0
    while True:
        t = threads[cur]
        if need_sync[cur]:
            runner.emit(ISync(t.pc, t.ctx))
            need_sync[cur] = False
        executed = runner.run_block(t)
        since_switch += executed
        total += executed
        if total > step_limit:
            raise RuntimeFault(f"step limit of {step_limit} instructions exceeded")
        alive = [k for k in range(len(threads)) if not threads[k].done]
        if not alive:
            break
        if t.done or (since_switch >= quantum and len(alive) > 1):
            if not t.done:
                need_sync[cur] = True
            cur = next(k for k in [(cur + j) % len(threads) for j in range(1, len(threads) + 1)] if k in alive)
            since_switch = 0
            continue
        runner.emit(BranchAddr(t.pc))
    return stream
