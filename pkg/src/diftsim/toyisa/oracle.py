"""Reference taint interpreter.

Runs the toy programs directly and tracks a tag next to every register,
memory word and file, without traces, annotations, FIFOs or a tag MMU.  It
shares nothing with the coprocessor model except the policy register layout,
so agreement between the two is meaningful.

Scheduling follows the machine's rules: round-robin, switching only between
basic blocks once the thread has run ``quantum`` instructions.  A failed
check freezes that policy's tags; the thread it watches is stopped at its next
system call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..annot import PolicyRegisters
from ..errors import RuntimeFault
from ..pft import ContextId
from .instrument import parse_instrumentation_label
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

M32 = 0xFFFFFFFF
ARITH, LOADSTORE, BRANCH, FPCLASS = 0, 1, 2, 3


def _rule(policy: PolicyRegisters, cls: int, a: int, b: int, old: int) -> int:
    code = (policy.tpr >> (4 * cls)) & 0xF
    result = {0: 0, 1: a, 2: a | b, 3: a & b, 4: a ^ b, 5: max(a, b), 6: old}.get(code)
    if result is None:
        raise ValueError(f"undefined propagation rule {code}")
    return result & ((1 << policy.tag_width) - 1)


@dataclass
class OracleViolation:
    context: ContextId
    block_address: int
    check_kind: str
    checked_tag: int
    pc: int

    def verdict(self):
        return (self.context, self.block_address, self.check_kind, self.checked_tag)


@dataclass
class OracleUnit:
    policy: PolicyRegisters
    thread: int
    regs: List[int] = field(default_factory=lambda: [0] * 16)
    fregs: List[int] = field(default_factory=lambda: [0] * 32)
    mem: Dict[int, int] = field(default_factory=dict)
    violation: Optional[OracleViolation] = None

    def nonzero_mem(self) -> Dict[int, int]:
        return {a: t for a, t in sorted(self.mem.items()) if t}


@dataclass
class OracleThread:
    program: ToyProgram
    ctx: ContextId
    units: List[OracleUnit]
    regs: List[int] = field(default_factory=lambda: [0] * 16)
    fregs: List[int] = field(default_factory=lambda: [0] * 32)
    mem: Dict[int, int] = field(default_factory=dict)
    mapped: frozenset = frozenset()
    pc: int = 0
    exited: bool = False
    killed: bool = False
    opaque_lib: bool = False


@dataclass
class OracleResult:
    units: List[OracleUnit]
    threads: List[OracleThread]
    files: Dict[str, int]
    file_data: Dict[str, bytes]

    @property
    def violations(self):
        return [u.violation for u in self.units if u.violation is not None]


def _f32_op(op, a_bits, b_bits):
    a = np.uint32(a_bits).view(np.float32)
    b = np.uint32(b_bits).view(np.float32)
    with np.errstate(all="ignore"):
        r = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b, dtype=np.float32)
    return int(np.float32(r).view(np.uint32))


class _Interp:
    def __init__(self, threads: List[OracleThread], files: Dict[str, Tuple[bytes, int]]):
        self.threads = threads
        self.files = files

    # architectural helpers
    def _check(self, t: OracleThread, address: int):
        if address & 3:
            raise RuntimeFault(f"unaligned word access at {address:#010x}")
        if (address >> 12) not in t.mapped:
            raise RuntimeFault(f"access to unmapped address {address:#010x}")

    def load(self, t, address):
        self._check(t, address)
        return t.mem.get(address, 0)

    def store(self, t, address, value):
        self._check(t, address)
        t.mem[address] = value & M32

    def byte_range_check(self, t, address, count):
        for a in range(address, address + count):
            if (a >> 12) not in t.mapped:
                raise RuntimeFault(f"access to unmapped address {a:#010x}")

    def read_bytes(self, t, address, count):
        self.byte_range_check(t, address, count)
        out = bytearray()
        for a in range(address, address + count):
            out.append((t.mem.get(a & ~3, 0) >> (8 * (a & 3))) & 0xFF)
        return bytes(out)

    def write_bytes(self, t, address, data):
        self.byte_range_check(t, address, len(data))
        for i, byte in enumerate(data):
            a = address + i
            word = t.mem.get(a & ~3, 0)
            shift = 8 * (a & 3)
            t.mem[a & ~3] = (word & ~(0xFF << shift) & M32) | (byte << shift)

    # tag helpers
    def _flag(self, t: OracleThread, unit: OracleUnit, cls: int, checks, block_address: int, pc: int):
        enabled = (unit.policy.tcr >> (4 * cls)) & 0x7
        for bit, kind, tag in checks:
            if enabled & bit and tag & unit.policy.check_mask:
                unit.violation = OracleViolation(t.ctx, block_address, kind, tag, pc)
                return

    def tags(self, t: OracleThread, block, instr, pc: int):
        if t.opaque_lib and block.lib:
            return
        for unit in t.units:
            if unit.violation is not None:
                continue
            self.unit_tags(t, unit, block.address, instr, pc)

    def unit_tags(self, t, u: OracleUnit, block_address, instr, pc):
        checks = []
        cls = ARITH
        if isinstance(instr, MovImm):
            u.regs[instr.rd] = 0
            checks = [(4, "dst", 0)]
        elif isinstance(instr, Alu):
            x = u.regs[instr.rn]
            y = u.regs[instr.rm] if instr.rm is not None else 0
            u.regs[instr.rd] = _rule(u.policy, ARITH, x, y, u.regs[instr.rd])
            checks = [(1, "src1", x), (2, "src2", y), (4, "dst", u.regs[instr.rd])]
        elif isinstance(instr, FAlu):
            cls = FPCLASS
            x, y = u.fregs[instr.sn], u.fregs[instr.sm]
            u.fregs[instr.sd] = _rule(u.policy, FPCLASS, x, y, u.fregs[instr.sd])
            checks = [(1, "src1", x), (2, "src2", y), (4, "dst", u.fregs[instr.sd])]
        elif isinstance(instr, (Ldr, FLdr, Str, FStr)):
            fp = isinstance(instr, (FLdr, FStr))
            cls = FPCLASS if fp else LOADSTORE
            bank = u.fregs if fp else u.regs
            r = instr.st if fp else instr.rt
            base_value = pc if instr.base == PC else t.regs[instr.base]
            address = (base_value + instr.offset) & M32
            base_tag = u.regs[instr.base]
            if isinstance(instr, (Ldr, FLdr)):
                loaded = u.mem.get(address, 0)
                bank[r] = _rule(u.policy, cls, loaded, bank[r], bank[r])
                checks = [(1, "src1", loaded), (2, "src2", base_tag), (4, "dst", base_tag)]
            else:
                value = bank[r]
                old = u.mem.get(address, 0)
                u.mem[address] = _rule(u.policy, cls, value, old, old)
                checks = [(1, "src1", value), (2, "src2", base_tag), (4, "dst", u.mem[address])]
        elif isinstance(instr, Call):
            cls = BRANCH
            u.regs[LR] = 0
            checks = [(4, "dst", 0)]
        else:
            return
        self._flag(t, u, cls, checks, block_address, pc)

    # system calls
    def sys_read(self, t: OracleThread, instr: SysRead):
        if instr.file_id not in self.files:
            raise RuntimeFault(f"no such file {instr.file_id!r}")
        data, tag = self.files[instr.file_id]
        buf = t.regs[instr.buf_reg]
        data = data[:t.regs[instr.len_reg]]
        self.byte_range_check(t, buf, len(data))
        if any(u.violation is not None for u in t.units):
            t.killed = True
            return
        for u in t.units:
            for a in _words(buf, len(data)):
                u.mem[a] = tag & ((1 << u.policy.tag_width) - 1)
        self.write_bytes(t, buf, data)

    def sys_write(self, t: OracleThread, instr: SysWrite):
        buf, count = t.regs[instr.buf_reg], t.regs[instr.len_reg]
        data = self.read_bytes(t, buf, count)
        if any(u.violation is not None for u in t.units):
            t.killed = True
            return
        folded = 0
        for a in _words(buf, count):
            folded |= t.units[0].mem.get(a, 0)
        self.files[instr.file_id] = (data, folded)

    def run_block(self, t: OracleThread) -> int:
        block = t.program.block_at(t.pc)
        count = 0
        for i, instr in enumerate(block.instrs):
            pc = block.address + INSTR_SIZE * i
            count += 1
            regs = t.regs

            def val(r):
                return pc if r == PC else regs[r]

            if isinstance(instr, InstrEmit):
                continue
            if isinstance(instr, SysRead):
                self.sys_read(t, instr)
                if t.killed:
                    return count
                continue
            if isinstance(instr, SysWrite):
                self.sys_write(t, instr)
                if t.killed:
                    return count
                continue
            # tags first: they read base registers before the instruction changes them
            self.tags(t, block, instr, pc)
            if isinstance(instr, MovImm):
                regs[instr.rd] = instr.imm & M32
            elif isinstance(instr, Alu):
                a = val(instr.rn)
                b = val(instr.rm) if instr.rm is not None else instr.imm & M32
                regs[instr.rd] = {
                    "add": a + b, "sub": a - b, "and": a & b, "or": a | b, "xor": a ^ b,
                }[instr.op] & M32
            elif isinstance(instr, Ldr):
                regs[instr.rt] = self.load(t, (val(instr.base) + instr.offset) & M32)
            elif isinstance(instr, Str):
                self.store(t, (val(instr.base) + instr.offset) & M32, val(instr.rt))
            elif isinstance(instr, FLdr):
                t.fregs[instr.st] = self.load(t, (val(instr.base) + instr.offset) & M32)
            elif isinstance(instr, FStr):
                self.store(t, (val(instr.base) + instr.offset) & M32, t.fregs[instr.st])
            elif isinstance(instr, FAlu):
                t.fregs[instr.sd] = _f32_op(instr.op, t.fregs[instr.sn], t.fregs[instr.sm])
            elif isinstance(instr, B):
                t.pc = t.program.label_address(instr.target)
            elif isinstance(instr, Bcond):
                t.pc = t.program.label_address(instr.target) if regs[instr.reg] else block.end
            elif isinstance(instr, Call):
                regs[LR] = block.end
                t.pc = t.program.label_address(instr.target)
            elif isinstance(instr, Ret):
                if regs[LR] == 0:
                    t.exited = True
                else:
                    t.pc = regs[LR]
        return count


def _words(address: int, count: int):
    if count <= 0:
        return []
    return list(range(address & ~3, ((address + count - 1) & ~3) + 4, 4))


def _pages(p: ToyProgram) -> frozenset:
    out = set()
    for base, size in p.regions():
        if size > 0:
            out.update(range(base >> 12, ((base + size - 1) >> 12) + 1))
    return frozenset(out)


def _seed_unit(unit: OracleUnit, p: ToyProgram):
    mask = (1 << unit.policy.tag_width) - 1
    for name, tag in p.reg_taints.items():
        bank = unit.fregs if name.startswith("s") else unit.regs
        bank[int(name[1:])] = tag & mask
    for address, tag in p.mem_taints.items():
        unit.mem[address] = tag & mask


def oracle_taint(programs: Sequence[Tuple[ToyProgram, ContextId]], quantum: int,
                 files: Dict[str, Tuple[bytes, int]], policies: Sequence[PolicyRegisters],
                 multi_policy: bool = False, step_limit: int = 1_000_000) -> OracleResult:
    """Final tags of every policy unit after running ``programs``.

    ``programs`` are the instrumented programs (their layout decides block
    addresses and scheduling).  ``files`` maps file id to (bytes, tag).
    ``policies`` hold the effective rule and check tables: one per thread, a
    single shared one, or (``multi_policy``) several watching one thread.
    """
    files = dict(files)
    threads: List[OracleThread] = []
    units: List[OracleUnit] = []
    if multi_policy and len(programs) != 1:
        raise ValueError("multi-policy runs watch exactly one program")
    for k, (p, ctx) in enumerate(programs):
        t = OracleThread(program=p, ctx=ctx, units=[], mapped=_pages(p), pc=p.entry_address)
        if p.instrumented:
            _, library = parse_instrumentation_label(p.instrumented)
            t.opaque_lib = not library
        for r, v in p.regs_init.items():
            t.regs[r] = v & M32
        t.regs[SP] = p.initial_sp & M32
        for a, v in p.words.items():
            t.mem[a] = v & M32
        chosen = policies if multi_policy else [policies[k] if len(policies) > 1 else policies[0]]
        for pol in chosen:
            unit = OracleUnit(policy=pol, thread=k)
            _seed_unit(unit, p)
            t.units.append(unit)
            units.append(unit)
        threads.append(t)

    interp = _Interp(threads, files)
    cur, since, total = 0, 0, 0
    n = len(threads)
    while True:
        t = threads[cur]
        ran = interp.run_block(t)
        since += ran
        total += ran
        if total > step_limit:
            raise RuntimeFault(f"step limit of {step_limit} instructions exceeded")
        live = [k for k in range(n) if not (threads[k].exited or threads[k].killed)]
        if not live:
            break
        if cur not in live or (since >= quantum and len(live) > 1):
            cur = min(live, key=lambda k: (k - cur - 1) % n)
            since = 0
    return OracleResult(
        units=units,
        threads=threads,
        files={k: v[1] for k, v in sorted(files.items())},
        file_data={k: v[0] for k, v in sorted(files.items())},
    )
