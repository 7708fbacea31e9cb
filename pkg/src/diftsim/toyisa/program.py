"""Toy RISC program model and its assembly-like text format.

Sixteen integer registers (``r11`` = fp, ``r13`` = sp, ``r14`` = lr,
``r15`` = pc), thirty-two 32-bit FP registers, 4-byte instructions.  ``r9`` is
reserved for the instrumentation port and never appears in application code.

Text format, one item per line (``;`` starts a comment)::

    .name stackcopy
    .text 0x10168            ; first instruction address
    .data 0x20000 0x100      ; mapped data segment (base, size)
    .stack 0x7f000000 0x1000 ; stack segment; sp starts at .sp or base+size
    .sp 0x7f000800
    .reg r2 0x20010          ; initial register value
    .word 0x20000 1 2 3      ; initial data words
    .float 0x20010 1.5
    .taint 0x20000 0x1       ; initial memory-word tag
    .taintreg r3 0x1         ; initial register tag (r0-r15 or s0-s31)
    .entry main
    .section lib             ; following blocks are library code (.section app ends it)
    main:
        mov r0, #1
        ldr r3, [sp, #4]
        str r3, [r2]
        b next
"""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

from ..errors import ProgramSyntaxError, RuntimeFault

FP, SP, LR, PC = 11, 13, 14, 15
RESERVED = 9
INSTR_SIZE = 4
PAGE_SHIFT = 12
ALU_OPS = ("add", "sub", "and", "or", "xor")
FALU_OPS = ("add", "sub", "mul")
_REG_ALIASES = {"fp": FP, "sp": SP, "lr": LR, "pc": PC}


@dataclass(frozen=True)
class MovImm:
    rd: int
    imm: int


@dataclass(frozen=True)
class Alu:
    op: str
    rd: int
    rn: int
    rm: Optional[int] = None
    imm: Optional[int] = None


@dataclass(frozen=True)
class Ldr:
    rt: int
    base: int
    offset: int = 0


@dataclass(frozen=True)
class Str:
    rt: int
    base: int
    offset: int = 0


@dataclass(frozen=True)
class FLdr:
    st: int
    base: int
    offset: int = 0


@dataclass(frozen=True)
class FStr:
    st: int
    base: int
    offset: int = 0


@dataclass(frozen=True)
class FAlu:
    op: str
    sd: int
    sn: int
    sm: int


@dataclass(frozen=True)
class B:
    target: str


@dataclass(frozen=True)
class Bcond:
    reg: int
    target: str


@dataclass(frozen=True)
class Call:
    target: str


@dataclass(frozen=True)
class Ret:
    pass


@dataclass(frozen=True)
class SysRead:
    file_id: str
    buf_reg: int
    len_reg: int


@dataclass(frozen=True)
class SysWrite:
    file_id: str
    buf_reg: int
    len_reg: int


@dataclass(frozen=True)
class InstrEmit:
    """The injected ``str rN, [r9]``: sends a register value to the instrumentation port."""

    reg: int


Instr = Union[MovImm, Alu, Ldr, Str, FLdr, FStr, FAlu, B, Bcond, Call, Ret, SysRead, SysWrite, InstrEmit]
MEMORY_OPS = (Ldr, Str, FLdr, FStr)
CONTROL_OPS = (B, Bcond, Call, Ret)


@dataclass
class Block:
    label: str
    instrs: List[Instr]
    lib: bool = False
    address: int = 0

    @property
    def end(self) -> int:
        return self.address + INSTR_SIZE * len(self.instrs)


@dataclass
class ToyProgram:
    name: str
    text_base: int
    blocks: List[Block]
    entry: str
    segments: List[Tuple[int, int]] = field(default_factory=list)
    stack: Optional[Tuple[int, int]] = None
    sp_init: Optional[int] = None
    regs_init: Dict[int, int] = field(default_factory=dict)
    words: Dict[int, int] = field(default_factory=dict)
    mem_taints: Dict[int, int] = field(default_factory=dict)
    reg_taints: Dict[str, int] = field(default_factory=dict)
    instrumented: Optional[str] = None
    origin: Optional[str] = None

    def __post_init__(self):
        self.layout()
        if self.origin is None:
            self.origin = self.fingerprint()

    def layout(self):
        address = self.text_base
        self._by_label = {}
        self._by_address = {}
        for block in self.blocks:
            block.address = address
            address = block.end
            if block.label in self._by_label:
                raise ProgramSyntaxError(f"duplicate label {block.label!r}")
            self._by_label[block.label] = block
            self._by_address[block.address] = block
        if self.blocks and self.entry not in self._by_label:
            raise ProgramSyntaxError(f"entry label {self.entry!r} is not defined")
        for block in self.blocks:
            for instr in block.instrs:
                target = getattr(instr, "target", None)
                if target is not None and target not in self._by_label:
                    raise ProgramSyntaxError(f"{block.label}: unknown branch target {target!r}")

    # -- queries ----------------------------------------------------------

    def label_address(self, label: str) -> int:
        return self._by_label[label].address

    def block_at(self, address: int) -> Block:
        try:
            return self._by_address[address]
        except KeyError:
            raise RuntimeFault(f"{self.name}: control transfer to {address:#x}, not a block start") from None

    def next_block_address(self, block: Block) -> int:
        return block.end

    @property
    def entry_address(self) -> int:
        return self.label_address(self.entry)

    @property
    def initial_sp(self) -> int:
        if self.sp_init is not None:
            return self.sp_init
        if self.stack is not None:
            return self.stack[0] + self.stack[1]
        return 0

    def instructions(self):
        """(address, instruction, block) for every instruction, in layout order."""
        for block in self.blocks:
            for i, instr in enumerate(block.instrs):
                yield block.address + INSTR_SIZE * i, instr, block

    @property
    def instruction_count(self) -> int:
        return sum(len(b.instrs) for b in self.blocks)

    @property
    def size_bytes(self) -> int:
        return INSTR_SIZE * self.instruction_count

    @property
    def code_range(self) -> Tuple[int, int]:
        return self.text_base, self.text_base + self.size_bytes

    def regions(self) -> List[Tuple[int, int]]:
        """Mapped (base, size) regions: code, data segments, stack."""
        out = [(self.text_base, max(self.size_bytes, INSTR_SIZE))]
        out.extend(self.segments)
        if self.stack is not None:
            out.append(self.stack)
        return out

    def pages(self) -> List[int]:
        vpns = set()
        for base, size in self.regions():
            if size > 0:
                vpns.update(range(base >> PAGE_SHIFT, ((base + size - 1) >> PAGE_SHIFT) + 1))
        return sorted(vpns)

    def fingerprint(self) -> str:
        text = f"{self.text_base:#x}\n{self.entry}\n{_body_text(self)}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def copy_with_blocks(self, blocks: List[Block], instrumented: Optional[str]) -> "ToyProgram":
        return ToyProgram(
            name=self.name, text_base=self.text_base, blocks=blocks, entry=self.entry,
            segments=list(self.segments), stack=self.stack, sp_init=self.sp_init,
            regs_init=dict(self.regs_init), words=dict(self.words), mem_taints=dict(self.mem_taints),
            reg_taints=dict(self.reg_taints), instrumented=instrumented, origin=self.origin,
        )


# -- formatting -------------------------------------------------------------

def _reg(n: int) -> str:
    return {FP: "fp", SP: "sp", LR: "lr", PC: "pc"}.get(n, f"r{n}")


def _imm(v: int) -> str:
    return f"#{v:#x}" if abs(v) > 255 else f"#{v}"


def _mem(base: int, offset: int) -> str:
    return f"[{_reg(base)}, {_imm(offset)}]" if offset else f"[{_reg(base)}]"


def format_instr(instr: Instr) -> str:
    if isinstance(instr, MovImm):
        return f"mov {_reg(instr.rd)}, {_imm(instr.imm)}"
    if isinstance(instr, Alu):
        last = _reg(instr.rm) if instr.rm is not None else _imm(instr.imm)
        return f"{instr.op} {_reg(instr.rd)}, {_reg(instr.rn)}, {last}"
    if isinstance(instr, Ldr):
        return f"ldr {_reg(instr.rt)}, {_mem(instr.base, instr.offset)}"
    if isinstance(instr, Str):
        return f"str {_reg(instr.rt)}, {_mem(instr.base, instr.offset)}"
    if isinstance(instr, FLdr):
        return f"fldr s{instr.st}, {_mem(instr.base, instr.offset)}"
    if isinstance(instr, FStr):
        return f"fstr s{instr.st}, {_mem(instr.base, instr.offset)}"
    if isinstance(instr, FAlu):
        return f"f{instr.op} s{instr.sd}, s{instr.sn}, s{instr.sm}"
    if isinstance(instr, B):
        return f"b {instr.target}"
    if isinstance(instr, Bcond):
        return f"bnz {_reg(instr.reg)}, {instr.target}"
    if isinstance(instr, Call):
        return f"call {instr.target}"
    if isinstance(instr, Ret):
        return "ret"
    if isinstance(instr, SysRead):
        return f"read {instr.file_id}, {_reg(instr.buf_reg)}, {_reg(instr.len_reg)}"
    if isinstance(instr, SysWrite):
        return f"write {instr.file_id}, {_reg(instr.buf_reg)}, {_reg(instr.len_reg)}"
    if isinstance(instr, InstrEmit):
        return f"str {_reg(instr.reg)}, [r9]"
    raise TypeError(f"not an instruction: {instr!r}")


def _body_text(p: ToyProgram) -> str:
    lines = []
    lib = False
    for block in p.blocks:
        if block.lib != lib:
            lines.append(".section lib" if block.lib else ".section app")
            lib = block.lib
        lines.append(f"{block.label}:")
        lines.extend(f"    {format_instr(i)}" for i in block.instrs)
    return "\n".join(lines)


def format_program(p: ToyProgram, listing: bool = False) -> str:
    """Render ``p`` in the text format; ``listing`` adds address comments."""
    lines = [f".name {p.name}", f".text {p.text_base:#x}"]
    if p.instrumented:
        lines.append(f".instrumented {p.instrumented}")
        lines.append(f".origin {p.origin}")
    for base, size in p.segments:
        lines.append(f".data {base:#x} {size:#x}")
    if p.stack is not None:
        lines.append(f".stack {p.stack[0]:#x} {p.stack[1]:#x}")
    if p.sp_init is not None:
        lines.append(f".sp {p.sp_init:#x}")
    for reg, value in sorted(p.regs_init.items()):
        lines.append(f".reg {_reg(reg)} {value:#x}")
    for addr, value in sorted(p.words.items()):
        lines.append(f".word {addr:#x} {value:#x}")
    for addr, tag in sorted(p.mem_taints.items()):
        lines.append(f".taint {addr:#x} {tag:#x}")
    for reg, tag in sorted(p.reg_taints.items()):
        lines.append(f".taintreg {reg} {tag:#x}")
    lines.append(f".entry {p.entry}")
    lib = False
    for block in p.blocks:
        if block.lib != lib:
            lines.append(".section lib" if block.lib else ".section app")
            lib = block.lib
        lines.append(f"{block.label}:" + (f"    ; {block.address:#x}" if listing else ""))
        for i, instr in enumerate(block.instrs):
            text = f"    {format_instr(instr)}"
            if listing:
                text = f"{text:<32}; {block.address + INSTR_SIZE * i:#x}"
            lines.append(text)
    return "\n".join(lines) + "\n"


# -- parsing ----------------------------------------------------------------

_MEM_RE = re.compile(r"^\[\s*(\w+)\s*(?:,\s*#\s*(-?\w+)\s*)?\]$")
_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*):$")


def _int(text: str) -> int:
    return int(text.strip().lstrip("#"), 0)


def parse_register(text: str, *, allow_reserved: bool = False) -> int:
    name = text.strip().lower()
    if name in _REG_ALIASES:
        return _REG_ALIASES[name]
    m = re.fullmatch(r"r(\d+)", name)
    if not m or int(m.group(1)) > 15:
        raise ProgramSyntaxError(f"bad integer register {text!r}")
    n = int(m.group(1))
    if n == RESERVED and not allow_reserved:
        raise ProgramSyntaxError("r9 is reserved for instrumentation")
    return n


def _fp_register(text: str) -> int:
    m = re.fullmatch(r"s(\d+)", text.strip().lower())
    if not m or int(m.group(1)) > 31:
        raise ProgramSyntaxError(f"bad FP register {text!r}")
    return int(m.group(1))


def _split_operands(rest: str) -> List[str]:
    parts, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur.strip())
    return parts


def _mem_operand(text: str) -> Tuple[int, int, bool]:
    m = _MEM_RE.match(text.strip())
    if not m:
        raise ProgramSyntaxError(f"bad memory operand {text!r}")
    base_name = m.group(1).lower()
    is_r9 = base_name == "r9"
    base = RESERVED if is_r9 else parse_register(base_name)
    offset = int(m.group(2), 0) if m.group(2) else 0
    return base, offset, is_r9


def parse_instr(text: str) -> Instr:
    mnemonic, _, rest = text.strip().partition(" ")
    mnemonic = mnemonic.lower()
    ops = _split_operands(rest)

    def want(n):
        if len(ops) != n:
            raise ProgramSyntaxError(f"{mnemonic} takes {n} operands: {text!r}")

    if mnemonic == "mov":
        want(2)
        rd = parse_register(ops[0])
        if rd == PC:
            raise ProgramSyntaxError("mov to pc is not allowed; use a branch")
        return MovImm(rd, _int(ops[1]) & 0xFFFFFFFF)
    if mnemonic in ALU_OPS:
        want(3)
        rd, rn = parse_register(ops[0]), parse_register(ops[1])
        if rd == PC:
            raise ProgramSyntaxError("ALU writes to pc are not allowed")
        if ops[2].startswith("#"):
            return Alu(mnemonic, rd, rn, imm=_int(ops[2]))
        return Alu(mnemonic, rd, rn, rm=parse_register(ops[2]))
    if mnemonic in ("ldr", "str"):
        want(2)
        base, offset, is_r9 = _mem_operand(ops[1])
        rt = parse_register(ops[0])
        if is_r9:
            if mnemonic != "str" or offset:
                raise ProgramSyntaxError("only 'str rN, [r9]' may use r9")
            return InstrEmit(rt)
        if rt == PC:
            raise ProgramSyntaxError("loads into pc are not allowed")
        return (Ldr if mnemonic == "ldr" else Str)(rt, base, offset)
    if mnemonic in ("fldr", "fstr"):
        want(2)
        base, offset, is_r9 = _mem_operand(ops[1])
        if is_r9:
            raise ProgramSyntaxError("FP accesses cannot use r9")
        return (FLdr if mnemonic == "fldr" else FStr)(_fp_register(ops[0]), base, offset)
    if mnemonic.startswith("f") and mnemonic[1:] in FALU_OPS:
        want(3)
        return FAlu(mnemonic[1:], *(_fp_register(o) for o in ops))
    if mnemonic == "b":
        want(1)
        return B(ops[0])
    if mnemonic == "bnz":
        want(2)
        return Bcond(parse_register(ops[0]), ops[1])
    if mnemonic == "call":
        want(1)
        return Call(ops[0])
    if mnemonic == "ret":
        want(0)
        return Ret()
    if mnemonic in ("read", "write"):
        want(3)
        cls = SysRead if mnemonic == "read" else SysWrite
        return cls(ops[0], parse_register(ops[1]), parse_register(ops[2]))
    raise ProgramSyntaxError(f"unknown mnemonic {mnemonic!r}")


def _reg_taint_name(text: str) -> str:
    name = text.strip().lower()
    if name.startswith("s"):
        return f"s{_fp_register(name)}"
    return f"r{parse_register(name)}"


def parse_program(text: str, name: str = "program") -> ToyProgram:
    header = dict(name=name, text_base=0x10000, segments=[], stack=None, sp_init=None, regs_init={},
                  words={}, mem_taints={}, reg_taints={}, instrumented=None, origin=None)
    entry = None
    blocks: List[Block] = []
    current: Optional[Block] = None
    lib = False
    auto = 0

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("."):
                key, *args = line.split()
                if key == ".name":
                    header["name"] = args[0]
                elif key == ".text":
                    header["text_base"] = _int(args[0])
                elif key == ".data":
                    header["segments"].append((_int(args[0]), _int(args[1])))
                elif key == ".stack":
                    header["stack"] = (_int(args[0]), _int(args[1]))
                elif key == ".sp":
                    header["sp_init"] = _int(args[0])
                elif key == ".reg":
                    header["regs_init"][parse_register(args[0])] = _int(args[1]) & 0xFFFFFFFF
                elif key == ".word":
                    base = _int(args[0])
                    for i, value in enumerate(args[1:]):
                        header["words"][base + 4 * i] = _int(value) & 0xFFFFFFFF
                elif key == ".float":
                    base = _int(args[0])
                    for i, value in enumerate(args[1:]):
                        header["words"][base + 4 * i] = struct.unpack("<I", struct.pack("<f", float(value)))[0]
                elif key == ".taint":
                    header["mem_taints"][_int(args[0]) & ~0x3] = _int(args[1])
                elif key == ".taintreg":
                    header["reg_taints"][_reg_taint_name(args[0])] = _int(args[1])
                elif key == ".entry":
                    entry = args[0]
                elif key == ".section":
                    if args[0] not in ("lib", "app"):
                        raise ProgramSyntaxError(f"unknown section {args[0]!r}")
                    if current is not None and current.instrs and not isinstance(current.instrs[-1], CONTROL_OPS):
                        raise ProgramSyntaxError("section change inside a basic block")
                    lib = args[0] == "lib"
                    current = None
                elif key == ".instrumented":
                    header["instrumented"] = args[0]
                elif key == ".origin":
                    header["origin"] = args[0]
                else:
                    raise ProgramSyntaxError(f"unknown directive {key}")
                continue
            m = _LABEL_RE.match(line)
            if m:
                if current is not None and current.instrs and not isinstance(current.instrs[-1], CONTROL_OPS):
                    raise ProgramSyntaxError(
                        f"block {current.label!r} falls into {m.group(1)!r} without a control transfer")
                current = Block(m.group(1), [], lib=lib)
                blocks.append(current)
                continue
            instr = parse_instr(line)
            if current is None or (current.instrs and isinstance(current.instrs[-1], CONTROL_OPS)):
                auto += 1
                current = Block(f".L{auto}", [], lib=lib)
                blocks.append(current)
            current.instrs.append(instr)
        except ProgramSyntaxError as exc:
            raise ProgramSyntaxError(f"line {lineno}: {exc}") from None
        except (IndexError, ValueError) as exc:
            raise ProgramSyntaxError(f"line {lineno}: {exc or 'missing operand'}") from None

    for block in blocks:
        if not block.instrs or not isinstance(block.instrs[-1], CONTROL_OPS):
            raise ProgramSyntaxError(f"block {block.label!r} does not end in a control transfer")
        for instr in block.instrs[:-1]:
            if isinstance(instr, CONTROL_OPS):
                raise ProgramSyntaxError(f"block {block.label!r} has a control transfer before its end")
    if not blocks:
        raise ProgramSyntaxError("program has no code")
    return ToyProgram(blocks=blocks, entry=entry or blocks[0].label, **header)
