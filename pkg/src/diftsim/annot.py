"""Coprocessor annotation ISA, its 64-bit encoding, the per-block annotation
store with its ``TANN`` file format, and the TPR/TCR policy registers.

Encoding, most significant field first::

    opcode[6] | class[2] | dst[6] | src1[6] | src2[6] | aluop[6] | imm[32]

Register ids: 0-15 tag the integer registers r0-r15, 16-47 tag s0-s31 and
48-63 name the general registers G0-G15.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Mapping, Tuple

from .errors import (
    CorruptHeader,
    InvalidOperandRange,
    InvalidRuleEncoding,
    MissingBlock,
    PolicySyntaxError,
    TruncatedBlock,
    UnknownOpcode,
)

TRF_BASE = 0
TRF_FP_BASE = 16
GRF_BASE = 48
WORD_MASK = 0xFFFFFFFF


class Opcode(enum.IntEnum):
    TagRImm = 0
    TagRR = 1
    TagMR = 2
    TagRRR = 3
    TagRRR2 = 4
    TagMTR = 5
    TagTRM = 6
    TagMTR2 = 7
    TagTRM2 = 8
    TagITR = 9
    TagTRI = 10
    TagITR2 = 11
    TagTRI2 = 12
    TagKTR = 13
    TagTRK = 14
    GrfOp = 15
    KernelMsg = 16


# KernelMsg immediates: which system call the marker stands for
KERNEL_READ = 0
KERNEL_WRITE = 1


RUNTIME_OPCODES = frozenset({Opcode.TagRRR, Opcode.TagMTR, Opcode.TagTRM, Opcode.TagITR, Opcode.TagTRI})
COMPILE_TIME_RULE_OPCODES = frozenset(
    {Opcode.TagRRR2, Opcode.TagMTR2, Opcode.TagTRM2, Opcode.TagITR2, Opcode.TagTRI2})
STORE_OPCODES = frozenset({Opcode.TagMR, Opcode.TagMTR, Opcode.TagMTR2, Opcode.TagITR, Opcode.TagITR2})
LOAD_OPCODES = frozenset({Opcode.TagTRM, Opcode.TagTRM2, Opcode.TagTRI, Opcode.TagTRI2})
INSTRUMENTED_OPCODES = frozenset({Opcode.TagITR, Opcode.TagTRI, Opcode.TagITR2, Opcode.TagTRI2})

# runtime opcode -> compile-time twin
COMPILE_TIME_TWIN = {
    Opcode.TagRRR: Opcode.TagRRR2,
    Opcode.TagMTR: Opcode.TagMTR2,
    Opcode.TagTRM: Opcode.TagTRM2,
    Opcode.TagITR: Opcode.TagITR2,
    Opcode.TagTRI: Opcode.TagTRI2,
}


class InstrClass(enum.IntEnum):
    ArithLogic = 0
    LoadStore = 1
    Branch = 2
    FpLoadStore = 3


class Rule(enum.IntEnum):
    """Tag propagation rule; ``a``/``b`` are source tags, ``old`` the destination's."""

    Zero = 0
    CopySrc1 = 1
    Or = 2
    And = 3
    Xor = 4
    Max = 5
    KeepDest = 6

    def apply(self, a: int, b: int, old: int) -> int:
        if self is Rule.Zero:
            return 0
        if self is Rule.CopySrc1:
            return a
        if self is Rule.Or:
            return a | b
        if self is Rule.And:
            return a & b
        if self is Rule.Xor:
            return a ^ b
        if self is Rule.Max:
            return max(a, b)
        return old


class GrfAlu(enum.IntEnum):
    add = 0
    sub = 1
    set = 2


class CheckFlags(enum.IntFlag):
    NONE = 0
    SRC1 = 1
    SRC2 = 2
    DST = 4


CHECK_NAMES = {CheckFlags.SRC1: "src1", CheckFlags.SRC2: "src2", CheckFlags.DST: "dst"}


# operand kinds per opcode: 'tag' = TRF/TRF_FP id, 'grf' = GRF id, None = unused (must be 0)
_OPERANDS = {
    Opcode.TagRImm: ("tag", None, None),
    Opcode.TagRR: ("tag", "tag", None),
    Opcode.TagMR: ("tag", "grf", None),
    Opcode.TagRRR: ("tag", "tag", "tag"),
    Opcode.TagRRR2: ("tag", "tag", "tag"),
    Opcode.TagMTR: ("tag", "grf", "tag"),
    Opcode.TagTRM: ("tag", "grf", "tag"),
    Opcode.TagMTR2: ("tag", "grf", "tag"),
    Opcode.TagTRM2: ("tag", "grf", "tag"),
    Opcode.TagITR: ("tag", None, "tag"),
    Opcode.TagTRI: ("tag", None, "tag"),
    Opcode.TagITR2: ("tag", None, "tag"),
    Opcode.TagTRI2: ("tag", None, "tag"),
    Opcode.TagKTR: (None, "tag", None),
    Opcode.TagTRK: ("tag", None, None),
    Opcode.GrfOp: ("grf", "grf", None),
    Opcode.KernelMsg: (None, None, None),
}


_IMM_OPCODES = frozenset({Opcode.TagRImm, Opcode.GrfOp, Opcode.KernelMsg}) | LOAD_OPCODES | (STORE_OPCODES - {Opcode.TagMR})


def reg_name(reg_id: int) -> str:
    if reg_id < TRF_FP_BASE:
        return f"T{reg_id}"
    if reg_id < GRF_BASE:
        return f"TF{reg_id - TRF_FP_BASE}"
    return f"G{reg_id - GRF_BASE}"


def tag_reg(reg: int) -> int:
    return TRF_BASE + reg


def fp_tag_reg(reg: int) -> int:
    return TRF_FP_BASE + reg


def grf_reg(reg: int) -> int:
    return GRF_BASE + reg


@dataclass(frozen=True)
class Annotation:
    opcode: Opcode
    cls: InstrClass = InstrClass.ArithLogic
    dst: int = 0
    src1: int = 0
    src2: int = 0
    aluop: int = 0
    imm: int = 0

    def validate(self) -> "Annotation":
        kinds = _OPERANDS[self.opcode]
        for name, kind in zip(("dst", "src1", "src2"), kinds):
            value = getattr(self, name)
            if kind is None:
                ok = value == 0
            elif kind == "tag":
                ok = 0 <= value < GRF_BASE
            else:
                ok = GRF_BASE <= value < 64
            if not ok:
                raise InvalidOperandRange(
                    f"{self.opcode.name}: {name}={value} is outside the {kind or 'unused'} range")
        if self.opcode in COMPILE_TIME_RULE_OPCODES:
            if self.aluop not in Rule._value2member_map_:
                raise InvalidOperandRange(f"{self.opcode.name}: bad rule field {self.aluop}")
        elif self.opcode is Opcode.GrfOp:
            if self.aluop not in GrfAlu._value2member_map_:
                raise InvalidOperandRange(f"GrfOp: bad alu field {self.aluop}")
        elif self.aluop:
            raise InvalidOperandRange(f"{self.opcode.name}: aluop field must be 0")
        if self.opcode is Opcode.KernelMsg and self.imm not in (KERNEL_READ, KERNEL_WRITE):
            raise InvalidOperandRange(f"KernelMsg: immediate must be {KERNEL_READ} or {KERNEL_WRITE}")
        if not -(1 << 31) <= self.imm < 1 << 31:
            raise InvalidOperandRange(f"{self.opcode.name}: immediate {self.imm} exceeds 32 bits")
        return self

    @property
    def is_runtime(self) -> bool:
        return self.opcode in RUNTIME_OPCODES

    def __str__(self):
        op = self.opcode
        text = op.name
        if op in RUNTIME_OPCODES:
            text += f" {self.cls.name}"
        elif op in COMPILE_TIME_RULE_OPCODES:
            text += f" {Rule(self.aluop).name}"
        elif op is Opcode.GrfOp:
            text += f" {GrfAlu(self.aluop).name}"
        names = [reg_name(getattr(self, f)) for f, k in zip(("dst", "src1", "src2"), _OPERANDS[op]) if k]
        if op in _IMM_OPCODES:
            names.append(f"#{self.imm}")
        return f"{text} {','.join(names)}"


def encode_annotation(a: Annotation) -> int:
    a.validate()
    return (
        (int(a.opcode) << 58)
        | (int(a.cls) << 56)
        | (a.dst << 50)
        | (a.src1 << 44)
        | (a.src2 << 38)
        | (a.aluop << 32)
        | (a.imm & WORD_MASK)
    )


def decode_annotation(word: int) -> Annotation:
    if not 0 <= word < 1 << 64:
        raise InvalidOperandRange(f"annotation word {word:#x} exceeds 64 bits")
    raw_opcode = word >> 58
    if raw_opcode not in Opcode._value2member_map_:
        raise UnknownOpcode(f"opcode field {raw_opcode}")
    imm = word & WORD_MASK
    if imm & 0x80000000:
        imm -= 1 << 32
    return Annotation(
        opcode=Opcode(raw_opcode),
        cls=InstrClass((word >> 56) & 0x3),
        dst=(word >> 50) & 0x3F,
        src1=(word >> 44) & 0x3F,
        src2=(word >> 38) & 0x3F,
        aluop=(word >> 32) & 0x3F,
        imm=imm,
    ).validate()


# -- annotation store -------------------------------------------------------

TANN_MAGIC = b"TANN"
TANN_VERSION = 1


class AnnotationStore:
    """Basic-block start address -> annotation sequence."""

    def __init__(self, blocks: Mapping[int, Iterable[Annotation]] = ()):
        self._blocks: Dict[int, Tuple[Annotation, ...]] = {}
        for address, annotations in dict(blocks).items():
            self.add_block(address, annotations)

    def add_block(self, address: int, annotations: Iterable[Annotation]):
        if address & 0x3 or not 0 <= address <= WORD_MASK:
            raise InvalidOperandRange(f"block address {address:#x} is not word aligned")
        self._blocks[address] = tuple(a.validate() for a in annotations)

    def merge(self, other: "AnnotationStore") -> "AnnotationStore":
        for address, annotations in other.items():
            if address in self._blocks and self._blocks[address] != annotations:
                raise ValueError(f"conflicting annotations for block {address:#x}")
            self._blocks[address] = annotations
        return self

    def items(self):
        return sorted(self._blocks.items())

    def __contains__(self, address):
        return address in self._blocks

    def __len__(self):
        return len(self._blocks)

    def __eq__(self, other):
        return isinstance(other, AnnotationStore) and self._blocks == other._blocks

    def __repr__(self):
        return f"AnnotationStore({len(self._blocks)} blocks)"


def lookup_block(store: AnnotationStore, address: int) -> Tuple[Annotation, ...]:
    try:
        return store._blocks[address]
    except KeyError:
        raise MissingBlock(
            f"no annotations for traced block {address:#010x}; trace and static analysis disagree"
        ) from None


def save_store(store: AnnotationStore) -> bytes:
    out = [struct.pack("<4sIII", TANN_MAGIC, TANN_VERSION, len(store), 0)]
    for address, annotations in store.items():
        out.append(struct.pack("<II", address, len(annotations)))
        out.append(struct.pack(f"<{len(annotations)}Q", *(encode_annotation(a) for a in annotations)))
    return b"".join(out)


def load_store(data: bytes) -> AnnotationStore:
    if len(data) < 16:
        raise CorruptHeader("annotation file shorter than its header")
    magic, version, count, _reserved = struct.unpack_from("<4sIII", data)
    if magic != TANN_MAGIC:
        raise CorruptHeader(f"bad magic {magic!r}")
    if version != TANN_VERSION:
        raise CorruptHeader(f"unsupported version {version}")
    store = AnnotationStore()
    pos = 16
    for _ in range(count):
        if len(data) - pos < 8:
            raise TruncatedBlock(f"block header cut short at offset {pos}")
        address, n = struct.unpack_from("<II", data, pos)
        pos += 8
        if len(data) - pos < 8 * n:
            raise TruncatedBlock(f"block {address:#x} declares {n} annotations, file ends early")
        words = struct.unpack_from(f"<{n}Q", data, pos)
        pos += 8 * n
        if address in store:
            raise CorruptHeader(f"duplicate block {address:#x}")
        store.add_block(address, [decode_annotation(w) for w in words])
    if pos != len(data):
        raise CorruptHeader(f"{len(data) - pos} trailing bytes after the last block")
    return store


# -- policy registers -------------------------------------------------------

class PolicyMode(enum.Enum):
    RUNTIME = "runtime"
    COMPILE_TIME = "compile"


@dataclass(frozen=True)
class PolicyRegisters:
    mode: PolicyMode = PolicyMode.RUNTIME
    tpr: int = 0
    tcr: int = 0
    check_mask: int = 0
    tag_width: int = 32

    def __post_init__(self):
        if not 1 <= self.tag_width <= 32:
            raise ValueError(f"tag width {self.tag_width} outside 1..32")
        for name in ("tpr", "tcr", "check_mask"):
            if not 0 <= getattr(self, name) <= WORD_MASK:
                raise ValueError(f"{name} does not fit in 32 bits")

    @property
    def width_mask(self) -> int:
        return (1 << self.tag_width) - 1

    @classmethod
    def build(cls, rules: Mapping[InstrClass, Rule] = None, checks: Mapping[InstrClass, int] = None,
              **kwargs) -> "PolicyRegisters":
        tpr = sum(int(rule) << (4 * int(c)) for c, rule in (rules or {}).items())
        tcr = sum((int(flags) & 0x7) << (4 * int(c)) for c, flags in (checks or {}).items())
        return cls(tpr=tpr, tcr=tcr, **kwargs)

    def rules(self) -> Dict[InstrClass, Rule]:
        return {c: tpr_rule(self, c) for c in InstrClass}


def tpr_rule(p: PolicyRegisters, c: InstrClass) -> Rule:
    field_value = (p.tpr >> (4 * int(c))) & 0xF
    try:
        return Rule(field_value)
    except ValueError:
        raise InvalidRuleEncoding(f"TPR field {field_value} for class {InstrClass(c).name}") from None


def tcr_checks(p: PolicyRegisters, c: InstrClass) -> CheckFlags:
    return CheckFlags((p.tcr >> (4 * int(c))) & 0x7)


DEFAULT_POLICY = PolicyRegisters.build(
    rules={
        InstrClass.ArithLogic: Rule.Or,
        InstrClass.LoadStore: Rule.CopySrc1,
        InstrClass.Branch: Rule.KeepDest,
        InstrClass.FpLoadStore: Rule.Or,
    },
    tag_width=32,
)


_CLASS_KEYS = {
    "arith": InstrClass.ArithLogic,
    "loadstore": InstrClass.LoadStore,
    "branch": InstrClass.Branch,
    "fp": InstrClass.FpLoadStore,
}


def _check_text(flags: CheckFlags) -> str:
    names = [CHECK_NAMES[f] for f in (CheckFlags.SRC1, CheckFlags.SRC2, CheckFlags.DST) if flags & f]
    return ",".join(names) or "none"


def format_policy(p: PolicyRegisters) -> str:
    lines = [f"mode={p.mode.value}", f"tag_width={p.tag_width}", f"check_mask={p.check_mask:#x}"]
    for key, c in _CLASS_KEYS.items():
        lines.append(f"tpr.{key}={tpr_rule(p, c).name.lower()}")
    for key, c in _CLASS_KEYS.items():
        lines.append(f"tcr.{key}={_check_text(tcr_checks(p, c))}")
    return "\n".join(lines) + "\n"


def parse_policy(text: str) -> PolicyRegisters:
    """Parse the line-oriented policy format written by ``format_policy``.

    Missing ``tpr.*`` entries fall back to the default taint rules; missing
    ``tcr.*`` entries disable checks for that class.
    """
    rules = DEFAULT_POLICY.rules()
    checks = {c: CheckFlags.NONE for c in InstrClass}
    kwargs = {}
    rule_names = {r.name.lower(): r for r in Rule}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise PolicySyntaxError(f"line {lineno}: expected key=value")
        try:
            if key == "mode":
                kwargs["mode"] = PolicyMode(value)
            elif key == "tag_width":
                kwargs["tag_width"] = int(value, 0)
            elif key == "check_mask":
                kwargs["check_mask"] = int(value, 0)
            elif key.startswith("tpr."):
                rules[_CLASS_KEYS[key[4:]]] = rule_names[value.lower()]
            elif key.startswith("tcr."):
                flags = CheckFlags.NONE
                for part in value.split(","):
                    part = part.strip().lower()
                    if part and part != "none":
                        flags |= {"src1": CheckFlags.SRC1, "src2": CheckFlags.SRC2, "dst": CheckFlags.DST}[part]
                checks[_CLASS_KEYS[key[4:]]] = flags
            else:
                raise PolicySyntaxError(f"line {lineno}: unknown key {key!r}")
        except (KeyError, ValueError) as exc:
            raise PolicySyntaxError(f"line {lineno}: bad value {value!r} for {key}") from exc
    try:
        return PolicyRegisters.build(rules=rules, checks=checks, **kwargs)
    except ValueError as exc:
        raise PolicySyntaxError(str(exc)) from exc


def with_propagation_of(policy: PolicyRegisters, source: PolicyRegisters) -> PolicyRegisters:
    """``policy`` with its rule table replaced by ``source``'s (compiled-in rules)."""
    return replace(policy, tpr=source.tpr)
