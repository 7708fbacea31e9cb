"""Tag Management Core: executes annotations for one thread under one policy.

Each annotation is one atomic step. Propagation happens first, then the
class's TCR checks inspect the named operands (the destination check sees the
freshly written tag). A failed check freezes the state.

Checked operands per annotation kind:

=============  ====================  ==================  ======================
kind           src1                  src2                dst
=============  ====================  ==================  ======================
register ALU   first source tag      second source tag   new destination tag
TagRImm/TagRR  source tag (RR)       -                   new destination tag
store          register tag stored   base register tag   new memory tag
load           memory tag loaded     base register tag   base register tag
TagKTR         register tag sent     -                   -
TagTRK         memory tag fetched    -                   new register tag
=============  ====================  ==================  ======================

For loads the third check bit inspects the address operand rather than the
register written, so a "store check" policy does not fire on plain reads.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .annot import (
    CHECK_NAMES,
    GRF_BASE,
    INSTRUMENTED_OPCODES,
    LOAD_OPCODES,
    STORE_OPCODES,
    TRF_FP_BASE,
    Annotation,
    CheckFlags,
    GrfAlu,
    InstrClass,
    Opcode,
    PolicyRegisters,
    Rule,
    tcr_checks,
    tpr_rule,
)
from .errors import FifoEmpty, FifoOverflow, HaltedState, InvalidOperandRange
from .pft import ContextId
from .tagmem import TagSpace

FIFO_DEPTH = 16
WORD = 0xFFFFFFFF


class Fifo:
    def __init__(self, name: str, depth: int = FIFO_DEPTH):
        self.name = name
        self.depth = depth
        self._items = deque()
        self.high_water = 0

    def push(self, value: int):
        if len(self._items) >= self.depth:
            raise FifoOverflow(f"{self.name} FIFO full ({self.depth} entries)")
        self._items.append(value & WORD)
        self.high_water = max(self.high_water, len(self._items))

    def pop(self) -> int:
        if not self._items:
            raise FifoEmpty(f"{self.name} FIFO empty")
        return self._items.popleft()

    def __len__(self):
        return len(self._items)


@dataclass
class Fifos:
    instrumentation: Fifo = field(default_factory=lambda: Fifo("instrumentation"))
    ps2pl: Fifo = field(default_factory=lambda: Fifo("ps2pl"))
    pl2ps: Fifo = field(default_factory=lambda: Fifo("pl2ps"))


@dataclass(frozen=True)
class Violation:
    slot: int
    context: Optional[ContextId]
    block_address: int
    annotation_index: Optional[int]
    checked_tag: int
    check_kind: str
    pc: Optional[int] = None  # instruction address; only the oracle knows it

    def verdict(self):
        """Fields that pipeline and oracle must agree on."""
        return (self.context, self.block_address, self.check_kind, self.checked_tag)


@dataclass
class TmcState:
    trf: List[int] = field(default_factory=lambda: [0] * 16)
    trf_fp: List[int] = field(default_factory=lambda: [0] * 32)
    grf: List[int] = field(default_factory=lambda: [0] * 16)
    halted: bool = False
    slot: int = 0
    context: Optional[ContextId] = None
    violation: Optional[Violation] = None
    executed: int = 0
    instrumentation_pops: int = 0

    def get(self, reg_id: int) -> int:
        if reg_id < TRF_FP_BASE:
            return self.trf[reg_id]
        if reg_id < GRF_BASE:
            return self.trf_fp[reg_id - TRF_FP_BASE]
        raise InvalidOperandRange(f"register id {reg_id} is not a tag register")

    def set(self, reg_id: int, value: int):
        if reg_id < TRF_FP_BASE:
            self.trf[reg_id] = value
        elif reg_id < GRF_BASE:
            self.trf_fp[reg_id - TRF_FP_BASE] = value
        else:
            raise InvalidOperandRange(f"register id {reg_id} is not a tag register")


def grf_op(state: TmcState, op: GrfAlu, dst: int, src: int, imm: int) -> TmcState:
    """General-register maintenance; ``dst``/``src`` are GRF indices 0-15."""
    if not (0 <= dst < 16 and 0 <= src < 16):
        raise InvalidOperandRange(f"GRF index out of range: G{dst}, G{src}")
    op = GrfAlu(op)
    if op is GrfAlu.set:
        state.grf[dst] = imm & WORD
    elif op is GrfAlu.add:
        state.grf[dst] = (state.grf[src] + imm) & WORD
    else:
        state.grf[dst] = (state.grf[src] - imm) & WORD
    return state


def needs_instrumentation(a: Annotation) -> bool:
    return a.opcode in INSTRUMENTED_OPCODES


def _rule_for(a: Annotation, policy: PolicyRegisters) -> Rule:
    if a.is_runtime:
        return tpr_rule(policy, a.cls)
    return Rule(a.aluop)


def execute_annotation(state: TmcState, a: Annotation, policy: PolicyRegisters, fifos: Fifos,
                       tags: TagSpace, *, block_address: int = 0, index: int = 0) -> Optional[Violation]:
    """Run one annotation; returns the Violation it raised, if any."""
    if state.halted:
        raise HaltedState(f"TMC for slot {state.slot} halted after a violation")
    mask = policy.width_mask
    op = a.opcode
    checked: Dict[CheckFlags, int] = {}

    if op is Opcode.GrfOp:
        grf_op(state, GrfAlu(a.aluop), a.dst - GRF_BASE, a.src1 - GRF_BASE, a.imm)
        state.executed += 1
        return None

    if op is Opcode.TagRImm:
        new = a.imm & mask
        state.set(a.dst, new)
        checked[CheckFlags.DST] = new
    elif op is Opcode.TagRR:
        src = state.get(a.src1)
        new = src & mask
        state.set(a.dst, new)
        checked[CheckFlags.SRC1] = src
        checked[CheckFlags.DST] = new
    elif op in (Opcode.TagRRR, Opcode.TagRRR2):
        x, y = state.get(a.src1), state.get(a.src2)
        new = _rule_for(a, policy).apply(x, y, state.get(a.dst)) & mask
        state.set(a.dst, new)
        checked.update({CheckFlags.SRC1: x, CheckFlags.SRC2: y, CheckFlags.DST: new})
    elif op in STORE_OPCODES:
        if op is Opcode.TagMR:
            address = state.grf[a.src1 - GRF_BASE]
        elif op in INSTRUMENTED_OPCODES:
            address = _pop_instrumentation(state, fifos) + a.imm
            checked[CheckFlags.SRC2] = state.get(a.src2)
        else:
            address = state.grf[a.src1 - GRF_BASE] + a.imm
            checked[CheckFlags.SRC2] = state.get(a.src2)
        address &= WORD
        value = state.get(a.dst)
        if op is Opcode.TagMR:
            new = value & mask
        else:
            old = tags.read(address)
            new = _rule_for(a, policy).apply(value, old, old) & mask
        tags.write(address, new)
        checked[CheckFlags.SRC1] = value
        checked[CheckFlags.DST] = new
    elif op in LOAD_OPCODES:
        if op in INSTRUMENTED_OPCODES:
            address = _pop_instrumentation(state, fifos) + a.imm
        else:
            address = state.grf[a.src1 - GRF_BASE] + a.imm
        address &= WORD
        loaded = tags.read(address)
        old = state.get(a.dst)
        base_tag = state.get(a.src2)
        state.set(a.dst, _rule_for(a, policy).apply(loaded, old, old) & mask)
        checked.update({CheckFlags.SRC1: loaded, CheckFlags.SRC2: base_tag, CheckFlags.DST: base_tag})
    elif op is Opcode.TagKTR:
        value = state.get(a.src1)
        fifos.pl2ps.push(value)
        checked[CheckFlags.SRC1] = value
    elif op is Opcode.TagTRK:
        address = fifos.ps2pl.pop()
        fetched = tags.read(address)
        new = fetched & mask
        state.set(a.dst, new)
        checked[CheckFlags.SRC1] = fetched
        checked[CheckFlags.DST] = new
    else:
        raise InvalidOperandRange(f"{op.name} is handled by the dispatcher, not the TMC")

    state.executed += 1
    enabled = tcr_checks(policy, a.cls)
    for kind in (CheckFlags.SRC1, CheckFlags.SRC2, CheckFlags.DST):
        if enabled & kind and kind in checked and checked[kind] & policy.check_mask:
            violation = Violation(
                slot=state.slot,
                context=state.context,
                block_address=block_address,
                annotation_index=index,
                checked_tag=checked[kind],
                check_kind=CHECK_NAMES[kind],
            )
            state.halted = True
            state.violation = violation
            return violation
    return None


def _pop_instrumentation(state: TmcState, fifos: Fifos) -> int:
    value = fifos.instrumentation.pop()
    state.instrumentation_pops += 1
    return value


__all__ = [
    "Fifo", "Fifos", "TmcState", "Violation", "execute_annotation", "grf_op",
    "needs_instrumentation", "FIFO_DEPTH", "InstrClass",
]
