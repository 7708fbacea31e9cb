"""Static analysis: one annotation group per instruction of every basic block.

Integer-register tags live in T0-T15 and FP-register tags in TF0-TF31.  T9
is never written (r9 is reserved), so it serves as the always-zero second
operand of ALU-with-immediate forms.  G11/G13 mirror fp/sp so accesses that
are not instrumented can still be addressed; G15 is loaded with the
instruction address right before a pc-relative access.
"""
from __future__ import annotations

from typing import List, Optional

from ..annot import (
    COMPILE_TIME_TWIN,
    DEFAULT_POLICY,
    Annotation,
    AnnotationStore,
    GrfAlu,
    KERNEL_READ,
    KERNEL_WRITE,
    InstrClass,
    Opcode,
    PolicyMode,
    PolicyRegisters,
    fp_tag_reg,
    grf_reg,
    tag_reg,
    tpr_rule,
)
from ..errors import ProgramSyntaxError, UninstrumentedDynamicAccess, UnsupportedStackUpdate
from .instrument import STATIC_BASES, Strategy, parse_instrumentation_label
from .program import (
    FP,
    INSTR_SIZE,
    PC,
    RESERVED,
    SP,
    Alu,
    Block,
    Call,
    FAlu,
    FLdr,
    FStr,
    InstrEmit,
    Ldr,
    MovImm,
    Str,
    SysRead,
    SysWrite,
    ToyProgram,
)

ZERO_TAG = tag_reg(RESERVED)
STACK_REGS = (SP, FP)


def _propagating(op: Opcode, cls: InstrClass, mode: PolicyMode, policy: PolicyRegisters, **fields) -> Annotation:
    if mode is PolicyMode.COMPILE_TIME:
        return Annotation(COMPILE_TIME_TWIN[op], cls, aluop=int(tpr_rule(policy, cls)), **fields)
    return Annotation(op, cls, **fields)


def _stack_update(instr, addr: int) -> Annotation:
    if isinstance(instr, MovImm):
        return Annotation(Opcode.GrfOp, dst=grf_reg(instr.rd), src1=grf_reg(instr.rd), aluop=GrfAlu.set,
                          imm=_signed(instr.imm))
    if instr.imm is None or instr.op not in ("add", "sub") or instr.rn not in STACK_REGS:
        raise UnsupportedStackUpdate(
            f"{addr:#x}: {instr.op} into {'sp' if instr.rd == SP else 'fp'} is not an immediate "
            "adjustment of sp/fp")
    return Annotation(Opcode.GrfOp, dst=grf_reg(instr.rd), src1=grf_reg(instr.rn),
                      aluop=GrfAlu[instr.op], imm=_signed(instr.imm))


def _signed(v: int) -> int:
    v &= 0xFFFFFFFF
    return v - (1 << 32) if v & 0x80000000 else v


def analyze_block(block: Block, mode: PolicyMode, policy: PolicyRegisters = DEFAULT_POLICY,
                  library: bool = True) -> List[Annotation]:
    out: List[Annotation] = []
    opaque = block.lib and not library
    instrs = block.instrs
    for idx, instr in enumerate(instrs):
        addr = block.address + INSTR_SIZE * idx
        if isinstance(instr, InstrEmit):
            following = instrs[idx + 1] if idx + 1 < len(instrs) else None
            if not isinstance(following, (Ldr, Str, FLdr, FStr)) or following.base != instr.reg:
                raise ProgramSyntaxError(f"{addr:#x}: export of r{instr.reg} is not followed by an access through it")
            continue
        if isinstance(instr, (SysRead, SysWrite)):
            kind = KERNEL_READ if isinstance(instr, SysRead) else KERNEL_WRITE
            out.append(Annotation(Opcode.KernelMsg, InstrClass.Branch, imm=kind))
            continue
        if opaque:
            # library code is not analyzed; only the stack mirror is kept in step
            if isinstance(instr, (MovImm, Alu)) and instr.rd in STACK_REGS:
                out.append(_stack_update(instr, addr))
            continue
        if isinstance(instr, MovImm):
            out.append(Annotation(Opcode.TagRImm, InstrClass.ArithLogic, dst=tag_reg(instr.rd), imm=0))
            if instr.rd in STACK_REGS:
                out.append(_stack_update(instr, addr))
        elif isinstance(instr, Alu):
            src2 = ZERO_TAG if instr.rm is None else tag_reg(instr.rm)
            out.append(_propagating(Opcode.TagRRR, InstrClass.ArithLogic, mode, policy,
                                    dst=tag_reg(instr.rd), src1=tag_reg(instr.rn), src2=src2))
            if instr.rd in STACK_REGS:
                out.append(_stack_update(instr, addr))
        elif isinstance(instr, FAlu):
            out.append(_propagating(Opcode.TagRRR, InstrClass.FpLoadStore, mode, policy,
                                    dst=fp_tag_reg(instr.sd), src1=fp_tag_reg(instr.sn), src2=fp_tag_reg(instr.sm)))
        elif isinstance(instr, (Ldr, Str, FLdr, FStr)):
            out.extend(_memory_access(instrs, idx, addr, mode, policy))
        elif isinstance(instr, Call):
            out.append(Annotation(Opcode.TagRImm, InstrClass.Branch, dst=tag_reg(14), imm=0))
        # branches and returns carry no register-level flow
    return out


def _memory_access(instrs, idx: int, addr: int, mode: PolicyMode, policy: PolicyRegisters) -> List[Annotation]:
    instr = instrs[idx]
    is_load = isinstance(instr, (Ldr, FLdr))
    if isinstance(instr, (Ldr, Str)):
        cls, reg = InstrClass.LoadStore, tag_reg(instr.rt)
        if is_load and instr.rt in STACK_REGS:
            raise UnsupportedStackUpdate(f"{addr:#x}: loading sp/fp from memory is not tracked")
    else:
        cls, reg = InstrClass.FpLoadStore, fp_tag_reg(instr.st)
    exported = idx > 0 and isinstance(instrs[idx - 1], InstrEmit) and instrs[idx - 1].reg == instr.base
    out = []
    if exported:
        op = Opcode.TagTRI if is_load else Opcode.TagITR
        # the export of pc happens one instruction earlier
        imm = instr.offset + (INSTR_SIZE if instr.base == PC else 0)
        out.append(_propagating(op, cls, mode, policy, dst=reg, src2=tag_reg(instr.base), imm=imm))
        return out
    if instr.base not in STATIC_BASES:
        raise UninstrumentedDynamicAccess(
            f"{addr:#x}: access through r{instr.base} has no instrumentation")
    if instr.base == PC:
        out.append(Annotation(Opcode.GrfOp, dst=grf_reg(PC), src1=grf_reg(PC), aluop=GrfAlu.set, imm=_signed(addr)))
    op = Opcode.TagTRM if is_load else Opcode.TagMTR
    out.append(_propagating(op, cls, mode, policy, dst=reg, src1=grf_reg(instr.base),
                            src2=tag_reg(instr.base), imm=instr.offset))
    return out


def analyze(p: ToyProgram, mode: PolicyMode = PolicyMode.RUNTIME, strategy: Optional[Strategy] = None,
            policy: Optional[PolicyRegisters] = None) -> AnnotationStore:
    """Annotation store for an instrumented program.

    ``policy`` supplies the rules compiled into compile-time annotations;
    runtime annotations ignore it.
    """
    library = True
    if p.blocks:
        if not p.instrumented:
            raise ProgramSyntaxError(f"{p.name} must be instrumented before analysis")
        used, library = parse_instrumentation_label(p.instrumented)
        if strategy is not None and used is not strategy:
            raise ProgramSyntaxError(f"{p.name} was instrumented with {used.value}, not {strategy.value}")
    policy = policy or DEFAULT_POLICY
    store = AnnotationStore()
    for block in p.blocks:
        store.add_block(block.address, analyze_block(block, mode, policy, library))
    return store
