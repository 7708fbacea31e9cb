"""Dispatcher: routes decoded trace entries to TMC units and services the
instrumentation and kernel FIFOs.

The dispatcher consumes one totally ordered event stream (trace entries,
instrumentation pushes, kernel messages). A block's annotations are queued on
its unit when the trace entry arrives and run as far as the instrumentation
FIFO allows; a kernel message for a context is serviced only once that
context's queue has fully drained, which is the point where the simulated
kernel is allowed to continue.  Each system call has a ``KernelMsg`` marker
in its block's annotations; the message is handled when the unit reaches it.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Union

from .annot import KERNEL_READ, KERNEL_WRITE, AnnotationStore, Opcode, PolicyRegisters, lookup_block
from .errors import FifoEmpty, InstrumentationDesync, TooManySlots
from .pft import ContextId, Decoder, entry_address, entry_slot
from .tagmem import TagSpace
from .tmc import Fifo, Fifos, TmcState, Violation, execute_annotation, needs_instrumentation

MAX_TMC_UNITS = 8


class DispatchMode(enum.Enum):
    PER_THREAD = "per-thread"
    MULTI_POLICY = "multi-policy"


@dataclass(frozen=True)
class DispatchConfig:
    mode: DispatchMode = DispatchMode.PER_THREAD
    policies: tuple = ()
    tmc_count: Optional[int] = None

    def __post_init__(self):
        policies = tuple(self.policies)
        object.__setattr__(self, "policies", policies)
        if not 1 <= len(policies) <= MAX_TMC_UNITS:
            raise ValueError(f"need 1..{MAX_TMC_UNITS} policies, got {len(policies)}")
        count = self.tmc_count
        if count is None:
            count = len(policies)
        if self.mode is DispatchMode.MULTI_POLICY and count != len(policies):
            raise ValueError("multi-policy mode runs exactly one TMC unit per policy")
        if len(policies) > 1 and count != len(policies):
            raise ValueError("give either one shared policy or one policy per TMC unit")
        if not 1 <= count <= MAX_TMC_UNITS:
            raise ValueError(f"tmc_count must be 1..{MAX_TMC_UNITS}")
        object.__setattr__(self, "tmc_count", count)

    def policy_index(self, unit: int) -> int:
        return unit if len(self.policies) > 1 else 0

    def policy_for(self, unit: int) -> PolicyRegisters:
        return self.policies[self.policy_index(unit)]


@dataclass(frozen=True)
class ReadMsg:
    file_tag: int
    buf_vaddr: int
    count_bytes: int
    ctx: ContextId


@dataclass(frozen=True)
class WriteMsg:
    buf_vaddr: int
    count_bytes: int
    ctx: ContextId


@dataclass(frozen=True)
class TraceEntry:
    """Marker: the next decoded trace entry is due at this point of the stream."""


@dataclass(frozen=True)
class InstrPush:
    ctx: ContextId
    value: int


Event = Union[TraceEntry, InstrPush, ReadMsg, WriteMsg]


@dataclass
class UnitInit:
    """Load-time state for a unit: GRF values, register tags, memory tags."""

    grf: Dict[int, int] = field(default_factory=dict)
    reg_tags: Dict[int, int] = field(default_factory=dict)
    mem_tags: Dict[int, int] = field(default_factory=dict)


@dataclass
class KernelLogRecord:
    position: int
    kind: str
    ctx: ContextId
    slot: int
    executed: int
    outcome: str


@dataclass
class UnitResult:
    unit: int
    slot: int
    policy_index: int
    state: TmcState
    tags: TagSpace
    fifos: Fifos
    blocks: int = 0
    dropped_blocks: int = 0
    pending: deque = field(default_factory=deque, repr=False)

    @property
    def context(self) -> Optional[ContextId]:
        return self.state.context

    @property
    def violation(self) -> Optional[Violation]:
        return self.state.violation


@dataclass
class RunReport:
    mode: DispatchMode
    units: List[UnitResult]
    fifo_high_water: Dict[str, int]
    kernel_log: List[KernelLogRecord]
    slots: List[ContextId]
    files: Dict[str, int] = field(default_factory=dict)

    @property
    def violations(self) -> List[Violation]:
        return [u.violation for u in self.units if u.violation is not None]


def handle_read_msg(msg: ReadMsg, tags: TagSpace, policy: Optional[PolicyRegisters] = None) -> bool:
    """Tag the read buffer with the file's tag; returns the ack."""
    tag = msg.file_tag if policy is None else msg.file_tag & policy.width_mask
    tags.write_range(msg.buf_vaddr, msg.count_bytes, tag)
    return True


def handle_write_msg(msg: WriteMsg, tags: TagSpace, pl2ps: Optional[Fifo] = None) -> int:
    """OR-fold the buffer's tags; the result goes back to the kernel via PL2PS."""
    tag = tags.fold_range(msg.buf_vaddr, msg.count_bytes)
    if pl2ps is not None:
        pl2ps.push(tag)
    return tag


class Coprocessor:
    """Stateful dispatcher plus TMC units; feed it events, then call ``finish``."""

    def __init__(self, store: AnnotationStore, config: DispatchConfig, tagspaces: Sequence[TagSpace],
                 inits: Optional[Sequence[Optional[UnitInit]]] = None,
                 slots: Optional[List[ContextId]] = None):
        if len(tagspaces) != config.tmc_count:
            raise ValueError(f"need one tag space per TMC unit ({config.tmc_count}), got {len(tagspaces)}")
        self.store = store
        self.config = config
        self.decoder = Decoder()
        if slots is not None:
            self.decoder.slots.extend(slots)
        self.slots = self.decoder.slots
        self.ps2pl = Fifo("ps2pl")
        self.pl2ps = Fifo("pl2ps")
        self.position = 0
        self.kernel_log: List[KernelLogRecord] = []
        self.units: List[UnitResult] = []
        for k in range(config.tmc_count):
            slot = k if config.mode is DispatchMode.PER_THREAD else 0
            unit = UnitResult(
                unit=k,
                slot=slot,
                policy_index=config.policy_index(k),
                state=TmcState(slot=slot),
                tags=tagspaces[k],
                fifos=Fifos(ps2pl=self.ps2pl, pl2ps=self.pl2ps),
            )
            init = inits[k] if inits is not None and k < len(inits) else None
            if init is not None:
                self._apply_init(unit, init, config.policy_for(k))
            self.units.append(unit)

    @staticmethod
    def _apply_init(unit: UnitResult, init: UnitInit, policy: PolicyRegisters):
        mask = policy.width_mask
        for index, value in init.grf.items():
            unit.state.grf[index] = value & 0xFFFFFFFF
        for reg_id, tag in init.reg_tags.items():
            unit.state.set(reg_id, tag & mask)
        for vaddr, tag in init.mem_tags.items():
            unit.tags.write(vaddr, tag & mask)

    # -- routing ----------------------------------------------------------

    def _units_for_slot(self, slot: int) -> List[UnitResult]:
        if self.config.mode is DispatchMode.MULTI_POLICY:
            if slot != 0:
                raise TooManySlots(f"multi-policy mode follows a single thread; got slot {slot}")
            units = self.units
        else:
            if slot >= self.config.tmc_count:
                raise TooManySlots(f"slot {slot} has no TMC unit ({self.config.tmc_count} configured)")
            units = [self.units[slot]]
        if slot < len(self.slots):
            for u in units:
                u.state.context = self.slots[slot]
        return units

    def _slot_of(self, ctx: ContextId) -> int:
        try:
            return self.slots.index(ctx)
        except ValueError:
            raise InstrumentationDesync(f"context {ctx} has not appeared in the trace") from None

    def _drain(self, unit: UnitResult):
        policy = self.config.policy_for(unit.unit)
        while unit.pending and not unit.state.halted:
            block, index, annotation = unit.pending[0]
            if annotation.opcode is Opcode.KernelMsg:
                return
            if needs_instrumentation(annotation) and not len(unit.fifos.instrumentation):
                return
            unit.pending.popleft()
            violation = execute_annotation(unit.state, annotation, policy, unit.fifos, unit.tags,
                                           block_address=block, index=index)
            if violation is not None:
                unit.pending.clear()

    # -- event handlers ---------------------------------------------------

    def on_trace_bytes(self, data: bytes):
        for entry in self.decoder.feed(data):
            self.on_entry(entry)

    def on_entry(self, entry: int):
        self.position += 1
        address = entry_address(entry)
        units = self._units_for_slot(entry_slot(entry))
        annotations = lookup_block(self.store, address)
        for unit in units:
            if unit.state.halted:
                unit.dropped_blocks += 1
                continue
            unit.blocks += 1
            unit.pending.extend((address, i, a) for i, a in enumerate(annotations))
            self._drain(unit)

    def on_instrumentation(self, ctx: ContextId, value: int):
        self.position += 1
        for unit in self._units_for_slot(self._slot_of(ctx)):
            if unit.state.halted:
                continue
            unit.fifos.instrumentation.push(value)
            self._drain(unit)

    def _sync(self, ctx: ContextId, kind: int):
        """Run every earlier annotation of ``ctx`` up to the matching system-call marker."""
        slot = self._slot_of(ctx)
        units = self._units_for_slot(slot)
        for unit in units:
            self._drain(unit)
            if unit.state.halted:
                continue
            if not unit.pending:
                raise InstrumentationDesync(f"system call from {ctx} has no marker in the traced block")
            head = unit.pending[0][2]
            if head.opcode is not Opcode.KernelMsg:
                raise FifoEmpty(
                    f"system call from {ctx}: {len(unit.pending)} annotations still wait for "
                    "instrumentation values")
            if head.imm != kind:
                raise InstrumentationDesync(f"system call from {ctx} does not match the marker {head}")
        return slot, units

    def _release(self, units: List[UnitResult], allowed: bool):
        for unit in units:
            if unit.state.halted:
                continue
            if allowed:
                unit.pending.popleft()
                self._drain(unit)
            else:
                # the kernel stops the thread; the rest of its block never runs
                unit.pending.clear()

    def _log(self, kind, ctx, slot, units, outcome):
        self.kernel_log.append(KernelLogRecord(
            position=self.position - 1, kind=kind, ctx=ctx, slot=slot,
            executed=units[0].state.executed, outcome=outcome))

    def on_read(self, msg: ReadMsg) -> bool:
        slot, units = self._sync(msg.ctx, KERNEL_READ)
        self.position += 1
        if any(u.state.halted for u in units):
            self._log("read", msg.ctx, slot, units, "denied")
            self._release(units, False)
            return False
        for word in (msg.file_tag, msg.buf_vaddr, msg.count_bytes):
            self.ps2pl.push(word)
        file_tag, buf, count = self.ps2pl.pop(), self.ps2pl.pop(), self.ps2pl.pop()
        delivered = ReadMsg(file_tag, buf, count, msg.ctx)
        for unit in units:
            handle_read_msg(delivered, unit.tags, self.config.policy_for(unit.unit))
        self._log("read", msg.ctx, slot, units, "ack")
        self._release(units, True)
        return True

    def on_write(self, msg: WriteMsg) -> Optional[int]:
        """Returns the buffer tag for the file, or None if the context was stopped."""
        slot, units = self._sync(msg.ctx, KERNEL_WRITE)
        self.position += 1
        if any(u.state.halted for u in units):
            self._log("write", msg.ctx, slot, units, "denied")
            self._release(units, False)
            return None
        self.ps2pl.push(msg.buf_vaddr)
        self.ps2pl.push(msg.count_bytes)
        delivered = WriteMsg(self.ps2pl.pop(), self.ps2pl.pop(), msg.ctx)
        handle_write_msg(delivered, units[0].tags, self.pl2ps)
        reply = self.pl2ps.pop()
        self._log("write", msg.ctx, slot, units, f"{reply:#x}")
        self._release(units, True)
        return reply

    def finish(self) -> RunReport:
        self.decoder.close()
        for unit in self.units:
            self._drain(unit)
            if unit.pending:
                if unit.pending[0][2].opcode is Opcode.KernelMsg:
                    raise InstrumentationDesync(f"unit {unit.unit}: a system-call marker never met its message")
                raise FifoEmpty(
                    f"unit {unit.unit}: {len(unit.pending)} annotations never received instrumentation values")
            if not unit.state.halted and len(unit.fifos.instrumentation):
                raise InstrumentationDesync(
                    f"unit {unit.unit}: {len(unit.fifos.instrumentation)} unconsumed instrumentation values")
        high_water = {f"instrumentation.{u.unit}": u.fifos.instrumentation.high_water for u in self.units}
        high_water["ps2pl"] = self.ps2pl.high_water
        high_water["pl2ps"] = self.pl2ps.high_water
        return RunReport(
            mode=self.config.mode,
            units=self.units,
            fifo_high_water=high_water,
            kernel_log=self.kernel_log,
            slots=list(self.slots),
        )


def run(entries: Sequence[int], slots: Sequence[ContextId], store: AnnotationStore, config: DispatchConfig,
        tagspaces: Sequence[TagSpace], event_stream: Optional[Iterable[Event]] = None,
        inits: Optional[Sequence[Optional[UnitInit]]] = None) -> RunReport:
    """Replay a recorded event stream through a fresh coprocessor.

    Trace entries not referenced by the stream are processed at the end.
    """
    cop = Coprocessor(store, config, tagspaces, inits, slots=list(slots))
    pending = iter(entries)
    for event in event_stream or ():
        if isinstance(event, TraceEntry):
            try:
                cop.on_entry(next(pending))
            except StopIteration:
                raise InstrumentationDesync("event stream references more trace entries than exist") from None
        elif isinstance(event, InstrPush):
            cop.on_instrumentation(event.ctx, event.value)
        elif isinstance(event, ReadMsg):
            cop.on_read(event)
        elif isinstance(event, WriteMsg):
            cop.on_write(event)
        else:
            raise TypeError(f"unknown event {event!r}")
    for entry in pending:
        cop.on_entry(entry)
    return cop.finish()
