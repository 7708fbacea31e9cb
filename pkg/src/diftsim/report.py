"""Tag-state reports: one ``key=value`` line per fact, diffable as text.

Keys containing an ``info`` component (FIFO high-water marks, kernel log,
annotation counters, instruction addresses) describe how a result was reached
rather than the result, and are skipped by :func:`diff_reports`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .dispatch import RunReport
from .pft import ContextId


@dataclass
class UnitSnapshot:
    unit: int
    context: Optional[ContextId]
    trf: List[int]
    trf_fp: List[int]
    mem: Dict[int, int]
    violation: Optional[tuple] = None  # (context, block, kind, tag)
    info: Dict[str, str] = field(default_factory=dict)

    def lines(self) -> List[str]:
        k = self.unit
        out = [f"unit.{k}.context={self.context if self.context is not None else 'none'}"]
        out += [f"unit.{k}.trf.r{i}={t:#x}" for i, t in enumerate(self.trf) if t]
        out += [f"unit.{k}.trf_fp.s{i}={t:#x}" for i, t in enumerate(self.trf_fp) if t]
        out += [f"unit.{k}.mem.{a:#010x}={t:#x}" for a, t in sorted(self.mem.items()) if t]
        if self.violation is None:
            out.append(f"unit.{k}.violation=none")
        else:
            ctx, block, kind, tag = self.violation
            out.append(f"unit.{k}.violation=context={ctx} block={block:#010x} kind={kind} tag={tag:#x}")
        out += [f"unit.{k}.info.{key}={value}" for key, value in sorted(self.info.items())]
        return out


@dataclass
class Report:
    source: str
    units: List[UnitSnapshot]
    files: Dict[str, int] = field(default_factory=dict)
    info: Dict[str, str] = field(default_factory=dict)

    def lines(self) -> List[str]:
        out = [f"info.source={self.source}"]
        for unit in self.units:
            out += unit.lines()
        out += [f"file.{name}={tag:#x}" for name, tag in sorted(self.files.items())]
        out += [f"info.{key}={value}" for key, value in self.info.items()]
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def to_json(self) -> str:
        return json.dumps(parse_report(self.to_text()), indent=2, sort_keys=True) + "\n"

    def unit_text(self, unit: int) -> str:
        return section(self.to_text(), unit)

    @property
    def violations(self) -> List[tuple]:
        return [u.violation for u in self.units if u.violation is not None]


def from_run(run: RunReport, files: Dict[str, int]) -> Report:
    units = []
    for u in run.units:
        v = u.violation
        info = {
            "blocks": str(u.blocks),
            "dropped_blocks": str(u.dropped_blocks),
            "executed": str(u.state.executed),
            "instrumentation_pops": str(u.state.instrumentation_pops),
            "instrumentation_hwm": str(u.fifos.instrumentation.high_water),
            "policy": str(u.policy_index),
            "slot": str(u.slot),
        }
        if v is not None:
            info["violation_annotation"] = str(v.annotation_index)
        units.append(UnitSnapshot(
            unit=u.unit,
            context=u.context,
            trf=list(u.state.trf),
            trf_fp=list(u.state.trf_fp),
            mem=dict(u.tags.nonzero()),
            violation=None if v is None else v.verdict(),
            info=info,
        ))
    info = {f"hwm.{name}": str(value) for name, value in run.fifo_high_water.items()
            if not name.startswith("instrumentation.")}
    for i, ctx in enumerate(run.slots):
        info[f"slot.{i}"] = str(ctx)
    for i, rec in enumerate(run.kernel_log):
        info[f"kernel.{i}"] = (f"position={rec.position} kind={rec.kind} context={rec.ctx} "
                               f"executed={rec.executed} outcome={rec.outcome}")
    return Report(source="pipeline", units=units, files=dict(files), info=info)


def from_oracle(result) -> Report:
    units = []
    for k, u in enumerate(result.units):
        v = u.violation
        info = {"thread": str(u.thread)}
        if v is not None:
            info["violation_pc"] = f"{v.pc:#010x}"
        units.append(UnitSnapshot(
            unit=k,
            context=result.threads[u.thread].ctx,
            trf=list(u.regs),
            trf_fp=list(u.fregs),
            mem=u.nonzero_mem(),
            violation=None if v is None else v.verdict(),
            info=info,
        ))
    return Report(source="oracle", units=units, files=dict(result.files))


def parse_report(text: str) -> Dict[str, str]:
    out = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"report line without '=': {line!r}")
        out[key] = value
    return out


def _compared(key: str) -> bool:
    return "info" not in key.split(".")


def diff_reports(a: str, b: str) -> List[str]:
    """Human-readable differences between the comparable keys of two reports."""
    da = {k: v for k, v in _load(a).items() if _compared(k)}
    db = {k: v for k, v in _load(b).items() if _compared(k)}
    out = []
    for key in sorted(set(da) | set(db)):
        if da.get(key) != db.get(key):
            out.append(f"{key}: {da.get(key, '<absent>')} != {db.get(key, '<absent>')}")
    return out


def _load(text: str) -> Dict[str, str]:
    if text.lstrip().startswith("{"):
        return {k: str(v) for k, v in json.loads(text).items()}
    return parse_report(text)


def section(text: str, unit: int) -> str:
    prefix = f"unit.{unit}."
    return "".join(line + "\n" for line in text.splitlines() if line.startswith(prefix))
