"""Instrumentation strategies and code-size metrics.

Every strategy inserts ``str rB, [r9]`` (an ``InstrEmit``) in front of the
memory accesses it covers, exporting the base register so the coprocessor can
rebuild the address.  ``RELATED`` covers the same sites as ``S1`` but is
costed at two instructions per site (address setup plus export).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Tuple

from ..errors import MismatchedOrigin, ProgramSyntaxError
from .program import FP, MEMORY_OPS, PC, SP, Block, InstrEmit, ToyProgram

STATIC_BASES = frozenset({SP, FP, PC})


class Strategy(enum.Enum):
    RELATED = "related"
    S1 = "s1"
    S2 = "s2"

    @property
    def cost_per_site(self) -> int:
        return 2 if self is Strategy.RELATED else 1


def is_site(instr, strategy: Strategy) -> bool:
    if not isinstance(instr, MEMORY_OPS):
        return False
    return strategy is not Strategy.S2 or instr.base not in STATIC_BASES


def instrumented_sites(p: ToyProgram, strategy: Strategy, library: bool = True) -> List[Tuple[int, object]]:
    """(original address, instruction) of every access the strategy instruments."""
    return [(addr, instr) for addr, instr, block in p.instructions()
            if (library or not block.lib) and is_site(instr, strategy)]


def instrumentation_label(strategy: Strategy, library: bool = True) -> str:
    return strategy.value if library else f"{strategy.value}-nolib"


def parse_instrumentation_label(label: str) -> Tuple[Strategy, bool]:
    name, _, suffix = label.partition("-")
    if suffix not in ("", "nolib"):
        raise ProgramSyntaxError(f"unknown instrumentation label {label!r}")
    try:
        return Strategy(name), suffix != "nolib"
    except ValueError:
        raise ProgramSyntaxError(f"unknown instrumentation label {label!r}") from None


def instrument(p: ToyProgram, strategy: Strategy, library: bool = True) -> ToyProgram:
    """Insert exports before the strategy's sites; blocks are laid out again contiguously.

    With ``library=False`` blocks in the library section are left untouched.
    """
    if p.instrumented:
        raise ProgramSyntaxError(f"{p.name} is already instrumented ({p.instrumented})")
    blocks = []
    for block in p.blocks:
        instrs = []
        for instr in block.instrs:
            if (library or not block.lib) and is_site(instr, strategy):
                instrs.append(InstrEmit(instr.base))
            instrs.append(instr)
        blocks.append(Block(block.label, instrs, lib=block.lib))
    return p.copy_with_blocks(blocks, instrumentation_label(strategy, library))


@dataclass(frozen=True)
class StrategyMetrics:
    strategy: Strategy
    sites: int
    added_instructions: int
    original_bytes: int
    code_size_bytes: int

    @property
    def overhead(self) -> Fraction:
        if not self.original_bytes:
            return Fraction(0)
        return Fraction(self.added_instructions * 4, self.original_bytes)

    @property
    def overhead_percent(self) -> float:
        return float(self.overhead * 100)


def metrics(original: ToyProgram, variants: Iterable[ToyProgram]) -> Dict[Strategy, StrategyMetrics]:
    """Added-instruction and code-size figures for instrumented variants of ``original``."""
    if original.instrumented:
        raise MismatchedOrigin(f"{original.name} is itself instrumented")
    out = {}
    for variant in variants:
        if not variant.instrumented:
            raise MismatchedOrigin(f"{variant.name} is not an instrumented program")
        if variant.origin != original.origin:
            raise MismatchedOrigin(
                f"{variant.name} ({variant.instrumented}) was derived from {variant.origin}, "
                f"not from {original.name} ({original.origin})")
        strategy, _ = parse_instrumentation_label(variant.instrumented)
        sites = sum(isinstance(i, InstrEmit) for _, i, _ in variant.instructions())
        added = sites * strategy.cost_per_site
        out[strategy] = StrategyMetrics(
            strategy=strategy,
            sites=sites,
            added_instructions=added,
            original_bytes=original.size_bytes,
            code_size_bytes=original.size_bytes + 4 * added,
        )
    return out


def all_variants(p: ToyProgram, library: bool = True) -> Dict[Strategy, ToyProgram]:
    return {s: instrument(p, s, library) for s in Strategy}
