"""Random program and scenario generator for equivalence testing.

Programs are built as text and parsed, so the parser is exercised too.  They
always terminate and never fault:

* data pointers (r10, r12) are formed as ``base + (rX & 0x3fc)`` so they stay
  inside the thread's data page whatever the data is;
* stack accesses use small offsets from sp/fp inside a fixed frame;
* loops count down r8, which nothing else writes;
* helper functions are leaves, called only from ``main``.
"""
from __future__ import annotations

import random
from typing import List, Optional

from ..annot import CheckFlags, InstrClass, PolicyMode, PolicyRegisters, Rule
from ..dispatch import DispatchMode
from ..pft import ContextId
from .instrument import Strategy
from .machine import SimFile, SimFileSystem
from .program import ToyProgram, parse_program

DATA_REGS = [f"r{i}" for i in range(8)]
POINTERS = ["r10", "r12"]
FILES = ["f0", "f1", "f2"]


class _Builder:
    def __init__(self, rng: random.Random, index: int):
        self.rng = rng
        self.index = index
        self.text_base = 0x10000 + index * 0x4000
        self.data_base = 0x20000 + index * 0x10000
        self.stack_base = 0x7f000000 + index * 0x100000
        self.lines: List[str] = []
        self.labels = 0
        self.functions: List[tuple] = []

    def label(self, stem: str) -> str:
        self.labels += 1
        return f"{stem}{self.labels}"

    # -- instruction pickers ----------------------------------------------

    def reg(self):
        return self.rng.choice(DATA_REGS)

    def freg(self):
        return f"s{self.rng.randrange(8)}"

    def pointer_setup(self, out, ptr=None):
        ptr = ptr or self.rng.choice(POINTERS)
        out.append(f"and {ptr}, {self.reg()}, #0x3fc")
        out.append(f"add {ptr}, {ptr}, #{self.data_base:#x}")

    def mem_operand(self, out, allow_pc=True):
        roll = self.rng.random()
        if roll < 0.45:
            ptr = self.rng.choice(POINTERS)
            return f"[{ptr}, #{4 * self.rng.randrange(0, 256):#x}]"
        if roll < 0.75:
            return f"[sp, #{4 * self.rng.randrange(0, 64)}]"
        if roll < 0.95 or not allow_pc:
            return f"[fp, #{4 * self.rng.randrange(0, 64)}]"
        return f"[pc, #{4 * self.rng.randrange(0, 4)}]"

    def straight(self, n: int) -> List[str]:
        rng = self.rng
        out = []
        for _ in range(n):
            roll = rng.random()
            if roll < 0.12:
                out.append(f"mov {self.reg()}, #{rng.choice([0, 1, 7, 0x55, 0x1234, rng.getrandbits(32)]):#x}")
            elif roll < 0.35:
                op = rng.choice(["add", "sub", "and", "or", "xor"])
                last = self.reg() if rng.random() < 0.6 else f"#{rng.randrange(0, 300)}"
                out.append(f"{op} {self.reg()}, {self.reg()}, {last}")
            elif roll < 0.42:
                self.pointer_setup(out)
            elif roll < 0.58:
                out.append(f"ldr {self.reg()}, {self.mem_operand(out)}")
            elif roll < 0.72:
                out.append(f"str {self.reg()}, {self.mem_operand(out, allow_pc=False)}")
            elif roll < 0.79:
                out.append(f"fldr {self.freg()}, {self.mem_operand(out)}")
            elif roll < 0.85:
                out.append(f"fstr {self.freg()}, {self.mem_operand(out, allow_pc=False)}")
            elif roll < 0.93:
                out.append(f"f{rng.choice(['add', 'sub', 'mul'])} {self.freg()}, {self.freg()}, {self.freg()}")
            else:
                out.extend(self.syscall())
        return out

    def syscall(self, read: Optional[bool] = None) -> List[str]:
        rng = self.rng
        buf, length = "r6", "r7"
        if read if read is not None else rng.random() < 0.5:
            address = self.data_base + 0x800 + rng.choice([0, 0x10, 0x20]) + rng.randrange(0, 4)
            return [f"mov {buf}, #{address:#x}", f"mov {length}, #{rng.randrange(0, 33)}",
                    f"read {rng.choice(FILES)}, {buf}, {length}"]
        # half of the writes reuse the read area so file tags flow onward
        if rng.random() < 0.6:
            address = self.data_base + 0x800 + rng.choice([0, 0x10, 0x20]) + rng.randrange(0, 4)
        else:
            address = self.data_base + rng.randrange(0, 0x7e0)
        return [f"mov {buf}, #{address:#x}", f"mov {length}, #{rng.randrange(0, 33)}",
                f"write {rng.choice(FILES)}, {buf}, {length}"]

    # -- structure ----------------------------------------------------------

    def segment(self) -> List[str]:
        rng = self.rng
        kind = rng.random()
        body = self.straight(rng.randrange(1, 7))
        if kind < 0.3:
            top = self.label("loop")
            out = [f"mov r8, #{rng.randrange(1, 5)}", f"b {top}", f"{top}:"]
            out += self.straight(rng.randrange(1, 6))
            out += ["sub r8, r8, #1", f"bnz r8, {top}", f"{self.label('after')}:"]
            return body + out
        if kind < 0.5:
            skip = self.label("skip")
            out = [f"bnz {self.reg()}, {skip}", f"{self.label('then')}:"]
            out += self.straight(rng.randrange(1, 4))
            out += [f"b {skip}", f"{skip}:"]
            return body + out
        if kind < 0.65 and self.functions:
            name = rng.choice(self.functions)[0]
            return body + [f"call {name}", f"{self.label('ret')}:"]
        return body

    def function(self, lib: bool) -> List[str]:
        name = self.label("fn")
        self.functions.append((name, lib))
        out = [f"{name}:", "sub sp, sp, #16"]
        out += self.straight(self.rng.randrange(1, 6))
        out += ["add sp, sp, #16", "ret"]
        return out

    def build(self) -> ToyProgram:
        rng = self.rng
        header = [
            f".name gen{self.index}",
            f".text {self.text_base:#x}",
            f".data {self.data_base:#x} 0x1000",
            f".stack {self.stack_base:#x} 0x1000",
            f".sp {self.stack_base + 0xf00:#x}",
        ]
        for _ in range(rng.randrange(0, 6)):
            address = self.data_base + 4 * rng.randrange(0, 512)
            header.append(f".word {address:#x} {rng.getrandbits(32):#x}")
        for _ in range(rng.randrange(0, 8)):
            address = self.data_base + 4 * rng.randrange(0, 512)
            header.append(f".taint {address:#x} {1 << rng.randrange(0, 4):#x}")
        for _ in range(rng.randrange(0, 3)):
            name = rng.choice(DATA_REGS + [f"s{i}" for i in range(8)])
            header.append(f".taintreg {name} {rng.randrange(1, 16):#x}")
        for reg in DATA_REGS:
            if rng.random() < 0.5:
                header.append(f".reg {reg} {rng.getrandbits(32):#x}")
        header.append(".entry main")

        functions = []
        for _ in range(rng.randrange(0, 3)):
            lib = rng.random() < 0.4
            functions.append((lib, self.function(lib)))
        main = ["main:", "add fp, sp, #0"]
        self.pointer_setup(main, "r10")
        self.pointer_setup(main, "r12")
        main += self.syscall(read=True)
        for _ in range(rng.randrange(1, 5)):
            main += self.segment()
        main += ["mov lr, #0", "ret"]

        lines = header + main
        for lib, body in functions:
            lines.append(".section lib" if lib else ".section app")
            lines += body
        return parse_program("\n".join(lines) + "\n", name=f"gen{self.index}")


def random_program(rng: random.Random, index: int = 0) -> ToyProgram:
    return _Builder(rng, index).build()


def random_policy(rng: random.Random, mode: PolicyMode = PolicyMode.RUNTIME,
                  checking: Optional[bool] = None) -> PolicyRegisters:
    rules = {c: rng.choice(list(Rule)) for c in InstrClass}
    checking = rng.random() < 0.5 if checking is None else checking
    checks = {}
    mask = 0
    if checking:
        checks = {c: CheckFlags(rng.randrange(0, 8)) for c in InstrClass}
        mask = 1 << rng.randrange(0, 4)
    width = rng.choice([32, 32, 16, 8, 3])
    return PolicyRegisters.build(rules, checks, mode=mode, check_mask=mask, tag_width=width)


def random_fs(rng: random.Random) -> SimFileSystem:
    fs = SimFileSystem()
    for name in FILES:
        data = bytes(rng.getrandbits(8) for _ in range(rng.choice([0, 8, 24, 40])))
        fs.files[name] = SimFile(data, rng.choice([0, 1, 2, 4, 8, 0x30, rng.getrandbits(32)]))
    return fs


def random_scenario(seed: int, strategy: Strategy = Strategy.S2, mode: PolicyMode = PolicyMode.RUNTIME,
                    threads: Optional[int] = None):
    """A reproducible random scenario (imported lazily to avoid a cycle)."""
    from ..scenario import Scenario, ThreadSpec

    rng = random.Random(seed)
    n = threads or rng.randrange(1, 5)
    asid = rng.randrange(0, 256)
    tids = rng.sample(range(1, 1 << 24), n)
    specs = [ThreadSpec(random_program(rng, k), ContextId(asid, tids[k])) for k in range(n)]
    dispatch_mode = DispatchMode.PER_THREAD
    if n == 1 and rng.random() < 0.3:
        dispatch_mode = DispatchMode.MULTI_POLICY
        policies = [random_policy(rng, mode) for _ in range(rng.randrange(2, 4))]
    elif rng.random() < 0.5:
        policies = [random_policy(rng, mode)]
    else:
        policies = [random_policy(rng, mode) for _ in range(n)]
    return Scenario(
        name=f"random-{seed}",
        threads=specs,
        policies=policies,
        strategy=strategy,
        mode=mode,
        quantum=rng.choice([1, 2, 5, 50]),
        fs=random_fs(rng),
        dispatch_mode=dispatch_mode,
        library=rng.random() < 0.85,
    )
