"""End-to-end scenarios: instrument, analyze, execute against the coprocessor
model, and run the reference oracle on the same inputs.

Run manifest (``key=value`` per line, ``#`` comments, paths relative to the
manifest)::

    name=two-thread
    program=worker.s 42 4d2      # path, ASID, TID (hex); 1-4 lines
    policy=store-check.policy    # repeatable; "default" for the built-in policy
    strategy=s2                  # related | s1 | s2
    mode=runtime                 # runtime | compile
    quantum=5
    fs=files.txt                 # file_id,hex_tag,path lines
    dispatch=per-thread          # per-thread | multi-policy
    library=yes                  # instrument library blocks
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import List, Optional

from .annot import (
    DEFAULT_POLICY,
    AnnotationStore,
    PolicyMode,
    PolicyRegisters,
    fp_tag_reg,
    parse_policy,
    tag_reg,
    with_propagation_of,
)
from .dispatch import Coprocessor, DispatchConfig, DispatchMode, RunReport, UnitInit
from .errors import DiftError, ManifestError
from .pft import ContextId
from .report import Report, from_oracle, from_run
from .tagmem import TagSpace
from .toyisa.analyze import analyze
from .toyisa.instrument import Strategy, instrument
from .toyisa.machine import EventStream, SimFileSystem, execute, parse_fs_manifest
from .toyisa.oracle import OracleResult, oracle_taint
from .toyisa.program import FP, ToyProgram, parse_program

CORPUS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "corpus")


@dataclass
class ThreadSpec:
    program: ToyProgram
    ctx: ContextId


@dataclass
class Scenario:
    name: str
    threads: List[ThreadSpec]
    policies: List[PolicyRegisters] = field(default_factory=lambda: [DEFAULT_POLICY])
    strategy: Strategy = Strategy.S2
    mode: Optional[PolicyMode] = None
    quantum: int = 1
    fs: SimFileSystem = field(default_factory=SimFileSystem)
    dispatch_mode: DispatchMode = DispatchMode.PER_THREAD
    library: bool = True

    def __post_init__(self):
        if not 1 <= len(self.threads) <= 4:
            raise ManifestError(f"{self.name}: need 1-4 programs, got {len(self.threads)}")
        if not 1 <= len(self.policies) <= 8:
            raise ManifestError(f"{self.name}: need 1-8 policies, got {len(self.policies)}")
        if self.quantum < 1:
            raise ManifestError(f"{self.name}: quantum must be at least 1")
        if self.dispatch_mode is DispatchMode.MULTI_POLICY and len(self.threads) != 1:
            raise ManifestError(f"{self.name}: multi-policy dispatch follows exactly one program")
        if (self.dispatch_mode is DispatchMode.PER_THREAD and len(self.policies) > 1
                and len(self.policies) != len(self.threads)):
            raise ManifestError(f"{self.name}: give one policy, or one per program")
        ranges = sorted(t.program.code_range for t in self.threads)
        for (_, end), (start, _) in zip(ranges, ranges[1:]):
            if start < end:
                raise ManifestError(f"{self.name}: program code ranges overlap")
        if len({t.ctx for t in self.threads}) != len(self.threads):
            raise ManifestError(f"{self.name}: context ids must be distinct")

    @property
    def policy_mode(self) -> PolicyMode:
        return self.mode if self.mode is not None else self.policies[0].mode

    def variant(self, **changes) -> "Scenario":
        return replace(self, **changes)


@dataclass
class Prepared:
    programs: List[ToyProgram]
    store: AnnotationStore
    config: DispatchConfig
    effective: List[PolicyRegisters]
    unit_programs: List[int]


def _compiling_policy(s: Scenario, thread: int) -> PolicyRegisters:
    if s.dispatch_mode is DispatchMode.MULTI_POLICY or len(s.policies) == 1:
        return s.policies[0]
    return s.policies[thread]


def prepare(s: Scenario, store: Optional[AnnotationStore] = None) -> Prepared:
    mode = s.policy_mode
    programs = [instrument(t.program, s.strategy, s.library) for t in s.threads]
    if store is None:
        store = AnnotationStore()
        for k, p in enumerate(programs):
            store.merge(analyze(p, mode, s.strategy, _compiling_policy(s, k)))
    policies = [replace(p, mode=mode) for p in s.policies]
    if s.dispatch_mode is DispatchMode.MULTI_POLICY:
        config = DispatchConfig(DispatchMode.MULTI_POLICY, tuple(policies))
        unit_programs = [0] * len(policies)
    else:
        config = DispatchConfig(DispatchMode.PER_THREAD, tuple(policies), tmc_count=len(programs))
        unit_programs = list(range(len(programs)))
    if mode is PolicyMode.COMPILE_TIME:
        effective = [with_propagation_of(config.policy_for(u), _compiling_policy(s, unit_programs[u]))
                     for u in range(config.tmc_count)]
    else:
        effective = [config.policy_for(u) for u in range(config.tmc_count)]
    return Prepared(programs, store, config, effective, unit_programs)


def unit_init(p: ToyProgram) -> UnitInit:
    reg_tags = {}
    for name, tag in p.reg_taints.items():
        n = int(name[1:])
        reg_tags[fp_tag_reg(n) if name.startswith("s") else tag_reg(n)] = tag
    return UnitInit(grf={13: p.initial_sp, FP: p.regs_init.get(FP, 0)}, reg_tags=reg_tags,
                    mem_tags=dict(p.mem_taints))


@dataclass
class PipelineResult:
    report: Report
    run: RunReport
    stream: EventStream
    prepared: Prepared
    fs: SimFileSystem


def run_pipeline(s: Scenario, store: Optional[AnnotationStore] = None,
                 mappings: Optional[List[int]] = None) -> PipelineResult:
    """Execute the scenario with the coprocessor attached live.

    ``mappings`` replaces the vpns each TMMU is loaded with (default: the
    pages of the unit's program).
    """
    prep = prepare(s, store)
    tagspaces = [TagSpace(prep.programs[i].pages() if mappings is None else mappings)
                 for i in prep.unit_programs]
    inits = [unit_init(prep.programs[i]) for i in prep.unit_programs]
    cop = Coprocessor(prep.store, prep.config, tagspaces, inits)
    fs = s.fs.copy()
    stream = execute([(p, t.ctx) for p, t in zip(prep.programs, s.threads)], s.quantum, fs, cop)
    run = cop.finish()
    run.files = fs.tags()
    return PipelineResult(from_run(run, fs.tags()), run, stream, prep, fs)


def run_oracle_result(s: Scenario) -> OracleResult:
    prep = prepare(s)
    files = {k: (f.data, f.tag) for k, f in s.fs.files.items()}
    per_thread = prep.effective if s.dispatch_mode is DispatchMode.MULTI_POLICY or len(s.policies) > 1 \
        else prep.effective[:1]
    return oracle_taint([(p, t.ctx) for p, t in zip(prep.programs, s.threads)], s.quantum, files,
                        per_thread, multi_policy=s.dispatch_mode is DispatchMode.MULTI_POLICY)


def run_oracle(s: Scenario) -> Report:
    return from_oracle(run_oracle_result(s))


# -- manifests --------------------------------------------------------------

def _read(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise ManifestError(str(exc)) from None


def load_program(path: str) -> ToyProgram:
    name = os.path.splitext(os.path.basename(path))[0]
    return parse_program(_read(path), name=name)


def load_policy(spec: str, base_dir: str = ".") -> PolicyRegisters:
    if spec == "default":
        return DEFAULT_POLICY
    path = spec if os.path.isabs(spec) else os.path.join(base_dir, spec)
    return parse_policy(_read(path))


def load_manifest(path: str) -> Scenario:
    base = os.path.dirname(os.path.abspath(path))
    fields = dict(name=os.path.splitext(os.path.basename(path))[0], threads=[], policies=[])
    for lineno, raw in enumerate(_read(path).splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (x.strip() for x in line.partition("="))
        if not sep:
            raise ManifestError(f"{path}:{lineno}: expected key=value")
        try:
            if key == "name":
                fields["name"] = value
            elif key == "program":
                prog_path, asid, tid = value.split()
                full = prog_path if os.path.isabs(prog_path) else os.path.join(base, prog_path)
                fields["threads"].append(ThreadSpec(load_program(full), ContextId(int(asid, 16), int(tid, 16))))
            elif key in ("policy", "policies"):
                fields["policies"].extend(load_policy(v.strip(), base) for v in value.split(","))
            elif key == "strategy":
                fields["strategy"] = Strategy(value)
            elif key == "mode":
                fields["mode"] = PolicyMode(value)
            elif key == "quantum":
                fields["quantum"] = int(value, 0)
            elif key == "fs":
                full = value if os.path.isabs(value) else os.path.join(base, value)
                fields["fs"] = parse_fs_manifest(_read(full), os.path.dirname(full))
            elif key == "dispatch":
                fields["dispatch_mode"] = DispatchMode(value)
            elif key == "library":
                fields["library"] = value.lower() in ("yes", "true", "1", "on")
            else:
                raise ManifestError(f"{path}:{lineno}: unknown key {key!r}")
        except DiftError:
            raise
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    if not fields["policies"]:
        fields["policies"] = [DEFAULT_POLICY]
    return Scenario(**fields)


def corpus_path(*parts: str) -> str:
    return os.path.join(CORPUS_DIR, *parts)


def corpus_manifests() -> List[str]:
    return sorted(corpus_path(f) for f in os.listdir(CORPUS_DIR) if f.endswith(".manifest"))


def corpus_programs() -> List[str]:
    return sorted(corpus_path(f) for f in os.listdir(CORPUS_DIR) if f.endswith(".s"))
