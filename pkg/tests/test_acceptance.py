"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines."""
from __future__ import annotations

import random
import time
from fractions import Fraction

import pytest

from diftsim.annot import (
    _OPERANDS,
    GRF_BASE,
    Annotation,
    AnnotationStore,
    GrfAlu,
    InstrClass,
    KERNEL_READ,
    KERNEL_WRITE,
    Opcode,
    PolicyMode,
    Rule,
    decode_annotation,
    encode_annotation,
    load_store,
    lookup_block,
    save_store,
)
from diftsim.cli import main
from diftsim.dispatch import ReadMsg, TraceEntry, WriteMsg
from diftsim.errors import TmmuFull
from diftsim.pft import (
    ASync,
    BranchAddr,
    ContextId,
    ISync,
    decode_stream,
    encode_packets,
    entry_address,
    entry_slot,
    parse_packets,
)
from diftsim.report import diff_reports, parse_report
from diftsim.scenario import (
    corpus_manifests,
    corpus_path,
    corpus_programs,
    load_manifest,
    load_program,
    run_oracle,
    run_pipeline,
)
from diftsim.tagmem import TMMU_ENTRIES, TagMemory, Tmmu, read_tag, register_mapping, translate, write_tag
from diftsim.toyisa.gen import random_scenario
from diftsim.toyisa.instrument import Strategy, instrument, metrics

criterion = pytest.mark.criterion

T1 = ContextId(0x42, 0x4D2)
T2 = ContextId(0x42, 0x4D3)


# -- 1 ----------------------------------------------------------------------

@criterion(1, "pipeline equals reference interpreter on random programs")
def test_oracle_equivalence():
    started = time.perf_counter()
    runs = 0
    for seed in range(200):
        for strategy in (Strategy.S1, Strategy.S2):
            for mode in (PolicyMode.RUNTIME, PolicyMode.COMPILE_TIME):
                s = random_scenario(seed, strategy, mode)
                pipeline = run_pipeline(s).report.to_text()
                oracle = run_oracle(s).to_text()
                assert diff_reports(pipeline, oracle) == [], f"seed {seed} {strategy.name} {mode.name}"
                runs += 1
    elapsed = time.perf_counter() - started
    assert runs == 800
    assert elapsed < 120, f"{elapsed:.1f}s"


# -- 2 ----------------------------------------------------------------------

def _random_packets(rng: random.Random):
    packets = []
    for _ in range(rng.randrange(0, 12)):
        kind = rng.randrange(3)
        address = rng.randrange(0, 1 << 30) * 4
        if kind == 0:
            packets.append(ASync())
        elif kind == 1:
            packets.append(ISync(address, ContextId(rng.randrange(256), rng.randrange(1 << 24))))
        else:
            packets.append(BranchAddr(address))
    return packets


def _reference_decode(packets):
    """Entry list by walking the packet objects directly."""
    slots, entries, current = [], [], None
    for p in packets:
        if isinstance(p, ISync):
            if p.ctx not in slots:
                slots.append(p.ctx)
            current = slots.index(p.ctx)
            entries.append(p.address | current)
        elif isinstance(p, BranchAddr):
            entries.append(p.address | current)
    return entries, slots


def _random_annotation(rng: random.Random) -> Annotation:
    op = rng.choice(list(Opcode))
    operands = []
    for kind in _OPERANDS[op]:
        if kind is None:
            operands.append(0)
        elif kind == "tag":
            operands.append(rng.randrange(0, GRF_BASE))
        else:
            operands.append(rng.randrange(GRF_BASE, 64))
    if op in (Opcode.TagRRR2, Opcode.TagMTR2, Opcode.TagTRM2, Opcode.TagITR2, Opcode.TagTRI2):
        aluop = int(rng.choice(list(Rule)))
    elif op is Opcode.GrfOp:
        aluop = int(rng.choice(list(GrfAlu)))
    else:
        aluop = 0
    if op is Opcode.KernelMsg:
        imm = rng.choice([KERNEL_READ, KERNEL_WRITE])
    else:
        imm = rng.randrange(-(1 << 31), 1 << 31)
    return Annotation(op, rng.choice(list(InstrClass)), *operands, aluop, imm)


@criterion(2, "trace packet and annotation codecs round trip")
def test_codec_round_trips():
    rng = random.Random(20240)
    for _ in range(10_000):
        packets = _random_packets(rng)
        data = encode_packets(packets)
        assert parse_packets(data) == packets
        # a decodable stream starts at a sync and names at most four contexts
        first_sync = next((k for k, p in enumerate(packets) if isinstance(p, ISync)), len(packets))
        usable = packets[first_sync:]
        if len({p.ctx for p in usable if isinstance(p, ISync)}) <= 4:
            assert decode_stream(encode_packets(usable)) == _reference_decode(usable)
    for _ in range(10_000):
        a = _random_annotation(rng)
        assert decode_annotation(encode_annotation(a)) == a
        blocks = {rng.randrange(0, 1 << 30) * 4: [_random_annotation(rng) for _ in range(rng.randrange(0, 5))]
                  for _ in range(rng.randrange(0, 4))}
        store = AnnotationStore(blocks)
        assert dict(load_store(save_store(store)).items()) == dict(store.items())


# -- 3 ----------------------------------------------------------------------

def _unit_keys(text: str, unit: int):
    prefix = f"unit.{unit}."
    return {k[len(prefix):]: v for k, v in parse_report(text).items()
            if k.startswith(prefix) and not k.startswith(prefix + "info.")}


@criterion(3, "two-thread demux is quantum invariant and matches isolated runs")
def test_multi_thread_demux():
    s = load_manifest(corpus_path("two-thread.manifest"))
    assert [t.ctx for t in s.threads] == [T1, T2]
    isolated = []
    for t in s.threads:
        alone = s.variant(threads=[t], fs=s.fs.copy())
        isolated.append(_unit_keys(run_pipeline(alone).report.to_text(), 0))
    sections = None
    for quantum in (1, 5, 50):
        result = run_pipeline(s.variant(quantum=quantum))
        text = result.report.to_text()
        current = [_unit_keys(text, 0), _unit_keys(text, 1)]
        assert current[0]["context"] == "42:4d2" and current[1]["context"] == "42:4d3"
        assert current == isolated, f"quantum {quantum}"
        if sections is not None:
            assert current == sections
        sections = current
        entries, slots = decode_stream(bytes(result.stream.pft))
        assert slots == [T1, T2]
        lo, hi = result.prepared.programs[1].code_range
        thread2 = [e for e in entries if lo <= entry_address(e) < hi]
        assert thread2 and all(e & 0x3 == 0b01 for e in thread2)
        assert all(entry_slot(e) == 0 for e in entries if not lo <= entry_address(e) < hi)


# -- 4 ----------------------------------------------------------------------

@criterion(4, "runtime and compile-time policies agree on the corpus")
def test_policy_mode_equivalence():
    manifests = corpus_manifests()
    assert len(manifests) >= 8
    for path in manifests:
        s = load_manifest(path)
        for strategy in Strategy:
            runtime = run_pipeline(s.variant(strategy=strategy, mode=PolicyMode.RUNTIME)).report
            compiled = run_pipeline(s.variant(strategy=strategy, mode=PolicyMode.COMPILE_TIME)).report
            assert diff_reports(runtime.to_text(), compiled.to_text()) == [], f"{path} {strategy.name}"
            assert runtime.violations == compiled.violations


# -- 5 ----------------------------------------------------------------------

@criterion(5, "instrumentation ordering and footprint")
def test_instrumentation_footprint():
    programs = corpus_programs()
    assert programs
    for path in programs:
        p = load_program(path)
        table = metrics(p, [instrument(p, s) for s in Strategy])
        added = {s: table[s].added_instructions for s in Strategy}
        assert added[Strategy.S2] <= added[Strategy.S1] <= added[Strategy.RELATED], path
        for s in Strategy:
            assert table[s].overhead == Fraction(added[s] * 4, p.size_bytes)
    matrix = load_program(corpus_path("matrix.s"))
    table = metrics(matrix, [instrument(matrix, s) for s in Strategy])
    assert table[Strategy.S2].added_instructions > 0
    ratio = Fraction(table[Strategy.RELATED].added_instructions, table[Strategy.S2].added_instructions)
    assert ratio >= 3


# -- 6 ----------------------------------------------------------------------

@criterion(6, "TMMU capacity and translation")
def test_tmmu_capacity():
    rng = random.Random(6)
    tmmu, mem = Tmmu(), TagMemory()
    vpns = rng.sample(range(1 << 20), TMMU_ENTRIES + 1)
    expected_page = {}
    for k, vpn in enumerate(vpns[:TMMU_ENTRIES]):
        register_mapping(tmmu, mem, vpn)
        expected_page[vpn] = k
    assert TMMU_ENTRIES == 64 and tmmu.valid_count == 64
    with pytest.raises(TmmuFull):
        register_mapping(tmmu, mem, vpns[-1])
    shadow = {}
    for _ in range(1000):
        vaddr = (rng.choice(vpns[:TMMU_ENTRIES]) << 12) | rng.randrange(0, 1 << 12)
        assert translate(tmmu, vaddr) == (expected_page[vaddr >> 12], (vaddr & 0xFFF) >> 2)
        word = vaddr & ~0x3
        if rng.random() < 0.5:
            tag = rng.randrange(1 << 32)
            write_tag(tmmu, mem, vaddr, tag)
            shadow[word] = tag
        assert read_tag(tmmu, mem, vaddr) == shadow.get(word, 0)


# -- 7 ----------------------------------------------------------------------

def _expected_executed(result):
    """Annotations each kernel message must wait for, counted from the event stream.

    Walks the trace entries in the order they were produced and, per context,
    counts every non-marker annotation of earlier blocks plus those in front of
    the marker that matches the message.
    """
    entries, slots = decode_stream(bytes(result.stream.pft))
    store = result.prepared.store
    flattened = {ctx: [] for ctx in slots}
    served = {ctx: 0 for ctx in slots}
    out = []
    entry = 0
    for position, event in enumerate(result.stream.events):
        if isinstance(event, TraceEntry):
            e = entries[entry]
            entry += 1
            flattened[slots[entry_slot(e)]].extend(lookup_block(store, entry_address(e)))
        elif isinstance(event, (ReadMsg, WriteMsg)):
            kind = KERNEL_READ if isinstance(event, ReadMsg) else KERNEL_WRITE
            seen = flattened[event.ctx]
            markers = [k for k, a in enumerate(seen) if a.opcode is Opcode.KernelMsg]
            marker = markers[served[event.ctx]]
            served[event.ctx] += 1
            assert seen[marker].imm == kind
            count = sum(1 for a in seen[:marker] if a.opcode is not Opcode.KernelMsg)
            out.append((position, event.ctx, "read" if kind == KERNEL_READ else "write", count))
    return out


@criterion(7, "kernel read/write protocol")
def test_kernel_protocol():
    s = load_manifest(corpus_path("kernel.manifest"))
    result = run_pipeline(s)
    assert result.report.files["in"] == s.fs.files["in"].tag == 0x5
    assert result.report.files["out"] == 0x5
    write = next(e for e in result.stream.events if isinstance(e, WriteMsg))
    assert result.stream.write_replies == [0x5]
    assert result.run.units[0].tags.fold_range(write.buf_vaddr, write.count_bytes) == 0x5
    checked = 0
    scenarios = [s, load_manifest(corpus_path("two-thread.manifest"))]
    scenarios += [random_scenario(seed) for seed in range(40)]
    for scenario in scenarios:
        result = run_pipeline(scenario)
        if result.report.violations:
            continue
        expected = _expected_executed(result)
        log = [(r.position, r.ctx, r.kind, r.executed) for r in result.run.kernel_log]
        assert log == expected, scenario.name
        for position, *_ in log:
            assert isinstance(result.stream.events[position], (ReadMsg, WriteMsg))
        checked += len(log)
    assert checked >= 10


# -- 8 ----------------------------------------------------------------------

def _cli(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


@criterion(8, "attack demos")
def test_attack_demos(capsys):
    code, out = _cli(capsys, "demo-attack", "secret-leak")
    assert code == 1
    violations = [line for line in out.splitlines() if ".violation=" in line and not line.endswith("=none")]
    assert len(violations) == 1
    assert "demo.secret-leak=DETECTED" in out
    code, out = _cli(capsys, "demo-attack", "library-wrapper")
    assert code == 1 and "demo.library-wrapper=DETECTED" in out
    code, out = _cli(capsys, "demo-attack", "library-wrapper", "--no-lib-instrumentation")
    assert code == 0
    assert "demo.library-wrapper=MISSED" in out


# -- 9 ----------------------------------------------------------------------

@criterion(9, "multi-policy isolation")
def test_multi_policy():
    dual = run_pipeline(load_manifest(corpus_path("multi-policy.manifest"))).report
    single = run_pipeline(load_manifest(corpus_path("secret-leak.manifest"))).report
    a, b = dual.units
    assert a.violation is not None
    assert b.violation is None
    assert single.violations == [a.violation]
    assert dual.unit_text(0) == single.unit_text(0)
