"""Command-line front end.

Exit codes: 0 success (or reports equivalent), 1 a violation was detected
(or reports differ), 2 usage or input error.
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional

from .annot import (
    DEFAULT_POLICY,
    PolicyMode,
    format_policy,
    load_store,
    save_store,
)
from .errors import DiftError
from .pft import decode_stream, entry_address, entry_slot, write_decoded_file
from .tagmem import format_mappings, parse_mappings
from .report import diff_reports
from .scenario import (
    Scenario,
    corpus_path,
    corpus_programs,
    load_manifest,
    load_policy,
    load_program,
    run_oracle,
    run_oracle_result,
    run_pipeline,
)
from .toyisa.analyze import analyze
from .toyisa.instrument import Strategy, instrument, metrics
from .toyisa.program import format_program

EXIT_OK, EXIT_DETECTED, EXIT_ERROR = 0, 1, 2
DEMOS = {"secret-leak": "secret-leak.manifest", "library-wrapper": "library-wrapper.manifest"}


def _write(out_dir: Optional[str], name: str, data):
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(os.path.join(out_dir, name), mode) as fh:
        fh.write(data)


def _overrides(args, s: Scenario) -> Scenario:
    changes = {}
    if getattr(args, "strategy", None):
        changes["strategy"] = Strategy(args.strategy)
    if getattr(args, "mode", None):
        changes["mode"] = PolicyMode(args.mode)
    if getattr(args, "quantum", None) is not None:
        changes["quantum"] = args.quantum
    if getattr(args, "policies", None):
        changes["policies"] = [load_policy(p) for p in args.policies.split(",")]
    if getattr(args, "no_lib_instrumentation", False):
        changes["library"] = False
    return s.variant(**changes) if changes else s


def _metrics_lines(original) -> List[str]:
    table = metrics(original, [instrument(original, s) for s in Strategy])
    lines = []
    for s in (Strategy.RELATED, Strategy.S1, Strategy.S2):
        m = table[s]
        lines.append(f"metrics.{s.value}: sites={m.sites} added={m.added_instructions} "
                     f"size={m.code_size_bytes} overhead={m.overhead_percent:.2f}%")
    return lines


# -- commands ---------------------------------------------------------------

def cmd_instrument(args) -> int:
    p = load_program(args.program)
    q = instrument(p, Strategy(args.strategy or "s2"), library=not args.no_lib_instrumentation)
    listing = format_program(q, listing=True)
    print(listing, end="")
    for line in _metrics_lines(p):
        print(f"; {line}")
    _write(args.out, f"{p.name}.{q.instrumented}.s", format_program(q))
    return EXIT_OK


def cmd_analyze(args) -> int:
    p = load_program(args.program)
    strategy = Strategy(args.strategy) if args.strategy else None
    if not p.instrumented:
        p = instrument(p, strategy or Strategy.S2, library=not args.no_lib_instrumentation)
    policy = load_policy(args.policies.split(",")[0]) if args.policies else DEFAULT_POLICY
    mode = PolicyMode(args.mode) if args.mode else policy.mode
    store = analyze(p, mode, strategy, policy)
    for address, annotations in store.items():
        print(f"{address:#010x}:")
        for a in annotations:
            print(f"    {a}")
    _write(args.out, f"{p.name}.tann", save_store(store))
    return EXIT_OK


def cmd_run(args) -> int:
    s = _overrides(args, load_manifest(args.manifest))
    store = None
    if args.annotations:
        with open(args.annotations, "rb") as fh:
            store = load_store(fh.read())
    mappings = None
    if args.mappings:
        with open(args.mappings) as fh:
            mappings = parse_mappings(fh.read())
    result = run_pipeline(s, store, mappings)
    text = result.report.to_json() if args.json else result.report.to_text()
    print(text, end="")
    _write(args.out, "report.json" if args.json else "report.txt", text)
    _write(args.out, "trace.pft", bytes(result.stream.pft))
    entries, slots = decode_stream(bytes(result.stream.pft))
    _write(args.out, "trace.decoded", write_decoded_file(entries, slots))
    _write(args.out, "annotations.tann", save_store(result.prepared.store))
    for k, p in enumerate(result.prepared.programs):
        _write(args.out, f"program{k}.s", format_program(p))
        _write(args.out, f"program{k}.maps", format_mappings(p.pages()))
    for k, policy in enumerate(s.policies):
        _write(args.out, f"policy{k}.policy", format_policy(policy))
    return EXIT_DETECTED if result.report.violations else EXIT_OK


def cmd_oracle(args) -> int:
    s = _overrides(args, load_manifest(args.manifest))
    report = run_oracle(s)
    text = report.to_json() if args.json else report.to_text()
    print(text, end="")
    _write(args.out, "oracle.json" if args.json else "oracle.txt", text)
    return EXIT_DETECTED if report.violations else EXIT_OK


def cmd_diff(args) -> int:
    with open(args.a) as fa, open(args.b) as fb:
        differences = diff_reports(fa.read(), fb.read())
    for line in differences:
        print(line)
    if not differences:
        print("equivalent")
    return EXIT_DETECTED if differences else EXIT_OK


def cmd_decode_trace(args) -> int:
    with open(args.trace, "rb") as fh:
        data = fh.read()
    entries, slots = decode_stream(data)
    for entry in entries:
        slot = entry_slot(entry)
        print(f"{entry:08x} address={entry_address(entry):#010x} slot={slot} context={slots[slot]}")
    for i, ctx in enumerate(slots):
        print(f"slot.{i}={ctx} asid={ctx.asid:x} tid={ctx.tid:x}")
    return EXIT_OK


def cmd_stats(args) -> int:
    paths = args.programs or corpus_programs()
    ordered = True
    for path in paths:
        p = load_program(path)
        table = metrics(p, [instrument(p, s) for s in Strategy])
        counts = [table[s].added_instructions for s in (Strategy.S2, Strategy.S1, Strategy.RELATED)]
        ok = counts[0] <= counts[1] <= counts[2]
        ordered &= ok
        print(f"{p.name}: original={p.instruction_count} instructions ({p.size_bytes} bytes)")
        for line in _metrics_lines(p):
            print(f"  {line}")
        ratio = "inf" if not counts[0] else f"{counts[2] / counts[0]:.2f}"
        print(f"  related/s2={ratio} order={'s2<=s1<=related' if ok else 'VIOLATED'}")
    return EXIT_OK if ordered else EXIT_DETECTED


def cmd_demo_attack(args) -> int:
    s = load_manifest(corpus_path(DEMOS[args.name]))
    s = _overrides(args, s)
    result = run_pipeline(s)
    print(result.report.to_text(), end="")
    _write(args.out, f"{args.name}.report.txt", result.report.to_text())
    detected = bool(result.report.violations)
    if detected:
        v = result.report.violations[0]
        print(f"demo.{args.name}=DETECTED context={v[0]} block={v[1]:#010x} kind={v[2]} tag={v[3]:#x}")
        return EXIT_DETECTED
    reference = run_oracle_result(s.variant(library=True))
    if reference.violations:
        v = reference.violations[0]
        print(f"demo.{args.name}=MISSED the full-information reference flags context={v.context} "
              f"pc={v.pc:#010x}; library code ran without instrumentation")
    else:
        print(f"demo.{args.name}=clean")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, manifest: bool):
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--mode", choices=[m.value for m in PolicyMode])
    p.add_argument("--no-lib-instrumentation", action="store_true",
                   help="leave library-section code uninstrumented and unannotated")
    p.add_argument("--out", metavar="DIR", help="write output files into DIR")
    p.add_argument("--policies", metavar="FILE[,FILE...]")
    if manifest:
        p.add_argument("--quantum", type=int, metavar="N")
        p.add_argument("--json", action="store_true", help="emit the report as JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diftsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("instrument", help="insert instrumentation and print the listing and metrics")
    p.add_argument("program")
    _common(p, manifest=False)
    p.set_defaults(func=cmd_instrument)

    p = sub.add_parser("analyze", help="print (and save) the annotation store of a program")
    p.add_argument("program")
    _common(p, manifest=False)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run", help="run a manifest through the coprocessor pipeline")
    p.add_argument("manifest")
    p.add_argument("--annotations", metavar="FILE", help="use this annotation file instead of analyzing")
    p.add_argument("--mappings", metavar="FILE", help="TMMU pages (one hex vpn per line) instead of the program's")
    _common(p, manifest=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("oracle", help="run a manifest through the reference taint interpreter")
    p.add_argument("manifest")
    _common(p, manifest=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("diff", help="compare two reports; exit 0 iff tag-equivalent")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("decode-trace", help="decode a raw trace file")
    p.add_argument("trace")
    p.set_defaults(func=cmd_decode_trace)

    p = sub.add_parser("stats", help="instrumentation footprint per strategy")
    p.add_argument("programs", nargs="*", help="program files (default: the bundled corpus)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("demo-attack", help="run a bundled attack scenario")
    p.add_argument("name", choices=sorted(DEMOS))
    _common(p, manifest=True)
    p.set_defaults(func=cmd_demo_attack)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "quantum", None) is not None and args.quantum < 1:
        parser.error("--quantum must be at least 1")
    try:
        return args.func(args)
    except DiftError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
