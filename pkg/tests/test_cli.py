from __future__ import annotations

import os
import subprocess
import sys

import pytest

from diftsim.cli import main
from diftsim.scenario import corpus_path


def cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_instrument_stackcopy(capsys):
    code, out, _ = cli(capsys, "instrument", corpus_path("stackcopy.s"), "--strategy", "s1")
    assert code == 0
    assert "str sp, [r9]                ; 0x10170" in out
    assert "str r2, [r9]                ; 0x10178" in out
    assert "metrics.s1: sites=2 added=2 size=36 overhead=28.57%" in out


def test_instrument_sponly_s2(capsys):
    code, out, _ = cli(capsys, "instrument", corpus_path("sponly.s"), "--strategy", "s2")
    assert code == 0 and "[r9]" not in out
    assert "metrics.s2: sites=0 added=0 size=32 overhead=0.00%" in out


def test_stats_ordering(capsys):
    code, out, _ = cli(capsys, "stats")
    assert code == 0
    assert "VIOLATED" not in out
    assert "related/s2=18.00" in out


def test_run_oracle_diff(capsys, tmp_path):
    manifest = corpus_path("two-thread.manifest")
    assert cli(capsys, "run", manifest, "--out", str(tmp_path / "run"))[0] == 0
    assert cli(capsys, "oracle", manifest, "--out", str(tmp_path / "oracle"))[0] == 0
    code, out, _ = cli(capsys, "diff", str(tmp_path / "run" / "report.txt"), str(tmp_path / "oracle" / "oracle.txt"))
    assert code == 0 and out.strip() == "equivalent"
    for name in ("trace.pft", "trace.decoded", "annotations.tann", "program0.s", "program0.maps", "policy0.policy"):
        assert (tmp_path / "run" / name).exists()


def test_diff_reports_difference(capsys, tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("unit.0.trf.r1=0x1\n")
    b.write_text("unit.0.trf.r1=0x2\n")
    code, out, _ = cli(capsys, "diff", str(a), str(b))
    assert code == 1 and "unit.0.trf.r1" in out


def test_run_json(capsys):
    code, out, _ = cli(capsys, "run", corpus_path("stackcopy.manifest"), "--json")
    assert code == 0 and out.lstrip().startswith("{")


def test_run_with_saved_annotations(capsys, tmp_path):
    manifest = corpus_path("kernel.manifest")
    cli(capsys, "run", manifest, "--out", str(tmp_path))
    code, out, _ = cli(capsys, "run", manifest, "--annotations", str(tmp_path / "annotations.tann"))
    assert code == 0 and "file.out=0x5" in out


def test_run_corrupted_annotations(capsys, tmp_path):
    bad = tmp_path / "bad.tann"
    bad.write_bytes(b"JUNK" + bytes(12))
    code, _, err = cli(capsys, "run", corpus_path("stackcopy.manifest"), "--annotations", str(bad))
    assert code == 2 and "CorruptHeader" in err


def test_run_with_mappings(capsys, tmp_path):
    maps = tmp_path / "maps"
    maps.write_text("00010\n")
    code, _, err = cli(capsys, "run", corpus_path("stackcopy.manifest"), "--mappings", str(maps))
    assert code == 2 and "TmmuMiss" in err


def test_decode_trace(capsys, tmp_path):
    cli(capsys, "run", corpus_path("two-thread.manifest"), "--out", str(tmp_path))
    code, out, _ = cli(capsys, "decode-trace", str(tmp_path / "trace.pft"))
    assert code == 0
    assert "slot.0=42:4d2 asid=42 tid=4d2" in out
    assert "slot.1=42:4d3 asid=42 tid=4d3" in out
    empty = tmp_path / "empty.pft"
    empty.write_bytes(b"")
    assert cli(capsys, "decode-trace", str(empty))[:2] == (0, "")
    truncated = tmp_path / "cut.pft"
    truncated.write_bytes((tmp_path / "trace.pft").read_bytes()[:9])
    code, _, err = cli(capsys, "decode-trace", str(truncated))
    assert code == 2 and "MalformedPacket" in err and "offset 6" in err


def test_analyze_writes_store(capsys, tmp_path):
    code, out, _ = cli(capsys, "analyze", corpus_path("stackcopy.s"), "--strategy", "s2", "--mode", "compile",
                       "--out", str(tmp_path))
    assert code == 0
    assert "TagTRM2 CopySrc1 T3,G13,T13,#4" in out
    assert (tmp_path / "stackcopy.tann").exists()


def test_demo_attacks(capsys):
    code, out, _ = cli(capsys, "demo-attack", "secret-leak")
    assert code == 1 and "demo.secret-leak=DETECTED" in out
    code, out, _ = cli(capsys, "demo-attack", "library-wrapper")
    assert code == 1 and "demo.library-wrapper=DETECTED" in out
    code, out, _ = cli(capsys, "demo-attack", "library-wrapper", "--no-lib-instrumentation")
    assert code == 0 and "demo.library-wrapper=MISSED" in out


def test_missing_file_is_input_error(capsys):
    code, _, err = cli(capsys, "run", "/nonexistent.manifest")
    assert code == 2 and "ManifestError" in err


def test_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", corpus_path("stackcopy.manifest"), "--quantum", "0"])
    assert exc.value.code == 2


def test_console_entry_point():
    env = dict(os.environ)
    result = subprocess.run([sys.executable, "-m", "diftsim", "demo-attack", "secret-leak"],
                            capture_output=True, text=True, env=env)
    assert result.returncode == 1
    assert "DETECTED" in result.stdout
