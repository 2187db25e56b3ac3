import argparse
import json
import subprocess
import sys

import pytest

from conftest import random_bytes
from sectorcarve.cli import EXIT_FATAL, EXIT_MATCHES, EXIT_OK, EXIT_USAGE, build_parser, main, parse_size
from sectorcarve.sigdb import load


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def built(tmp_path, make_corpus):
    paths, blobs = make_corpus([4096, 4096 * 3 + 100])
    db = tmp_path / "sig.db"
    assert run("build", tmp_path / "corpus", "-o", db, "--index-bits", 8) == EXIT_OK
    return db, paths, blobs


def test_build_reports_per_tau_occupancy(tmp_path, make_corpus, capsys):
    make_corpus([4096])
    db = tmp_path / "one.db"
    assert run("build", tmp_path / "corpus", "-o", db, "--index-bits", 8, "--algorithm", "sdbm") == EXIT_OK
    out = capsys.readouterr().out
    for tau in range(8):
        assert f"tau {tau}: 1/256 slots (0.003906)" in out
    assert "sectors_ingested=8" in out
    loaded = load(db)
    assert loaded.algorithm.name == "SDBM" and loaded.index_bits == 8


def test_build_empty_corpus_fails_without_output(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    db = tmp_path / "x.db"
    assert run("build", tmp_path / "empty", "-o", db) == EXIT_FATAL
    assert not db.exists()
    assert "empty" in capsys.readouterr().err


def test_rebuild_is_byte_identical(tmp_path, make_corpus):
    make_corpus([4096, 5000, 12288])
    a, b = tmp_path / "a.db", tmp_path / "b.db"
    assert run("build", tmp_path / "corpus", "-o", a, "--index-bits", 10, "--workers", 3) == EXIT_OK
    assert run("build", tmp_path / "corpus", "-o", b, "--index-bits", 10) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_build_table_full_suggests_width(tmp_path, make_corpus, capsys):
    make_corpus([4096 * 4])
    assert run("build", tmp_path / "corpus", "-o", tmp_path / "f.db", "--index-bits", 1) == EXIT_FATAL
    assert "--index-bits 2" in capsys.readouterr().err
    assert not (tmp_path / "f.db").exists()


def test_build_stats_file(tmp_path, make_corpus):
    make_corpus([1024, 700])
    stats = tmp_path / "stats.jsonl"
    assert run("build", tmp_path / "corpus", "-o", tmp_path / "s.db", "--index-bits", 6, "--stats", stats) == EXIT_OK
    rows = [json.loads(line) for line in stats.read_text().splitlines()]
    assert [(r["sectors_ingested"], r["tail_bytes"]) for r in rows] == [(2, 0), (1, 188)]


def test_scan_planted_image(built, tmp_path, rng, capsys):
    db, _, blobs = built
    img = tmp_path / "disk.img"
    img.write_bytes(random_bytes(rng, 8192) + blobs[1][:8192] + random_bytes(rng, 4096))
    report = tmp_path / "r.jsonl"
    assert run("scan", db, img, "--report", report, "--progress-interval", 0) == EXIT_OK
    rows = [json.loads(line) for line in report.read_text().splitlines()]
    assert len(rows) == 16 and {r["status"] for r in rows} == {"verified"}
    assert rows[0]["image_offset"] == 8192 and rows[0]["master_path"].endswith("master_0001.bin")
    assert "verified=16" in capsys.readouterr().err
    assert run("scan", db, img, "--report", report, "--fail-on-match", "--progress-interval", 0) == EXIT_MATCHES


def test_scan_clean_image_with_fail_on_match(built, tmp_path, rng, capsys):
    db, _, _ = built
    img = tmp_path / "clean.img"
    img.write_bytes(random_bytes(rng, 65536))
    assert run("scan", db, img, "--fail-on-match", "--progress-interval", 0) == EXIT_OK
    assert capsys.readouterr().out == ""


def test_scan_geometry_mismatch_is_usage_error(built, tmp_path, capsys):
    db, _, _ = built
    img = tmp_path / "z.img"
    img.write_bytes(bytes(4096))
    assert run("scan", db, img, "--cluster-size", 4) == EXIT_USAGE
    assert "refusing" in capsys.readouterr().err


def test_scan_bad_database(tmp_path, capsys):
    bad = tmp_path / "bad.db"
    bad.write_bytes(b"not a database at all, clearly")
    img = tmp_path / "i.img"
    img.write_bytes(bytes(512))
    assert run("scan", bad, img) == EXIT_FATAL
    assert "cannot load" in capsys.readouterr().err


def test_scan_missing_image(built, tmp_path):
    db, _, _ = built
    assert run("scan", db, tmp_path / "missing.img") == EXIT_FATAL


def test_collide_single_sector(tmp_path):
    out = tmp_path / "c.json"
    assert run("collide", "-n", 1, "--output", out) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["colliding_sectors"] == 0 and rep["sectors_tested"] == 1


def test_bench_single_point(capsys):
    assert run("bench", "--occupancies", "0.5", "--size", "256K", "--index-bits", 8, "--repeats", 1) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "occupancy,mb_per_s,mean_probe_distance" and len(lines) == 2


def test_bench_five_points_non_decreasing(tmp_path):
    csv_path, rec = tmp_path / "b.csv", tmp_path / "b.jsonl"
    assert run("bench", "--size", "1M", "--index-bits", 12, "--repeats", 1,
               "--csv", csv_path, "--records", rec) == EXIT_OK
    rows = csv_path.read_text().splitlines()[1:]
    assert len(rows) == 5
    dist = [float(r.split(",")[2]) for r in rows]
    assert dist == sorted(dist)
    assert len(rec.read_text().splitlines()) == 5


@pytest.mark.parametrize("argv", [
    ["build", "x", "-o", "y", "--bogus"],
    ["scan", "db", "img", "--nope"],
    ["collide", "-n", "0"],
    ["bench", "--occupancies", "0.5,1.2"],
    ["build", "x", "-o", "y", "--algorithm", "md5"],
    ["frobnicate"],
    [],
])
def test_bad_arguments_are_rejected(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == EXIT_USAGE


def test_every_flag_is_documented():
    parser = build_parser()
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    assert set(subs.choices) == {"build", "scan", "collide", "bench"}
    for name, sp in subs.choices.items():
        for action in sp._actions:
            if isinstance(action, argparse._HelpAction):
                continue
            assert action.help, f"{name} {action.option_strings or action.dest} lacks help"
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text


def test_parse_size():
    assert parse_size("4096") == 4096
    assert parse_size("4K") == 4096
    assert parse_size("16MiB") == 16 << 20
    with pytest.raises(argparse.ArgumentTypeError):
        parse_size("lots")


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "sectorcarve", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "build" in out.stdout and "bench" in out.stdout
