import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_bytes
from sectorcarve.hashing import HashAlgorithm, sector_signature
from sectorcarve.ingest import (
    SkipReason,
    SkipRules,
    apply_skip_rules,
    build_report_lines,
    hash_file,
    ingest_corpus,
    ingest_file,
    insert_hashed,
    iter_corpus,
    skip_mask,
)
from sectorcarve.sigdb import MasterIndexEntry, SignatureTableSet, TableFullError


def new_db(w=10, alg=HashAlgorithm.CRC64):
    return SignatureTableSet(alg, index_bits=w)


def test_one_cluster_file_fills_each_tau_once(make_corpus):
    (path,), (blob,) = make_corpus([4096])
    db = new_db()
    entry = ingest_file(db, path, 0)
    assert (entry.sectors_ingested, entry.sectors_skipped, entry.tail_bytes) == (8, 0, 0)
    assert [t.occupied_count for t in db.tables] == [1] * 8
    for tau in range(8):
        r = db.lookup(tau, sector_signature(blob[tau * 512 : (tau + 1) * 512], db.algorithm))
        assert r.entry == MasterIndexEntry(0, tau * 512, tau)


def test_partial_tail_is_ignored(make_corpus):
    (path,), (blob,) = make_corpus([700])
    db = new_db()
    entry = ingest_file(db, path, 0)
    assert (entry.sectors_ingested, entry.tail_bytes, entry.size_bytes) == (1, 188, 700)
    assert sum(t.occupied_count for t in db.tables) == 1


def test_empty_file(make_corpus):
    (path,), _ = make_corpus([0])
    db = new_db()
    entry = ingest_file(db, path, 0)
    assert (entry.sectors_ingested, entry.sectors_skipped, entry.error) == (0, 0, None)
    assert db.manifest == [entry]


def test_skip_rules_default_and_disabled(tmp_path):
    data = bytes(512) + b"\xff" * 512 + bytes(range(256)) * 2 + bytes(512)
    p = tmp_path / "mixed.bin"
    p.write_bytes(data)
    db = new_db()
    e = ingest_file(db, p, 0)
    assert (e.sectors_ingested, e.sectors_skipped) == (1, 3)

    db2 = new_db()
    e2 = ingest_file(db2, p, 0, SkipRules(skip_zero=False, skip_ones=False))
    assert (e2.sectors_ingested, e2.sectors_skipped) == (4, 0)
    assert db2.lookup(0, sector_signature(bytes(512), db2.algorithm)).found
    # the second zero sector sits at tau 3, so it is stored there too
    assert db2.lookup(3, sector_signature(bytes(512), db2.algorithm)).found


def test_apply_skip_rules_scalar_and_vector_agree(rng):
    rows = [bytes(512), b"\xff" * 512, random_bytes(rng, 512), b"\x00" * 511 + b"\x01"]
    rules = SkipRules()
    assert [apply_skip_rules(r) for r in rows] == [SkipReason.ALL_ZERO, SkipReason.ALL_ONES, None, None]
    mat = np.frombuffer(b"".join(rows), np.uint8).reshape(-1, 512)
    assert skip_mask(mat, rules).tolist() == [apply_skip_rules(r, rules) is not None for r in rows]
    assert not skip_mask(mat, SkipRules(False, False)).any()


@settings(max_examples=30, deadline=None)
@given(size=st.integers(0, 6000), zero_sectors=st.lists(st.integers(0, 11), max_size=4))
def test_counts_cover_every_full_sector(tmp_path_factory, size, zero_sectors):
    r = np.random.default_rng(size)
    data = bytearray(random_bytes(r, size))
    for s in zero_sectors:
        data[s * 512 : (s + 1) * 512] = bytes(len(data[s * 512 : (s + 1) * 512]))
    p = tmp_path_factory.mktemp("h") / "f.bin"
    p.write_bytes(bytes(data))
    e = ingest_file(new_db(8), p, 0)
    assert e.sectors_ingested + e.sectors_skipped == size // 512
    assert e.tail_bytes == size % 512


def _table_state(db):
    return [sorted(zip(t.signatures[t.occupied].tolist(), t.ref_file[t.occupied].tolist(),
                       t.ref_sector[t.occupied].tolist())) for t in db.tables]


def test_order_independent_contents_for_distinct_files(make_corpus):
    paths, _ = make_corpus([5000, 8192, 1536, 12000])
    a, b = new_db(), new_db()
    for i, p in enumerate(paths):
        insert_hashed(a, i, hash_file(p, a, SkipRules()))
    for i in [2, 0, 3, 1]:
        insert_hashed(b, i, hash_file(paths[i], b, SkipRules()))
    assert _table_state(a) == _table_state(b)


def test_duplicate_sector_across_files_keeps_first(tmp_path, rng):
    shared = random_bytes(rng, 512)
    (tmp_path / "a.bin").write_bytes(shared + random_bytes(rng, 512))
    (tmp_path / "b.bin").write_bytes(shared)
    db = new_db()
    entries = ingest_corpus(db, [tmp_path / "a.bin", tmp_path / "b.bin"])
    assert entries[1].duplicates == 1
    assert db.lookup(0, sector_signature(shared, db.algorithm)).entry.file_id == 0


def test_io_error_is_recorded_and_ingest_continues(make_corpus, tmp_path):
    paths, _ = make_corpus([1024, 2048])
    missing = tmp_path / "corpus" / "gone.bin"
    db = new_db()
    entries = ingest_corpus(db, [paths[0], missing, paths[1]])
    assert [e.file_id for e in entries] == [0, 1, 2]
    assert entries[1].error and "FileNotFoundError" in entries[1].error
    assert entries[1].sectors_ingested == 0
    assert entries[2].sectors_ingested == 4
    assert [m.file_id for m in db.manifest] == [0, 1, 2]


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores file permissions")
def test_unreadable_file_recorded(make_corpus):
    (p,), _ = make_corpus([1024])
    os.chmod(p, 0)
    e = ingest_corpus(new_db(), [p])[0]
    assert e.error and "PermissionError" in e.error


def test_table_full_names_tau(make_corpus):
    (p,), _ = make_corpus([4096 * 3])
    db = new_db(w=1)
    with pytest.raises(TableFullError) as exc:
        ingest_file(db, p, 0)
    assert exc.value.tau == 0
    assert "tau=0" in str(exc.value)


def test_parallel_hashing_equals_serial(make_corpus):
    paths, _ = make_corpus([4096 * k + 100 for k in range(12)])
    a, b = new_db(12), new_db(12)
    ea = ingest_corpus(a, paths, workers=1)
    eb = ingest_corpus(b, paths, workers=4)
    assert ea == eb
    assert all(x == y for x, y in zip(a.tables, b.tables))


def test_iter_corpus_is_sorted_and_recursive(tmp_path):
    for rel in ["b/z.bin", "b/a.bin", "a.bin", "c/d/e.bin"]:
        (tmp_path / rel).parent.mkdir(parents=True, exist_ok=True)
        (tmp_path / rel).write_bytes(b"x")
    got = [p.relative_to(tmp_path).as_posix() for p in iter_corpus([tmp_path])]
    assert got == ["a.bin", "b/a.bin", "b/z.bin", "c/d/e.bin"]


def test_relative_manifest_paths_and_report(make_corpus, tmp_path):
    paths, _ = make_corpus([1024])
    db = new_db()
    entries = ingest_corpus(db, [tmp_path / "corpus"], path_base=tmp_path)
    assert db.manifest[0].path == os.path.join("corpus", paths[0].name)
    row = json.loads(build_report_lines(entries)[0])
    assert row["sectors_ingested"] == 2 and row["file_id"] == 0


def test_ingest_file_rejects_id_gap(make_corpus):
    (p,), _ = make_corpus([512])
    db = new_db()
    with pytest.raises(ValueError):
        ingest_file(db, p, 3)
    assert sum(t.occupied_count for t in db.tables) == 0
