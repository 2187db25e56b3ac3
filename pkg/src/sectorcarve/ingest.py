"""Turn a corpus of master files into a populated SignatureTableSet."""

from __future__ import annotations

import enum
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .hashing import hash_sectors
from .sigdb import MasterFile, SignatureTableSet

log = logging.getLogger(__name__)

READ_CHUNK = 4 << 20


class SkipReason(enum.Enum):
    ALL_ZERO = "all-zero"
    ALL_ONES = "all-0xff"


@dataclass(frozen=True)
class SkipRules:
    skip_zero: bool = True
    skip_ones: bool = True


def apply_skip_rules(sector: bytes, rules: SkipRules = SkipRules()) -> SkipReason | None:
    """None means keep."""
    if rules.skip_zero and not any(sector):
        return SkipReason.ALL_ZERO
    if rules.skip_ones and sector.count(0xFF) == len(sector):
        return SkipReason.ALL_ONES
    return None


def skip_mask(sectors: np.ndarray, rules: SkipRules) -> np.ndarray:
    """Vectorised apply_skip_rules over the rows of a 2-D uint8 array."""
    skip = np.zeros(sectors.shape[0], dtype=bool)
    if rules.skip_zero:
        skip |= sectors.max(axis=1) == 0
    if rules.skip_ones:
        skip |= sectors.min(axis=1) == 0xFF
    return skip


@dataclass
class HashedFile:
    signatures: np.ndarray
    keep: np.ndarray
    size_bytes: int
    tail_bytes: int
    error: str | None = None


def hash_file(path: str | os.PathLike, dbset: SignatureTableSet, rules: SkipRules) -> HashedFile:
    """Read and sign every full sector of ``path``; safe to run off-thread."""
    sigs, keeps = [], []
    size = 0
    ss = dbset.sector_size
    try:
        with open(path, "rb") as fh:
            carry = b""
            while True:
                chunk = fh.read(READ_CHUNK)
                if not chunk:
                    break
                size += len(chunk)
                data = carry + chunk
                whole = len(data) - len(data) % ss
                carry = data[whole:]
                if whole:
                    sectors = np.frombuffer(data, np.uint8, whole).reshape(-1, ss)
                    sigs.append(hash_sectors(sectors, dbset.algorithm))
                    keeps.append(~skip_mask(sectors, rules))
    except OSError as exc:
        return HashedFile(np.zeros(0, np.uint64), np.zeros(0, bool), size, 0, f"{type(exc).__name__}: {exc}")
    if not sigs:
        return HashedFile(np.zeros(0, np.uint64), np.zeros(0, bool), size, size % ss)
    return HashedFile(np.concatenate(sigs), np.concatenate(keeps), size, size % ss)


def insert_hashed(dbset: SignatureTableSet, file_id: int, hashed: HashedFile) -> MasterFile:
    """Insert one hashed file; raises TableFullError naming the tau."""
    n = hashed.signatures.size
    sector_nos = np.arange(n, dtype=np.int64)
    dups = 0
    for tau in range(dbset.cluster_size):
        sel = (sector_nos % dbset.cluster_size == tau) & hashed.keep
        if sel.any():
            _, _, dup = dbset.tables[tau].insert_many(hashed.signatures[sel], file_id, sector_nos[sel])
            dups += int(dup.sum())
    kept = int(hashed.keep.sum())
    return MasterFile(
        file_id=file_id,
        path="",
        size_bytes=hashed.size_bytes,
        sectors_ingested=kept,
        sectors_skipped=n - kept,
        duplicates=dups,
        tail_bytes=hashed.tail_bytes,
        error=hashed.error,
    )


def ingest_file(
    dbset: SignatureTableSet, path: str | os.PathLike, file_id: int, rules: SkipRules = SkipRules()
) -> MasterFile:
    """Ingest one file and record it in the manifest under ``file_id``."""
    if file_id > len(dbset.manifest):
        raise ValueError(f"file id {file_id} leaves a gap in the manifest")
    entry = insert_hashed(dbset, file_id, hash_file(path, dbset, rules))
    entry.path = os.fspath(path)
    _record(dbset, entry)
    return entry


def _record(dbset: SignatureTableSet, entry: MasterFile) -> None:
    if entry.file_id < len(dbset.manifest):
        dbset.manifest[entry.file_id] = entry
    else:
        dbset.manifest.append(entry)


def iter_corpus(paths: Iterable[str | os.PathLike]) -> Iterator[Path]:
    """Expand directories (recursively, sorted) and pass files through."""
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for root, dirs, files in os.walk(p):
                dirs.sort()
                for name in sorted(files):
                    yield Path(root) / name
        else:
            yield p


def ingest_corpus(
    dbset: SignatureTableSet,
    paths: Iterable[str | os.PathLike],
    rules: SkipRules = SkipRules(),
    workers: int = 1,
    path_base: str | os.PathLike | None = None,
) -> list[MasterFile]:
    """Ingest files in order, assigning dense ids from len(dbset.manifest).

    Files are hashed by ``workers`` threads; insertion stays on the calling
    thread in corpus order, so the result equals a sequential ingest. When
    ``path_base`` is given, manifest paths are stored relative to it.
    """
    files = list(iter_corpus(paths))
    first_id = len(dbset.manifest)
    entries = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        hashed_iter = pool.map(lambda p: hash_file(p, dbset, rules), files)
        for i, (path, hashed) in enumerate(zip(files, hashed_iter)):
            entry = insert_hashed(dbset, first_id + i, hashed)
            entry.path = os.path.relpath(path, path_base) if path_base is not None else os.fspath(path)
            if entry.error:
                log.warning("skipping %s: %s", path, entry.error)
            _record(dbset, entry)
            entries.append(entry)
    return entries


def build_report_lines(entries: list[MasterFile]) -> list[str]:
    """Machine-readable build stats, one JSON object per line."""
    return [json.dumps(asdict(e), sort_keys=True) for e in entries]
