"""Scan disk images for sectors whose signature is in the database.

The engine is a three-stage pipeline:

    reader (one per image, owns ``buffers_per_source`` buffers)
      -> matcher pool (hash every sector of a buffer, probe the tables)
      -> verifier (byte-for-byte comparison against the master file)

Readers block when all of their buffers are in flight, which gives the
classic double-buffering behaviour at the default of two. The database is
shared read-only. ``sequential_scan`` is a plain single-threaded scan kept
as the reference the pipeline is tested against.
"""

from __future__ import annotations

import enum
import json
import os
import queue
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .hashing import DEFAULT_SECTOR_SIZE, HashAlgorithm, hash_sectors
from .sigdb import SignatureTableSet

_POLL = 0.05


class MatchStatus(str, enum.Enum):
    CANDIDATE = "candidate"
    VERIFIED = "verified"
    FALSE_POSITIVE = "false_positive"
    UNVERIFIABLE = "unverifiable"


@dataclass(frozen=True, order=True)
class MatchRecord:
    image: str
    image_offset: int
    sector_index: int
    tau: int
    signature: int
    master_file_id: int
    master_byte_offset: int
    status: MatchStatus = MatchStatus.CANDIDATE


@dataclass
class ScanConfig:
    sector_size: int = DEFAULT_SECTOR_SIZE
    cluster_size: int = 8
    batch_size: int = 16
    buffer_size: int = 4 << 20
    buffers_per_source: int = 2
    partition_offset: int = 0
    verify: bool = True
    lookup_all_tables: bool = False
    workers: int = 0  # 0: one per CPU, at most 8
    verifiers: int = 1

    def __post_init__(self):
        if min(self.sector_size, self.cluster_size, self.batch_size, self.buffer_size) <= 0:
            raise ValueError("sizes must be positive")
        if self.buffer_size % (self.sector_size * self.batch_size):
            raise ValueError(
                f"buffer_size {self.buffer_size} is not a multiple of sector_size*batch_size "
                f"({self.sector_size * self.batch_size})"
            )
        if self.partition_offset < 0 or self.partition_offset % self.sector_size:
            raise ValueError("partition_offset must be a non-negative multiple of sector_size")
        if self.buffers_per_source < 1 or self.verifiers < 1 or self.workers < 0:
            raise ValueError("buffers_per_source and verifiers must be >= 1, workers >= 0")

    @property
    def worker_count(self) -> int:
        return self.workers or min(8, os.cpu_count() or 1)


@dataclass
class ScanStats:
    bytes_scanned: int = 0
    sectors_hashed: int = 0
    tail_bytes: int = 0
    candidates: int = 0
    verified: int = 0
    false_positives: int = 0
    unverifiable: int = 0
    lookups: int = 0
    probes: int = 0
    elapsed: float = 0.0

    @property
    def bytes_per_second(self) -> float:
        return self.bytes_scanned / self.elapsed if self.elapsed > 0 else 0.0

    @property
    def mean_probe_distance(self) -> float:
        """Mean number of slots inspected beyond the home slot per lookup."""
        return (self.probes - self.lookups) / self.lookups if self.lookups else 0.0

    def count(self, record: MatchRecord) -> None:
        self.candidates += 1
        if record.status is MatchStatus.VERIFIED:
            self.verified += 1
        elif record.status is MatchStatus.FALSE_POSITIVE:
            self.false_positives += 1
        elif record.status is MatchStatus.UNVERIFIABLE:
            self.unverifiable += 1

    def summary(self) -> str:
        return (
            f"scanned {self.bytes_scanned} bytes ({self.sectors_hashed} sectors, {self.tail_bytes} tail bytes) "
            f"in {self.elapsed:.3f}s = {self.bytes_per_second / 1e6:.1f} MB/s; "
            f"candidates={self.candidates} verified={self.verified} "
            f"false_positives={self.false_positives} unverifiable={self.unverifiable} "
            f"mean_probe_distance={self.mean_probe_distance:.3f}"
        )


@dataclass
class ScanResult:
    records: list[MatchRecord]
    stats: ScanStats


class ScanError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- image sources -----------------------------------------------------------


class ImageSource:
    name: str
    size: int

    def open(self):
        """Return a reader with ``readinto(offset, buf) -> int`` and ``close()``."""
        raise NotImplementedError


class FileImage(ImageSource):
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.name = os.fspath(path)
        self.size = os.stat(self.path).st_size

    def open(self):
        return _FileReader(open(self.path, "rb"))


class _FileReader:
    def __init__(self, fh):
        self.fh = fh

    def readinto(self, offset: int, buf) -> int:
        self.fh.seek(offset)
        return self.fh.readinto(buf)

    def close(self):
        self.fh.close()


class MemoryImage(ImageSource):
    """An image already staged in memory."""

    def __init__(self, data, name: str = "<memory>"):
        self.data = memoryview(data).cast("B")
        self.name = name
        self.size = len(self.data)

    def open(self):
        return self

    def readinto(self, offset: int, buf) -> int:
        n = min(len(buf), self.size - offset)
        memoryview(buf)[:n] = self.data[offset : offset + n]
        return n

    def close(self):
        pass


def as_source(image) -> ImageSource:
    if isinstance(image, ImageSource):
        return image
    if isinstance(image, (str, os.PathLike)):
        return FileImage(image)
    return MemoryImage(image)


# -- master corpus -----------------------------------------------------------


class Corpus:
    """Resolves manifest file ids to readable master files."""

    def __init__(self, dbset: SignatureTableSet, base_dir: str | os.PathLike | None = None):
        self.dbset = dbset
        self.base_dir = Path(base_dir) if base_dir is not None else None

    def path(self, file_id: int) -> Path:
        p = Path(self.dbset.master_path(file_id))
        if self.base_dir is not None and not p.is_absolute():
            p = self.base_dir / p
        return p

    def read(self, file_id: int, offset: int, size: int) -> bytes:
        with open(self.path(file_id), "rb") as fh:
            fh.seek(offset)
            return fh.read(size)


def _resolve(record: MatchRecord, sector: bytes, corpus: Corpus) -> MatchRecord:
    try:
        master = corpus.read(record.master_file_id, record.master_byte_offset, len(sector))
    except (OSError, IndexError):
        return replace(record, status=MatchStatus.UNVERIFIABLE)
    status = MatchStatus.VERIFIED if master == sector else MatchStatus.FALSE_POSITIVE
    return replace(record, status=status)


def verify_candidate(
    record: MatchRecord, image, corpus: Corpus, sector_size: int = DEFAULT_SECTOR_SIZE
) -> MatchRecord:
    """Compare the image sector and the master sector byte for byte."""
    if record.status is not MatchStatus.CANDIDATE:
        raise ValueError(f"record is already {record.status.value}")
    source = as_source(image)
    buf = bytearray(sector_size)
    reader = source.open()
    try:
        n = reader.readinto(record.image_offset, buf)
    finally:
        reader.close()
    return _resolve(record, bytes(buf[:n]), corpus)


# -- matching ----------------------------------------------------------------


def hash_batch(data, algorithm: HashAlgorithm, batch_size: int, sector_size: int = DEFAULT_SECTOR_SIZE) -> np.ndarray:
    """Signatures of one batch of ``batch_size`` consecutive sectors."""
    arr = np.frombuffer(data, dtype=np.uint8)
    if arr.size != batch_size * sector_size:
        raise ValueError(f"batch is {arr.size} bytes, expected {batch_size}*{sector_size}")
    return hash_sectors(arr.reshape(batch_size, sector_size), algorithm)


def hash_cohorts(sectors: np.ndarray, algorithm: HashAlgorithm, batch_size: int) -> np.ndarray:
    """Sign a buffer as a stack of batches; a short final batch is allowed.

    Full batches are laid out as (batches, batch_size, sector) and signed
    together, which is the CPU stand-in for running many cohorts at once.
    """
    n, ss = sectors.shape
    full = n - n % batch_size
    out = np.empty(n, dtype=np.uint64)
    if full:
        stacked = sectors[:full].reshape(-1, batch_size, ss)
        out[:full] = hash_sectors(stacked.reshape(-1, ss), algorithm)
    if full < n:
        out[full:] = hash_sectors(sectors[full:], algorithm)
    return out


def _match_buffer(
    dbset: SignatureTableSet, config: ScanConfig, image: str, start: int, data
) -> tuple[list[tuple[MatchRecord, bytes]], int, int]:
    """Hash and look up every full sector of ``data`` (image bytes at ``start``).

    Returns (candidates with their sector bytes, lookups, probes).
    """
    ss, cs = config.sector_size, config.cluster_size
    sectors = np.frombuffer(data, dtype=np.uint8, count=len(data) - len(data) % ss).reshape(-1, ss)
    n = sectors.shape[0]
    if n == 0:
        return [], 0, 0
    sigs = hash_cohorts(sectors, dbset.algorithm, config.batch_size)
    first_rel = (start - config.partition_offset) // ss
    taus = (first_rel + np.arange(n)) % cs
    found = []
    lookups = probes = 0
    for tau in range(cs):
        rows = np.flatnonzero(taus == tau)
        if rows.size == 0:
            continue
        table_ids = range(cs) if config.lookup_all_tables else (tau,)
        for t in table_ids:
            table = dbset.tables[t]
            slots, nprobe = table.lookup_many(sigs[rows])
            lookups += rows.size
            probes += int(nprobe.sum())
            for row, slot in zip(rows[slots >= 0].tolist(), slots[slots >= 0].tolist()):
                entry = table.entry_at(slot)
                offset = start + row * ss
                rec = MatchRecord(
                    image=image,
                    image_offset=offset,
                    sector_index=offset // ss,
                    tau=tau,
                    signature=int(sigs[row]),
                    master_file_id=entry.file_id,
                    master_byte_offset=entry.byte_offset,
                )
                found.append((rec, sectors[row].tobytes()))
    return found, lookups, probes


class _Abort(Exception):
    pass


def _put(q: queue.Queue, item, abort: threading.Event) -> None:
    while True:
        if abort.is_set():
            raise _Abort
        try:
            q.put(item, timeout=_POLL)
            return
        except queue.Full:
            pass


def _get(q: queue.Queue, abort: threading.Event):
    while True:
        if abort.is_set():
            raise _Abort
        try:
            return q.get(timeout=_POLL)
        except queue.Empty:
            pass


def _scan_extent(source: ImageSource, config: ScanConfig) -> tuple[int, int]:
    span = max(0, source.size - config.partition_offset)
    return span - span % config.sector_size, span % config.sector_size


def scan_image(
    dbset: SignatureTableSet,
    images,
    config: ScanConfig | None = None,
    corpus: Corpus | None = None,
    on_record: Callable[[MatchRecord], None] | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> ScanResult:
    """Pipelined scan of one image or a list of images.

    Records come back sorted; ``on_record`` sees them in completion order
    from the verifier thread.
    """
    config = config or ScanConfig()
    dbset.check_geometry(config.sector_size, config.cluster_size)
    if config.verify and corpus is None:
        corpus = Corpus(dbset)
    if isinstance(images, (str, os.PathLike, ImageSource, bytes, bytearray, memoryview, np.ndarray)):
        images = [images]
    try:
        sources = [as_source(im) for im in images]
    except OSError as exc:
        raise ScanError("reader", exc) from exc

    stats = ScanStats()
    for src in sources:
        body, tail = _scan_extent(src, config)
        stats.bytes_scanned += body
        stats.sectors_hashed += body // config.sector_size
        stats.tail_bytes += tail
    total = stats.bytes_scanned + stats.tail_bytes

    abort = threading.Event()
    errors: list[tuple[str, BaseException]] = []
    lock = threading.Lock()
    records: list[MatchRecord] = []
    done_bytes = [0]

    n_workers = config.worker_count
    free = [queue.Queue() for _ in sources]
    for fq in free:
        for _ in range(config.buffers_per_source):
            fq.put(bytearray(config.buffer_size))
    work: queue.Queue = queue.Queue(maxsize=max(1, len(sources) * config.buffers_per_source))
    cands: queue.Queue = queue.Queue()

    def guarded(stage, fn, *args):
        def run():
            try:
                fn(*args)
            except _Abort:
                pass
            except BaseException as exc:  # noqa: BLE001 - re-raised on the caller's thread
                with lock:
                    errors.append((stage, exc))
                abort.set()

        return threading.Thread(target=run, name=f"scan-{stage}", daemon=True)

    def reader(i: int) -> None:
        src = sources[i]
        body, tail = _scan_extent(src, config)
        end = config.partition_offset + body + tail
        handle = src.open()
        try:
            offset = config.partition_offset
            while offset < end:
                buf = _get(free[i], abort)
                want = min(config.buffer_size, end - offset)
                got = handle.readinto(offset, memoryview(buf)[:want])
                if got != want:
                    raise OSError(f"short read from {src.name} at offset {offset}: {got} of {want} bytes")
                _put(work, (i, offset, buf, got), abort)
                offset += got
        finally:
            handle.close()

    def matcher() -> None:
        while True:
            item = _get(work, abort)
            if item is None:
                return
            i, start, buf, nbytes = item
            try:
                found, lookups, probes = _match_buffer(
                    dbset, config, sources[i].name, start, memoryview(buf)[:nbytes]
                )
            finally:
                free[i].put(buf)
            with lock:
                stats.lookups += lookups
                stats.probes += probes
                done_bytes[0] += nbytes
                done = done_bytes[0]
            if found:
                _put(cands, found, abort)
            if progress is not None:
                progress(done, total)

    def verifier() -> None:
        while True:
            batch = _get(cands, abort)
            if batch is None:
                return
            for rec, sector in batch:
                if config.verify:
                    rec = _resolve(rec, sector, corpus)
                with lock:
                    records.append(rec)
                    stats.count(rec)
                if on_record is not None:
                    on_record(rec)

    t0 = time.perf_counter()
    readers = [guarded("reader", reader, i) for i in range(len(sources))]
    matchers = [guarded("matcher", matcher) for _ in range(n_workers)]
    verifiers = [guarded("verifier", verifier) for _ in range(config.verifiers)]
    for t in readers + matchers + verifiers:
        t.start()
    try:
        for t in readers:
            t.join()
        for _ in matchers:
            _put(work, None, abort)
        for t in matchers:
            t.join()
        for _ in verifiers:
            _put(cands, None, abort)
    except _Abort:
        pass
    except BaseException:
        abort.set()
        raise
    finally:
        for t in readers + matchers + verifiers:
            t.join()
    stats.elapsed = time.perf_counter() - t0
    if errors:
        stage, exc = errors[0]
        raise ScanError(stage, exc) from exc
    return ScanResult(sorted(records), stats)


def sequential_scan(
    dbset: SignatureTableSet,
    images,
    config: ScanConfig | None = None,
    corpus: Corpus | None = None,
) -> ScanResult:
    """Reference scan: one buffer, one thread, one sector at a time.

    Every sector gets its own scalar table probe and its own tau; the only
    code shared with the pipeline is the vectorised hash kernel.
    """
    config = config or ScanConfig()
    dbset.check_geometry(config.sector_size, config.cluster_size)
    if config.verify and corpus is None:
        corpus = Corpus(dbset)
    if isinstance(images, (str, os.PathLike, ImageSource, bytes, bytearray, memoryview, np.ndarray)):
        images = [images]
    ss, cs = config.sector_size, config.cluster_size
    chunk = ss * 2048
    stats = ScanStats()
    records = []
    t0 = time.perf_counter()
    for image in images:
        src = as_source(image)
        handle = src.open()
        buf = bytearray(chunk)
        offset = config.partition_offset
        try:
            while offset < src.size:
                got = handle.readinto(offset, buf)
                if got <= 0:
                    break
                whole = got - got % ss
                sigs = hash_sectors(np.frombuffer(buf, np.uint8, whole).reshape(-1, ss), dbset.algorithm)
                for k in range(whole // ss):
                    pos = offset + k * ss
                    tau = ((pos - config.partition_offset) // ss) % cs
                    h = int(sigs[k])
                    sector = bytes(buf[k * ss : (k + 1) * ss])
                    for t in range(cs) if config.lookup_all_tables else (tau,):
                        res = dbset.tables[t].lookup(h)
                        stats.lookups += 1
                        stats.probes += res.probes
                        if not res.found:
                            continue
                        rec = MatchRecord(
                            src.name, pos, pos // ss, tau, h, res.entry.file_id, res.entry.byte_offset
                        )
                        if config.verify:
                            rec = _resolve(rec, sector, corpus)
                        records.append(rec)
                        stats.count(rec)
                stats.sectors_hashed += whole // ss
                stats.bytes_scanned += whole
                stats.tail_bytes += got - whole
                offset += got
        finally:
            handle.close()
    stats.elapsed = time.perf_counter() - t0
    return ScanResult(sorted(records), stats)


# -- report format -----------------------------------------------------------


def record_to_json(record: MatchRecord, dbset: SignatureTableSet | None = None) -> str:
    master_path = dbset.master_path(record.master_file_id) if dbset is not None else None
    return json.dumps(
        {
            "image": record.image,
            "image_offset": record.image_offset,
            "sector_index": record.sector_index,
            "tau": record.tau,
            "signature": f"{record.signature:016x}",
            "master_file_id": record.master_file_id,
            "master_path": master_path,
            "master_offset": record.master_byte_offset,
            "status": record.status.value,
        },
        sort_keys=True,
    )


def write_report(records: Iterable[MatchRecord], fh, dbset: SignatureTableSet | None = None) -> None:
    for rec in records:
        fh.write(record_to_json(rec, dbset))
        fh.write("\n")


def read_report(lines: Sequence[str]) -> list[dict]:
    return [json.loads(line) for line in lines if line.strip()]
