"""Position-indexed signature database.

One open-addressing table per within-cluster sector position (tau). A
signature h lives in the table for its tau, at the first free slot of the
linear probe sequence

    l_0 = h mod 2^w,   l_c = (l_{c-1} + 1) mod 2^w

Occupancy is an explicit per-slot flag, so a zero signature is an ordinary
value. Slots never move once written and nothing is ever deleted, which is
what keeps lookups exact.
"""

from __future__ import annotations

import enum
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .hashing import DEFAULT_SECTOR_SIZE, HashAlgorithm, sector_signature

DEFAULT_INDEX_BITS = 22
DEFAULT_CLUSTER_SIZE = 8
MAX_INDEX_BITS = 32

MAGIC = b"SECSIGDB"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sHBBIIIQ")
COUNT = struct.Struct("<Q")
CHECKSUM = struct.Struct("<I")


class TableFullError(Exception):
    """A table has no free slot left for a new signature."""

    def __init__(self, tau: int, capacity: int):
        super().__init__(
            f"signature table for tau={tau} is full ({capacity} slots); rebuild with a larger index width"
        )
        self.tau = tau
        self.capacity = capacity


class DatabaseFormatError(Exception):
    """Base class for unreadable database files."""


class BadMagicError(DatabaseFormatError):
    pass


class UnsupportedVersionError(DatabaseFormatError):
    pass


class TruncatedError(DatabaseFormatError):
    pass


class ChecksumMismatchError(DatabaseFormatError):
    pass


class GeometryMismatchError(ValueError):
    """Scan parameters disagree with the database geometry."""


@dataclass(frozen=True, order=True)
class MasterIndexEntry:
    """Where a stored signature came from."""

    file_id: int
    byte_offset: int
    tau: int


class InsertStatus(enum.Enum):
    INSERTED = "inserted"
    DUPLICATE = "duplicate"


@dataclass(frozen=True)
class InsertResult:
    status: InsertStatus
    slot: int
    distance: int


@dataclass(frozen=True)
class LookupResult:
    found: bool
    slot: int
    probes: int
    entry: MasterIndexEntry | None = None


@dataclass
class MasterFile:
    """Manifest row for one master file."""

    file_id: int
    path: str
    size_bytes: int = 0
    sectors_ingested: int = 0
    sectors_skipped: int = 0
    duplicates: int = 0
    tail_bytes: int = 0
    error: str | None = None


class SignatureTable:
    """Fixed-size linear-probing table of 2^w slots.

    Each slot holds a signature plus the master file id and the sector
    number inside that file.
    """

    def __init__(self, index_bits: int, tau: int = 0, sector_size: int = DEFAULT_SECTOR_SIZE):
        if not 1 <= index_bits <= MAX_INDEX_BITS:
            raise ValueError(f"index width must be in 1..{MAX_INDEX_BITS}, got {index_bits}")
        self.index_bits = index_bits
        self.tau = tau
        self.sector_size = sector_size
        self.capacity = 1 << index_bits
        self.mask = self.capacity - 1
        self.signatures = np.zeros(self.capacity, dtype=np.uint64)
        self.occupied = np.zeros(self.capacity, dtype=bool)
        self.ref_file = np.zeros(self.capacity, dtype=np.uint32)
        self.ref_sector = np.zeros(self.capacity, dtype=np.uint32)
        self.occupied_count = 0

    def __len__(self) -> int:
        return self.occupied_count

    @property
    def occupancy(self) -> float:
        return self.occupied_count / self.capacity

    def entry_at(self, slot: int) -> MasterIndexEntry:
        return MasterIndexEntry(
            int(self.ref_file[slot]), int(self.ref_sector[slot]) * self.sector_size, self.tau
        )

    def _check_ref(self, ref: MasterIndexEntry) -> int:
        sector_no, rem = divmod(ref.byte_offset, self.sector_size)
        if rem:
            raise ValueError(f"byte offset {ref.byte_offset} is not sector aligned")
        return sector_no

    def insert(self, h: int, ref: MasterIndexEntry) -> InsertResult:
        sector_no = self._check_ref(ref)
        if self.occupied_count == self.capacity:
            found = self.lookup(h)
            if found.found:
                return InsertResult(InsertStatus.DUPLICATE, found.slot, found.probes - 1)
            raise TableFullError(self.tau, self.capacity)
        slot = h & self.mask
        distance = 0
        while self.occupied[slot]:
            if int(self.signatures[slot]) == h:
                return InsertResult(InsertStatus.DUPLICATE, slot, distance)
            slot = (slot + 1) & self.mask
            distance += 1
        self.signatures[slot] = h
        self.ref_file[slot] = ref.file_id
        self.ref_sector[slot] = sector_no
        self.occupied[slot] = True
        self.occupied_count += 1
        return InsertResult(InsertStatus.INSERTED, slot, distance)

    def lookup(self, h: int) -> LookupResult:
        slot = h & self.mask
        for probes in range(1, self.capacity + 1):
            if not self.occupied[slot]:
                return LookupResult(False, slot, probes)
            if int(self.signatures[slot]) == h:
                return LookupResult(True, slot, probes, self.entry_at(slot))
            slot = (slot + 1) & self.mask
        return LookupResult(False, -1, self.capacity)

    def lookup_many(self, hs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised lookup.

        Returns (slots, probes): the matching slot or -1, and the number of
        slots inspected for each query.
        """
        hs = np.asarray(hs, dtype=np.uint64)
        n = hs.size
        slots = np.full(n, -1, dtype=np.int64)
        probes = np.zeros(n, dtype=np.int64)
        active = np.arange(n)
        want = hs
        pos = (hs & np.uint64(self.mask)).astype(np.int64)
        step = 0
        while active.size:
            step += 1
            occ = self.occupied[pos]
            hit = occ & (self.signatures[pos] == want)
            slots[active[hit]] = pos[hit]
            going = occ & ~hit
            if step >= self.capacity:
                probes[active] = step
                break
            probes[active[~going]] = step
            active = active[going]
            want = want[going]
            pos = (pos[going] + 1) & self.mask
        return slots, probes

    def insert_many(
        self, hs: np.ndarray, file_ids: np.ndarray | int, sector_nos: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Insert a batch of signatures.

        Returns (slots, distances, duplicate). Within the batch the earliest
        occurrence of a signature wins; later copies, and signatures already
        in the table, are reported as duplicates pointing at the holder's
        slot. Items walk their probe sequences in lock-step; when several
        reach the same empty slot in the same step, the earliest item takes
        it and the rest move on, so every chain stays gap-free.
        """
        hs = np.asarray(hs, dtype=np.uint64)
        n = hs.size
        file_ids = np.broadcast_to(np.asarray(file_ids, dtype=np.uint32), (n,))
        sector_nos = np.asarray(sector_nos, dtype=np.uint32)
        slots = np.full(n, -1, dtype=np.int64)
        duplicate = np.zeros(n, dtype=bool)
        if n == 0:
            return slots, np.zeros(0, dtype=np.int64), duplicate

        uniq, first = np.unique(hs, return_index=True)
        pending = np.sort(first)
        pos = (hs[pending] & np.uint64(self.mask)).astype(np.int64)
        while pending.size:
            if self.occupied_count == self.capacity:
                found, _ = self.lookup_many(hs[pending])
                if (found < 0).any():
                    raise TableFullError(self.tau, self.capacity)
                slots[pending] = found
                duplicate[pending] = True
                break
            occ = self.occupied[pos]
            same = occ & (self.signatures[pos] == hs[pending])
            slots[pending[same]] = pos[same]
            duplicate[pending[same]] = True

            free = ~occ
            free_pos = pos[free]
            # pending is in input order, so the first index per slot wins
            _, winners = np.unique(free_pos, return_index=True)
            room = self.capacity - self.occupied_count
            winners = np.sort(winners)[:room]
            win_items = pending[free][winners]
            win_pos = free_pos[winners]
            self.signatures[win_pos] = hs[win_items]
            self.ref_file[win_pos] = file_ids[win_items]
            self.ref_sector[win_pos] = sector_nos[win_items]
            self.occupied[win_pos] = True
            self.occupied_count += win_pos.size
            slots[win_items] = win_pos

            placed = same.copy()
            free_idx = np.flatnonzero(free)
            placed[free_idx[winners]] = True
            pending = pending[~placed]
            pos = (pos[~placed] + 1) & self.mask

        later = np.ones(n, dtype=bool)
        later[first] = False
        if later.any():
            holder = first[np.searchsorted(uniq, hs[later])]
            # np.unique's index is the first occurrence, so holder is resolved
            slots[later] = slots[holder]
            duplicate[later] = True
        home = (hs & np.uint64(self.mask)).astype(np.int64)
        distances = (slots - home) & self.mask
        return slots, distances, duplicate

    def probe_distance(self, slot: int) -> int:
        """Steps from the home slot of the signature stored at ``slot``."""
        return (slot - (int(self.signatures[slot]) & self.mask)) & self.mask

    def check_integrity(self) -> None:
        """Raise AssertionError unless every chain from home slot to resting
        slot is fully occupied."""
        occ = self.occupied
        if int(occ.sum()) != self.occupied_count:
            raise AssertionError("occupied_count disagrees with occupancy flags")
        if self.occupied_count == self.capacity:
            return
        # rotate so the array starts just after an empty slot, then measure
        # each occupied slot's distance back to the nearest empty one
        start = int(np.flatnonzero(~occ)[0]) + 1
        order = (np.arange(self.capacity) + start) & self.mask
        idx = np.arange(self.capacity)
        last_empty = np.maximum.accumulate(np.where(occ[order], -1, idx))
        run = np.empty(self.capacity, dtype=np.int64)
        run[order] = idx - last_empty
        slots = np.flatnonzero(occ)
        home = (self.signatures[slots] & np.uint64(self.mask)).astype(np.int64)
        dist = (slots - home) & self.mask
        bad = dist >= run[slots]
        if bad.any():
            raise AssertionError(f"broken probe chain at slots {slots[bad][:10].tolist()}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SignatureTable):
            return NotImplemented
        return (
            self.index_bits == other.index_bits
            and self.tau == other.tau
            and self.sector_size == other.sector_size
            and self.occupied_count == other.occupied_count
            and np.array_equal(self.occupied, other.occupied)
            and np.array_equal(self.signatures, other.signatures)
            and np.array_equal(self.ref_file, other.ref_file)
            and np.array_equal(self.ref_sector, other.ref_sector)
        )


@dataclass
class SignatureTableSet:
    """One SignatureTable per sector position inside a cluster."""

    algorithm: HashAlgorithm
    index_bits: int = DEFAULT_INDEX_BITS
    sector_size: int = DEFAULT_SECTOR_SIZE
    cluster_size: int = DEFAULT_CLUSTER_SIZE
    manifest: list[MasterFile] = field(default_factory=list)
    tables: list[SignatureTable] = field(default_factory=list)

    def __post_init__(self):
        self.algorithm = HashAlgorithm.parse(self.algorithm)
        if self.sector_size <= 0 or self.cluster_size <= 0:
            raise ValueError("sector and cluster sizes must be positive")
        if not self.tables:
            self.tables = [
                SignatureTable(self.index_bits, tau, self.sector_size) for tau in range(self.cluster_size)
            ]

    def tau_of(self, byte_offset: int) -> int:
        sector_no, rem = divmod(byte_offset, self.sector_size)
        if rem:
            raise ValueError(f"byte offset {byte_offset} is not sector aligned")
        return sector_no % self.cluster_size

    def insert_master_sector(self, sector: bytes, file_id: int, byte_offset: int) -> InsertResult:
        tau = self.tau_of(byte_offset)
        h = sector_signature(sector, self.algorithm, self.sector_size)
        return self.tables[tau].insert(h, MasterIndexEntry(file_id, byte_offset, tau))

    def lookup(self, tau: int, h: int) -> LookupResult:
        return self.tables[tau].lookup(h)

    def entry(self, tau: int, slot: int) -> MasterIndexEntry:
        return self.tables[tau].entry_at(slot)

    def occupancy(self) -> tuple[list[float], float]:
        """Per-table fill fractions and the capacity-weighted aggregate."""
        per = [t.occupancy for t in self.tables]
        total = sum(t.occupied_count for t in self.tables)
        return per, total / sum(t.capacity for t in self.tables)

    def master_path(self, file_id: int) -> str:
        return self.manifest[file_id].path

    def check_geometry(self, sector_size: int, cluster_size: int) -> None:
        if (sector_size, cluster_size) != (self.sector_size, self.cluster_size):
            raise GeometryMismatchError(
                f"database geometry is sector={self.sector_size} cluster={self.cluster_size}, "
                f"scan requested sector={sector_size} cluster={cluster_size}"
            )


# -- persistence -------------------------------------------------------------


def _manifest_bytes(manifest: list[MasterFile]) -> bytes:
    rows = [asdict(m) for m in manifest]
    return json.dumps(rows, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _table_chunks(table: SignatureTable) -> list[bytes]:
    return [
        table.signatures.astype("<u8", copy=False).tobytes(),
        table.ref_file.astype("<u4", copy=False).tobytes(),
        table.ref_sector.astype("<u4", copy=False).tobytes(),
        np.packbits(table.occupied, bitorder="little").tobytes(),
    ]


def _table_nbytes(index_bits: int) -> int:
    cap = 1 << index_bits
    return cap * 16 + (cap + 7) // 8


def write_db(dbset: SignatureTableSet, fh: BinaryIO) -> None:
    manifest = _manifest_bytes(dbset.manifest)
    head = HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        int(dbset.algorithm),
        dbset.index_bits,
        dbset.sector_size,
        dbset.cluster_size,
        0,
        len(manifest),
    ) + b"".join(COUNT.pack(t.occupied_count) for t in dbset.tables)
    chunks = [c for t in dbset.tables for c in _table_chunks(t)] + [manifest]
    crc = zlib.crc32(head)
    for c in chunks:
        crc = zlib.crc32(c, crc)
    fh.write(head)
    fh.write(CHECKSUM.pack(crc))
    for c in chunks:
        fh.write(c)


def save(dbset: SignatureTableSet, path: str | os.PathLike) -> None:
    """Write atomically: a failed save leaves no file behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            write_db(dbset, fh)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def loads(data: bytes) -> SignatureTableSet:
    if len(data) < len(MAGIC):
        raise TruncatedError(f"file is {len(data)} bytes, too short for a header")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {data[:len(MAGIC)]!r}")
    if len(data) < HEADER.size:
        raise TruncatedError("header is truncated")
    _, version, alg_id, index_bits, sector_size, cluster_size, _flags, manifest_len = HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} is not supported")
    try:
        algorithm = HashAlgorithm(alg_id)
    except ValueError:
        raise DatabaseFormatError(f"unknown algorithm id {alg_id}") from None
    if not 1 <= index_bits <= MAX_INDEX_BITS or sector_size == 0 or cluster_size == 0:
        raise DatabaseFormatError("implausible geometry in header")

    counts_end = HEADER.size + COUNT.size * cluster_size
    payload_start = counts_end + CHECKSUM.size
    expected = payload_start + cluster_size * _table_nbytes(index_bits) + manifest_len
    if len(data) < expected:
        raise TruncatedError(f"file is {len(data)} bytes, header implies {expected}")
    if len(data) > expected:
        raise DatabaseFormatError(f"{len(data) - expected} trailing bytes after manifest")
    (stored,) = CHECKSUM.unpack_from(data, counts_end)
    view = memoryview(data)
    crc = zlib.crc32(view[payload_start:], zlib.crc32(view[:counts_end]))
    if crc != stored:
        raise ChecksumMismatchError(f"checksum {crc:#010x} != stored {stored:#010x}")

    counts = [COUNT.unpack_from(data, HEADER.size + COUNT.size * i)[0] for i in range(cluster_size)]
    cap = 1 << index_bits
    tables = []
    off = payload_start
    for tau in range(cluster_size):
        t = SignatureTable(index_bits, tau, sector_size)
        t.signatures = np.frombuffer(data, "<u8", cap, off).astype(np.uint64)
        off += cap * 8
        t.ref_file = np.frombuffer(data, "<u4", cap, off).astype(np.uint32)
        off += cap * 4
        t.ref_sector = np.frombuffer(data, "<u4", cap, off).astype(np.uint32)
        off += cap * 4
        packed = np.frombuffer(data, np.uint8, (cap + 7) // 8, off)
        off += (cap + 7) // 8
        t.occupied = np.unpackbits(packed, count=cap, bitorder="little").astype(bool)
        t.occupied_count = counts[tau]
        if int(t.occupied.sum()) != counts[tau]:
            raise DatabaseFormatError(f"table {tau}: occupied count disagrees with bitmap")
        tables.append(t)
    try:
        rows = json.loads(bytes(view[off:]).decode("utf-8"))
        manifest = [MasterFile(**row) for row in rows]
    except (ValueError, TypeError) as exc:
        raise DatabaseFormatError(f"unreadable manifest: {exc}") from None
    return SignatureTableSet(algorithm, index_bits, sector_size, cluster_size, manifest, tables)


def load(path: str | os.PathLike) -> SignatureTableSet:
    return loads(Path(path).read_bytes())
