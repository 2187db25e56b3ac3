"""Desk-scale reproductions: signature collisions and probe cost vs. occupancy."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass

import numpy as np

from .hashing import DEFAULT_SECTOR_SIZE, HashAlgorithm, hash_sectors
from .scanner import MemoryImage, ScanConfig, scan_image
from .sigdb import SignatureTableSet

CHUNK_SECTORS = 1 << 16


@dataclass(frozen=True)
class CollisionReport:
    sectors_tested: int
    distinct_signatures: int
    colliding_sectors: int
    collision_rate: float
    algorithm: str
    seed: int
    resampled: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class ThroughputPoint:
    occupancy: float
    bytes_per_second: float
    mean_probe_distance: float
    runs: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _chunk(seed: int, index: int, count: int, sector_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    return rng.integers(0, 256, (count, sector_size), dtype=np.uint8)


def collision_experiment(
    n_sectors: int,
    algorithm: HashAlgorithm = HashAlgorithm.DJB2,
    seed: int = 0,
    sector_size: int = DEFAULT_SECTOR_SIZE,
) -> CollisionReport:
    """Sign ``n_sectors`` distinct pseudo-random sectors and count collisions.

    Sectors are drawn in seeded chunks and never held all at once. Two
    identical sectors always share a signature, so distinctness only has to
    be checked inside colliding groups; a sector that turns out to be an
    exact copy of an earlier one is redrawn.
    """
    if n_sectors < 1:
        raise ValueError("n_sectors must be >= 1")
    if sector_size < 8 and n_sectors > 256**sector_size:
        raise ValueError(f"only {256**sector_size} distinct {sector_size}-byte sectors exist")
    algorithm = HashAlgorithm.parse(algorithm)
    sigs = np.empty(n_sectors, dtype=np.uint64)
    for k, lo in enumerate(range(0, n_sectors, CHUNK_SECTORS)):
        count = min(CHUNK_SECTORS, n_sectors - lo)
        sigs[lo : lo + count] = hash_sectors(_chunk(seed, k, count, sector_size), algorithm)

    replaced: dict[int, bytes] = {}

    def sector_bytes(i: int) -> bytes:
        if i in replaced:
            return replaced[i]
        k, r = divmod(i, CHUNK_SECTORS)
        count = min(CHUNK_SECTORS, n_sectors - k * CHUNK_SECTORS)
        return _chunk(seed, k, count, sector_size)[r].tobytes()

    redraw = np.random.default_rng([seed, 1 << 40])
    while True:
        order = np.argsort(sigs, kind="stable")
        ss = sigs[order]
        dup_pos = np.flatnonzero(ss[1:] == ss[:-1]) + 1
        clash = False
        for sig in np.unique(ss[dup_pos]):
            members = np.sort(order[ss == sig])
            seen: dict[bytes, int] = {}
            for i in members.tolist():
                b = sector_bytes(i)
                if b in seen:
                    new = redraw.integers(0, 256, sector_size, dtype=np.uint8)
                    replaced[i] = new.tobytes()
                    sigs[i] = hash_sectors(new[None, :], algorithm)[0]
                    clash = True
                else:
                    seen[b] = i
        if not clash:
            break

    uniq, counts = np.unique(sigs, return_counts=True)
    colliding = int(counts[counts > 1].sum())
    return CollisionReport(
        sectors_tested=n_sectors,
        distinct_signatures=int(uniq.size),
        colliding_sectors=colliding,
        collision_rate=colliding / n_sectors,
        algorithm=algorithm.name,
        seed=seed,
        resampled=len(replaced),
    )


def fill_random(dbset: SignatureTableSet, occupancy: float, rng: np.random.Generator) -> None:
    """Fill every table to round(occupancy * capacity) random signatures."""
    for table in dbset.tables:
        target = round(occupancy * table.capacity)
        while table.occupied_count < target:
            need = target - table.occupied_count
            hs = rng.integers(0, np.iinfo(np.uint64).max, need, dtype=np.uint64, endpoint=True)
            table.insert_many(hs, 0, np.arange(need) % (1 << 32))


def occupancy_sweep(
    occupancies,
    image_size: int = 16 << 20,
    algorithm: HashAlgorithm = HashAlgorithm.DJB2,
    seed: int = 0,
    index_bits: int = 16,
    repeats: int = 10,
    config: ScanConfig | None = None,
) -> list[ThroughputPoint]:
    """Scan one in-memory random image against tables of rising occupancy.

    Throughput is the median over ``repeats`` scans; the probe distance is
    deterministic for a given seed.
    """
    config = config or ScanConfig(verify=False)
    algorithm = HashAlgorithm.parse(algorithm)
    image_size -= image_size % config.sector_size
    rng = np.random.default_rng([seed, 0])
    image = MemoryImage(rng.integers(0, 256, image_size, dtype=np.uint8), name="<bench>")
    points = []
    for occ in occupancies:
        if not 0 < occ < 1:
            raise ValueError(f"occupancy {occ} outside (0, 1)")
        dbset = SignatureTableSet(
            algorithm, index_bits, config.sector_size, config.cluster_size
        )
        fill_random(dbset, occ, np.random.default_rng([seed, 1, round(occ * 1_000_000)]))
        rates, distance = [], None
        for _ in range(max(1, repeats)):
            stats = scan_image(dbset, image, config).stats
            rates.append(stats.bytes_per_second)
            distance = stats.mean_probe_distance
        points.append(ThroughputPoint(occ, statistics.median(rates), distance, len(rates)))
    return points


def write_csv(points: list[ThroughputPoint], fh) -> None:
    out = csv.writer(fh, lineterminator="\n")
    out.writerow(["occupancy", "mb_per_s", "mean_probe_distance"])
    for p in points:
        out.writerow([f"{p.occupancy:g}", f"{p.bytes_per_second / 1e6:.3f}", f"{p.mean_probe_distance:.6f}"])
