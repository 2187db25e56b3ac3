"""Command line: build, scan, collide, bench.

Exit codes: 0 success, 1 fatal error, 2 usage error or geometry mismatch,
3 matches found under --fail-on-match.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import re
import sys
import time
from pathlib import Path

from . import __version__
from .experiments import collision_experiment, occupancy_sweep, write_csv
from .hashing import HashAlgorithm
from .ingest import SkipRules, build_report_lines, ingest_corpus, iter_corpus
from .scanner import Corpus, MatchStatus, ScanConfig, ScanError, scan_image, write_report
from .sigdb import (
    DEFAULT_CLUSTER_SIZE,
    DEFAULT_INDEX_BITS,
    DatabaseFormatError,
    GeometryMismatchError,
    SignatureTableSet,
    TableFullError,
    load,
    save,
)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_USAGE = 2
EXIT_MATCHES = 3

_SIZE_RE = re.compile(r"^\s*(\d+)\s*([kmgt]?)i?b?\s*$", re.IGNORECASE)


def parse_size(text: str) -> int:
    """'4096', '4K', '4MiB' -> bytes (binary multiples)."""
    m = _SIZE_RE.match(text)
    if not m:
        raise argparse.ArgumentTypeError(f"not a size: {text!r}")
    return int(m.group(1)) << (10 * " kmgt".index(m.group(2).lower() or " "))


def parse_fractions(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of fractions: {text!r}") from None
    if not values or not all(0 < v < 1 for v in values):
        raise argparse.ArgumentTypeError("occupancies must lie strictly between 0 and 1")
    return values


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def algorithm_arg(text: str) -> HashAlgorithm:
    try:
        return HashAlgorithm.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _err(msg: str) -> None:
    print(f"sectorcarve: {msg}", file=sys.stderr)


class _Progress:
    """Throttled progress line on stderr."""

    def __init__(self, interval: float):
        self.interval = interval
        self.last = time.monotonic()

    def __call__(self, done: int, total: int) -> None:
        now = time.monotonic()
        if self.interval > 0 and now - self.last >= self.interval:
            self.last = now
            pct = 100.0 * done / total if total else 100.0
            print(f"progress: {done}/{total} bytes ({pct:.1f}%)", file=sys.stderr, flush=True)


def cmd_build(args) -> int:
    out = Path(args.output)
    files = list(iter_corpus(args.corpus))
    if not files:
        _err("corpus is empty; nothing to build")
        return EXIT_FATAL
    try:
        dbset = SignatureTableSet(args.algorithm, args.index_bits, args.sector_size, args.cluster_size)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    rules = SkipRules(skip_zero=not args.keep_zero, skip_ones=not args.keep_ones)
    base = out.resolve().parent
    try:
        entries = ingest_corpus(
            dbset, [f.resolve() for f in files], rules, workers=args.workers, path_base=base
        )
    except TableFullError as exc:
        _err(f"{exc} (current width {args.index_bits}; try --index-bits {args.index_bits + 1})")
        return EXIT_FATAL
    save(dbset, out)

    if args.stats:
        with open(args.stats, "w") as fh:
            for line in build_report_lines(entries):
                fh.write(line + "\n")
    per, total = dbset.occupancy()
    print(f"database: {out} algorithm={dbset.algorithm.name} index_bits={dbset.index_bits}")
    for tau, (frac, table) in enumerate(zip(per, dbset.tables)):
        print(f"  tau {tau}: {table.occupied_count}/{table.capacity} slots ({frac:.6f})")
    print(f"  aggregate occupancy {total:.6f}")
    failed = [e for e in entries if e.error]
    print(
        f"files={len(entries)} failed={len(failed)} "
        f"sectors_ingested={sum(e.sectors_ingested for e in entries)} "
        f"sectors_skipped={sum(e.sectors_skipped for e in entries)} "
        f"duplicates={sum(e.duplicates for e in entries)} "
        f"tail_bytes={sum(e.tail_bytes for e in entries)}"
    )
    for e in failed:
        _err(f"could not read {e.path}: {e.error}")
    return EXIT_OK


def cmd_scan(args) -> int:
    try:
        dbset = load(args.db)
    except (OSError, DatabaseFormatError) as exc:
        _err(f"cannot load database {args.db}: {exc}")
        return EXIT_FATAL
    try:
        config = ScanConfig(
            sector_size=args.sector_size or dbset.sector_size,
            cluster_size=args.cluster_size or dbset.cluster_size,
            batch_size=args.batch_size,
            buffer_size=args.buffer_size,
            buffers_per_source=args.buffers,
            partition_offset=args.partition_offset,
            verify=args.verify,
            lookup_all_tables=args.lookup_all_tables,
            workers=args.workers,
        )
        dbset.check_geometry(config.sector_size, config.cluster_size)
    except (ValueError, GeometryMismatchError) as exc:
        _err(f"refusing to scan: {exc}")
        return EXIT_USAGE
    root = args.corpus_root if args.corpus_root is not None else Path(args.db).resolve().parent
    corpus = Corpus(dbset, root)
    progress = _Progress(args.progress_interval) if args.progress_interval > 0 else None
    try:
        result = scan_image(dbset, args.images, config, corpus, progress=progress)
    except ScanError as exc:
        _err(str(exc))
        return EXIT_FATAL

    with contextlib.ExitStack() as stack:
        fh = stack.enter_context(open(args.report, "w")) if args.report else sys.stdout
        write_report(result.records, fh, dbset)
        fh.flush()
    print(result.stats.summary(), file=sys.stderr)
    if args.fail_on_match:
        hit = MatchStatus.VERIFIED if config.verify else MatchStatus.CANDIDATE
        if any(r.status is hit for r in result.records):
            return EXIT_MATCHES
    return EXIT_OK


def cmd_collide(args) -> int:
    report = collision_experiment(args.n, args.algorithm, args.seed)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(report.to_json() + "\n")
    else:
        print(report.to_json())
    print(
        f"{report.sectors_tested} sectors, {report.distinct_signatures} distinct signatures, "
        f"{report.colliding_sectors} colliding sectors (rate {report.collision_rate:.3e})",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    points = occupancy_sweep(
        args.occupancies,
        image_size=args.size,
        algorithm=args.algorithm,
        seed=args.seed,
        index_bits=args.index_bits,
        repeats=args.repeats,
        config=ScanConfig(verify=False, workers=args.workers),
    )
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            write_csv(points, fh)
    else:
        write_csv(points, sys.stdout)
    if args.records:
        with open(args.records, "w") as fh:
            for p in points:
                fh.write(p.to_json() + "\n")
    for p in points:
        print(
            f"occupancy {p.occupancy:.2f}: {p.bytes_per_second / 1e6:8.1f} MB/s, "
            f"mean probe distance {p.mean_probe_distance:.3f}",
            file=sys.stderr,
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sectorcarve", description="Sector-signature data carving: build databases and scan images."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a signature database from master files")
    b.add_argument("corpus", nargs="+", help="master files or directories (walked recursively)")
    b.add_argument("-o", "--output", required=True, help="database file to write")
    b.add_argument("--algorithm", type=algorithm_arg, default=HashAlgorithm.CRC64,
                   help="djb2, sdbm, crc32 or crc64 (default crc64)")
    b.add_argument("--index-bits", type=int, default=DEFAULT_INDEX_BITS,
                   help=f"table index width w; each table has 2^w slots (default {DEFAULT_INDEX_BITS})")
    b.add_argument("--sector-size", type=positive_int, default=512, help="bytes per sector (default 512)")
    b.add_argument("--cluster-size", type=positive_int, default=DEFAULT_CLUSTER_SIZE,
                   help="sectors per cluster, one table each (default 8)")
    b.add_argument("--keep-zero", action="store_true", help="do not skip all-zero sectors")
    b.add_argument("--keep-ones", action="store_true", help="do not skip all-0xFF sectors")
    b.add_argument("--workers", type=positive_int, default=1, help="threads hashing master files")
    b.add_argument("--stats", help="write per-file build stats as JSON lines")
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("scan", help="scan disk images against a database")
    s.add_argument("db", help="database file")
    s.add_argument("images", nargs="+", help="raw image files or block devices")
    s.add_argument("--report", help="write the JSON-lines match report here (default stdout)")
    s.add_argument("--no-verify", dest="verify", action="store_false",
                   help="report candidates without byte-for-byte confirmation")
    s.add_argument("--partition-offset", type=parse_size, default=0,
                   help="byte offset where the cluster grid starts (sector multiple)")
    s.add_argument("--lookup-all-tables", action="store_true",
                   help="probe every table for every sector (misaligned images)")
    s.add_argument("--fail-on-match", action="store_true", help="exit 3 when any match is reported")
    s.add_argument("--sector-size", type=positive_int, help="must equal the database sector size")
    s.add_argument("--cluster-size", type=positive_int, help="must equal the database cluster size")
    s.add_argument("--batch-size", type=positive_int, default=16, help="sectors per batch (default 16)")
    s.add_argument("--buffer-size", type=parse_size, default=4 << 20, help="bytes per read buffer (default 4M)")
    s.add_argument("--buffers", type=positive_int, default=2, help="read buffers per image (default 2)")
    s.add_argument("--workers", type=int, default=0, help="matcher threads (0: one per CPU)")
    s.add_argument("--corpus-root", type=Path,
                   help="directory master paths are relative to (default: the database's directory)")
    s.add_argument("--progress-interval", type=float, default=5.0,
                   help="seconds between progress lines on stderr; 0 disables")
    s.set_defaults(func=cmd_scan)

    c = sub.add_parser("collide", help="count signature collisions over random sectors")
    c.add_argument("-n", type=positive_int, default=1_000_000, help="number of distinct sectors")
    c.add_argument("--algorithm", type=algorithm_arg, default=HashAlgorithm.DJB2, help="default djb2")
    c.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    c.add_argument("--output", help="write the JSON report here (default stdout)")
    c.set_defaults(func=cmd_collide)

    e = sub.add_parser("bench", help="throughput and probe distance against table occupancy")
    e.add_argument("--occupancies", type=parse_fractions, default=[0.1, 0.3, 0.5, 0.7, 0.9],
                   help="comma-separated fractions in (0,1) (default 0.1,0.3,0.5,0.7,0.9)")
    e.add_argument("--size", type=parse_size, default=16 << 20, help="in-memory image size (default 16M)")
    e.add_argument("--algorithm", type=algorithm_arg, default=HashAlgorithm.DJB2, help="default djb2")
    e.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    e.add_argument("--index-bits", type=int, default=16, help="table index width (default 16)")
    e.add_argument("--repeats", type=positive_int, default=10, help="scans per point; median reported")
    e.add_argument("--workers", type=int, default=0, help="matcher threads (0: one per CPU)")
    e.add_argument("--csv", help="write occupancy,mb_per_s,mean_probe_distance CSV here (default stdout)")
    e.add_argument("--records", help="write one JSON record per point here")
    e.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.ERROR,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
