"""Hash-based data carving: sector signature databases and image scanning."""

from .hashing import HashAlgorithm, hash_sectors, sector_signature
from .ingest import SkipRules, ingest_corpus, ingest_file
from .scanner import Corpus, MatchRecord, MatchStatus, ScanConfig, scan_image, sequential_scan
from .sigdb import SignatureTable, SignatureTableSet, load, save

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "HashAlgorithm",
    "MatchRecord",
    "MatchStatus",
    "ScanConfig",
    "SignatureTable",
    "SignatureTableSet",
    "SkipRules",
    "hash_sectors",
    "ingest_corpus",
    "ingest_file",
    "load",
    "save",
    "scan_image",
    "sector_signature",
    "sequential_scan",
]
