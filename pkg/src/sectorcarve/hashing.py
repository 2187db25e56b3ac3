"""Sector hash primitives: djb2, sdbm, CRC32 and CRC64.

Every algorithm produces an unsigned 64-bit signature. djb2 and sdbm run a
64-bit wrapping accumulator; CRC32 is the common reflected variant
(init and final XOR all ones) and CRC64 uses the ISO polynomial
x^64 + x^4 + x^3 + x + 1, reflected, with zero init and zero final XOR.

Two code paths exist. The scalar path (hash_init / hash_update /
hash_finalize) walks the input one byte at a time and is the definition.
The vectorised path (hash_sectors) signs many equal-length sectors at once
with numpy and must agree with the scalar path bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1

DJB2_SEED = 5381
DJB2_MULTIPLIER = 33
SDBM_SEED = 0
SDBM_MULTIPLIER = 65599

# Generator polynomials in reflected (LSB-first) form.
CRC32_POLY_REFLECTED = 0xEDB88320
CRC64_POLY_REFLECTED = 0xD800000000000000

CRC32_INIT = MASK32
CRC32_XOROUT = MASK32
CRC64_INIT = 0
CRC64_XOROUT = 0

DEFAULT_SECTOR_SIZE = 512


class HashAlgorithm(enum.IntEnum):
    """Signature algorithm; the integer value is the on-disk algorithm id."""

    DJB2 = 1
    SDBM = 2
    CRC32 = 3
    CRC64 = 4

    @classmethod
    def parse(cls, name: str | int | HashAlgorithm) -> HashAlgorithm:
        if isinstance(name, cls):
            return name
        if isinstance(name, int):
            return cls(name)
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown hash algorithm {name!r}") from None


def _crc_table(poly: int) -> tuple[int, ...]:
    table = []
    for byte in range(256):
        reg = byte
        for _ in range(8):
            reg = (reg >> 1) ^ poly if reg & 1 else reg >> 1
        table.append(reg)
    return tuple(table)


CRC32_TABLE = _crc_table(CRC32_POLY_REFLECTED)
CRC64_TABLE = _crc_table(CRC64_POLY_REFLECTED)

_CRC_TABLES = {HashAlgorithm.CRC32: CRC32_TABLE, HashAlgorithm.CRC64: CRC64_TABLE}
_MULTIPLIERS = {HashAlgorithm.DJB2: DJB2_MULTIPLIER, HashAlgorithm.SDBM: SDBM_MULTIPLIER}
_INITS = {
    HashAlgorithm.DJB2: DJB2_SEED,
    HashAlgorithm.SDBM: SDBM_SEED,
    HashAlgorithm.CRC32: CRC32_INIT,
    HashAlgorithm.CRC64: CRC64_INIT,
}
_XOROUTS = {HashAlgorithm.CRC32: CRC32_XOROUT, HashAlgorithm.CRC64: CRC64_XOROUT}


@dataclass(frozen=True)
class HashState:
    """Running hash. For CRCs ``accumulator`` is the raw shift register."""

    algorithm: HashAlgorithm
    accumulator: int
    bytes_consumed: int = 0


def hash_init(algorithm: HashAlgorithm) -> HashState:
    algorithm = HashAlgorithm.parse(algorithm)
    return HashState(algorithm, _INITS[algorithm], 0)


def hash_update(state: HashState, data: bytes | bytearray | memoryview) -> HashState:
    """Advance ``state`` over ``data``, one recurrence step per byte."""
    data = bytes(data)
    if not data:
        return state
    alg = state.algorithm
    acc = state.accumulator
    if alg in _MULTIPLIERS:
        m = _MULTIPLIERS[alg]
        for b in data:
            acc = (acc * m + b) & MASK64
    else:
        table = _CRC_TABLES[alg]
        for b in data:
            acc = table[(acc ^ b) & 0xFF] ^ (acc >> 8)
    return replace(state, accumulator=acc, bytes_consumed=state.bytes_consumed + len(data))


def hash_finalize(state: HashState) -> int:
    if state.algorithm in _XOROUTS:
        return state.accumulator ^ _XOROUTS[state.algorithm]
    return state.accumulator


def hash_bytes(data: bytes, algorithm: HashAlgorithm) -> int:
    """One-shot signature of an arbitrary byte string."""
    return hash_finalize(hash_update(hash_init(algorithm), data))


def sector_signature(
    sector: bytes, algorithm: HashAlgorithm, sector_size: int = DEFAULT_SECTOR_SIZE
) -> int:
    if len(sector) != sector_size:
        raise ValueError(f"sector is {len(sector)} bytes, expected {sector_size}")
    return hash_bytes(sector, algorithm)


# -- vectorised path ---------------------------------------------------------

_CRC_TABLES_NP = {alg: np.array(t, dtype=np.uint64) for alg, t in _CRC_TABLES.items()}
_POWER_CACHE: dict[tuple[HashAlgorithm, int], tuple[np.ndarray, np.uint64]] = {}

# Rows per matmul block; keeps the uint64 widening of the input cache-sized.
_BLOCK_ROWS = 1024
_CRC_BLOCK_ROWS = 4096
_TABLE16_CACHE: dict[HashAlgorithm, np.ndarray] = {}


def _powers(algorithm: HashAlgorithm, length: int) -> tuple[np.ndarray, np.uint64]:
    key = (algorithm, length)
    hit = _POWER_CACHE.get(key)
    if hit is None:
        m = _MULTIPLIERS[algorithm]
        # byte i of an n-byte input is weighted by m^(n-1-i)
        pw = [0] * length
        p = 1
        for i in range(length - 1, -1, -1):
            pw[i] = p
            p = (p * m) & MASK64
        seed_term = (_INITS[algorithm] * p) & MASK64
        hit = (np.array(pw, dtype=np.uint64), np.uint64(seed_term))
        _POWER_CACHE[key] = hit
    return hit


def hash_sectors(sectors: np.ndarray, algorithm: HashAlgorithm) -> np.ndarray:
    """Sign every row of a 2-D uint8 array; returns a uint64 vector.

    djb2/sdbm unroll their recurrence into a dot product with the powers of
    the multiplier (wrapping mod 2^64). CRCs run a table-driven register two
    bytes per step, on a transposed block so that each step touches one
    contiguous run across all sectors.
    """
    algorithm = HashAlgorithm.parse(algorithm)
    sectors = np.ascontiguousarray(sectors, dtype=np.uint8)
    if sectors.ndim != 2:
        raise ValueError("expected a 2-D array of sectors")
    n, length = sectors.shape
    out = np.empty(n, dtype=np.uint64)
    if n == 0:
        return out
    if algorithm in _MULTIPLIERS:
        powers, seed_term = _powers(algorithm, length)
        for lo in range(0, n, _BLOCK_ROWS):
            block = sectors[lo : lo + _BLOCK_ROWS].astype(np.uint64)
            out[lo : lo + _BLOCK_ROWS] = block @ powers + seed_term
        return out
    init = np.uint64(_INITS[algorithm])
    xorout = np.uint64(_XOROUTS[algorithm])
    if length % 2:
        return _crc_bytewise(sectors, algorithm, init) ^ xorout
    table16 = _crc_table16(algorithm)
    sixteen = np.uint64(16)
    low16 = np.uint64(0xFFFF)
    for lo in range(0, n, _CRC_BLOCK_ROWS):
        # (words, sectors) layout: each step reads one contiguous row
        words = np.ascontiguousarray(sectors[lo : lo + _CRC_BLOCK_ROWS].view("<u2").T)
        reg = np.full(words.shape[1], init, dtype=np.uint64)
        idx = np.empty_like(reg)
        for col in words:
            np.bitwise_xor(reg, col, out=idx)
            np.bitwise_and(idx, low16, out=idx)
            np.right_shift(reg, sixteen, out=reg)
            reg ^= table16[idx]
        out[lo : lo + _CRC_BLOCK_ROWS] = reg ^ xorout
    return out


def _crc_bytewise(sectors: np.ndarray, algorithm: HashAlgorithm, init: np.uint64) -> np.ndarray:
    table = _CRC_TABLES_NP[algorithm]
    eight = np.uint64(8)
    cols = np.ascontiguousarray(sectors.T)
    reg = np.full(sectors.shape[0], init, dtype=np.uint64)
    for col in cols:
        reg = table[(reg ^ col) & 0xFF] ^ (reg >> eight)
    return reg


def _crc_table16(algorithm: HashAlgorithm) -> np.ndarray:
    """Two-bytes-per-step table: entry x is the register after feeding the
    little-endian pair x into a register holding zero."""
    t16 = _TABLE16_CACHE.get(algorithm)
    if t16 is None:
        table = _CRC_TABLES_NP[algorithm]
        x = np.arange(1 << 16, dtype=np.uint64)
        eight = np.uint64(8)
        once = table[x & np.uint64(0xFF)] ^ (x >> eight)
        t16 = table[once & np.uint64(0xFF)] ^ (once >> eight)
        _TABLE16_CACHE[algorithm] = t16
    return t16

def sectors_view(data, sector_size: int = DEFAULT_SECTOR_SIZE) -> np.ndarray:
    """View a byte buffer holding whole sectors as an (n, sector_size) array."""
    arr = np.frombuffer(data, dtype=np.uint8)
    if arr.size % sector_size:
        raise ValueError(f"buffer of {arr.size} bytes is not a whole number of {sector_size}-byte sectors")
    return arr.reshape(-1, sector_size)
