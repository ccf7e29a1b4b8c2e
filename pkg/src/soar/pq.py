"""Product quantization of residuals: 16 centers per subspace, 4-bit codes.

Vectors are split into m = ceil(d / s) subspaces of s dimensions (the tail
zero-padded when s does not divide d). Each subspace gets its own 16-center
codebook trained with k-means, and a code stores one nibble per subspace,
packed two per byte. Scoring goes through a per-query lookup table, so the
approximate score of a code is exactly the inner product of the query with
the decoded vector.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import Dataset
from .vq import lloyd_kmeans

__all__ = [
    "SUBSPACE_CENTERS",
    "PQCodebook",
    "train_pq",
    "pq_encode",
    "pq_encode_batch",
    "pq_decode",
    "scoring_table",
    "pq_score",
    "score_codes",
    "unpack_codes",
    "MemoryAccounting",
    "memory_accounting",
]

SUBSPACE_CENTERS = 16  # 4-bit codes, two per byte


@dataclass(frozen=True)
class PQCodebook:
    """Per-subspace centers, shape (m, 16, s) float32. d is pre-padding."""

    centers: np.ndarray
    d: int

    def __post_init__(self):
        arr = np.asarray(self.centers, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[1] != SUBSPACE_CENTERS:
            raise ValueError(f"centers must have shape (m, {SUBSPACE_CENTERS}, s), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("centers contain NaN or Inf")
        if not 1 <= self.d <= arr.shape[0] * arr.shape[2]:
            raise ValueError(f"d={self.d} inconsistent with centers of shape {arr.shape}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "centers", arr)

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def s(self) -> int:
        return self.centers.shape[2]

    @property
    def padded_d(self) -> int:
        return self.m * self.s

    @property
    def code_bytes(self) -> int:
        return (self.m + 1) // 2


def _pad_rows(rows: np.ndarray, padded_d: int) -> np.ndarray:
    if rows.shape[1] == padded_d:
        return rows
    out = np.zeros((rows.shape[0], padded_d), dtype=rows.dtype)
    out[:, : rows.shape[1]] = rows
    return out


def train_pq(residuals, s: int, seed: int = 0, max_iters: int = 25) -> PQCodebook:
    """Train one 16-center codebook per subspace on the given residuals.

    Degenerate subspaces (fewer than 16 distinct subvectors, e.g. all-zero
    residuals) are allowed and simply leave duplicate centers behind.
    """
    rows = residuals.data if isinstance(residuals, Dataset) else np.asarray(residuals)
    rows = rows.astype(np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"residuals must be a non-empty 2-D array, got shape {rows.shape}")
    d = rows.shape[1]
    if s < 1:
        raise ValueError("s must be at least 1")
    m = math.ceil(d / s)
    rows = _pad_rows(rows, m * s)
    seeds = np.random.SeedSequence(seed).spawn(m)
    centers = np.empty((m, SUBSPACE_CENTERS, s), dtype=np.float32)
    for j in range(m):
        sub = rows[:, j * s : (j + 1) * s]
        k = min(SUBSPACE_CENTERS, sub.shape[0])
        trained = lloyd_kmeans(sub, k, max_iters=max_iters, rng=np.random.default_rng(seeds[j]))
        centers[j, :k] = trained
        if k < SUBSPACE_CENTERS:
            centers[j, k:] = trained[0]  # fewer points than centers: repeat
    return PQCodebook(centers=centers, d=d)


def _nearest_codes(rows: np.ndarray, book: PQCodebook) -> np.ndarray:
    """(n, m) uint8 matrix of per-subspace nearest-center indices."""
    rows = _pad_rows(np.asarray(rows, dtype=np.float64), book.padded_d)
    n = rows.shape[0]
    codes = np.empty((n, book.m), dtype=np.uint8)
    centers = book.centers.astype(np.float64)
    for j in range(book.m):
        sub = rows[:, j * book.s : (j + 1) * book.s]
        diff = sub[:, None, :] - centers[j][None, :, :]
        d2 = (diff * diff).sum(axis=2)
        codes[:, j] = d2.argmin(axis=1)  # ties take the lowest center index
    return codes


def _pack(codes: np.ndarray) -> np.ndarray:
    n, m = codes.shape
    if m % 2:
        codes = np.concatenate([codes, np.zeros((n, 1), dtype=np.uint8)], axis=1)
    return (codes[:, 0::2] | (codes[:, 1::2] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, m: int) -> np.ndarray:
    """Inverse of the nibble packing: (n, code_bytes) -> (n, m)."""
    packed = np.asarray(packed, dtype=np.uint8)
    n = packed.shape[0]
    out = np.empty((n, packed.shape[1] * 2), dtype=np.uint8)
    out[:, 0::2] = packed & 0x0F
    out[:, 1::2] = packed >> 4
    return out[:, :m]


def pq_encode_batch(rows, book: PQCodebook) -> np.ndarray:
    """Encode many vectors at once; returns (n, code_bytes) packed uint8."""
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[1] != book.d:
        raise ValueError(f"rows of shape {rows.shape} do not match codebook d={book.d}")
    return _pack(_nearest_codes(rows, book))


def pq_encode(v, book: PQCodebook) -> np.ndarray:
    """Encode a single vector into packed 4-bit codes."""
    vv = np.asarray(v)
    if vv.ndim != 1 or vv.shape[0] != book.d:
        raise ValueError(f"vector of shape {vv.shape} does not match codebook d={book.d}")
    return pq_encode_batch(vv[None, :], book)[0]


def pq_decode(code, book: PQCodebook) -> np.ndarray:
    """Reconstruct the (d,) float32 vector a code stands for."""
    nibbles = unpack_codes(np.asarray(code, dtype=np.uint8)[None, :], book.m)[0]
    parts = book.centers[np.arange(book.m), nibbles]
    return parts.reshape(-1)[: book.d].astype(np.float32)


def scoring_table(q, book: PQCodebook) -> np.ndarray:
    """(m, 16) float64 table of <q_subspace, center> partial scores."""
    qv = np.asarray(q, dtype=np.float64)
    if qv.ndim != 1 or qv.shape[0] != book.d:
        raise ValueError(f"query of shape {qv.shape} does not match codebook d={book.d}")
    qpad = _pad_rows(qv[None, :], book.padded_d)[0]
    qsub = qpad.reshape(book.m, book.s)
    return np.einsum("mks,ms->mk", book.centers.astype(np.float64), qsub)


def pq_score(q, code, book: PQCodebook, table: np.ndarray | None = None) -> float:
    """Approximate score of one code; equals <q, pq_decode(code)> exactly
    up to float accumulation, because both sides sum the same partials."""
    if table is None:
        table = scoring_table(q, book)
    nibbles = unpack_codes(np.asarray(code, dtype=np.uint8)[None, :], book.m)[0]
    return float(np.float32(table[np.arange(book.m), nibbles].sum()))


def score_codes(table: np.ndarray, packed: np.ndarray, m: int) -> np.ndarray:
    """Vectorized lookup-table scoring for a block of packed codes."""
    nibbles = unpack_codes(packed, m)
    return table[np.arange(m)[None, :], nibbles].sum(axis=1)


@dataclass(frozen=True)
class MemoryAccounting:
    """Byte costs of one datapoint and of the whole spill, plus ratios.

    relative_increase is the share of the final (spilled) index the second
    copies occupy: per_point_pq / (per_point_full + 2 * per_point_pq).
    approx_relative_increase is the round-number rule of thumb 1 / (2s + 1)
    for int8 stores and 1 / (8s + 1) for float32 stores.
    """

    n: int
    d: int
    s: int
    precision: str
    spilled: bool
    per_point_pq: int
    per_point_full: int
    soar_overhead_bytes: int
    relative_increase: float
    approx_relative_increase: float
    padded: bool
    padded_d: int


def memory_accounting(
    n: int, d: int, s: int, precision: str = "float32", spilled: bool = True
) -> MemoryAccounting:
    """Predict the exact byte cost of posting entries and the spill overhead.

    per_point_pq counts a 4-byte id plus ceil(m / 2) packed code bytes; with
    s dividing d and m even this is the textbook 4 + d / (2 s).
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be at least 1")
    if s < 1:
        raise ValueError("s must be at least 1")
    if precision not in ("float32", "int8"):
        raise ValueError(f"unknown precision {precision!r}")
    m = math.ceil(d / s)
    per_point_pq = 4 + (m + 1) // 2
    per_point_full = d if precision == "int8" else 4 * d
    overhead = n * per_point_pq if spilled else 0
    relative = per_point_pq / (per_point_full + 2 * per_point_pq)
    approx = 1.0 / (2 * s + 1) if precision == "int8" else 1.0 / (8 * s + 1)
    return MemoryAccounting(
        n=n,
        d=d,
        s=s,
        precision=precision,
        spilled=spilled,
        per_point_pq=per_point_pq,
        per_point_full=per_point_full,
        soar_overhead_bytes=overhead,
        relative_increase=relative,
        approx_relative_increase=approx,
        padded=(m * s != d),
        padded_d=m * s,
    )
