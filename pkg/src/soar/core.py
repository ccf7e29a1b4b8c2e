"""Dense vector math, the brute-force MIPS oracle, and the rank statistic.

Everything downstream (partition assignment, index search, quality metrics)
is validated against the operations in this module, so the implementations
favor deterministic arithmetic over speed: accumulation happens in float64
and emitted scores are rounded to float32 so that comparisons behave the
same everywhere. Ties are broken by ascending datapoint id throughout.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "Neighbor",
    "inner_product",
    "batch_inner_products",
    "brute_force_mips",
    "rank",
    "residual",
    "cos_angle",
]


class Dataset:
    """Immutable n-by-d float32 matrix of datapoints (also used for queries).

    Row i is the datapoint with id i. Every value must be finite.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"need at least one row and one column, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("dataset contains NaN or Inf values")
        arr.setflags(write=False)
        self.data = arr

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.n

    def row(self, i: int) -> np.ndarray:
        return self.data[i]

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, d={self.d})"


@dataclass(frozen=True, order=False)
class Neighbor:
    """A search result: datapoint id plus its (float32-rounded) score."""

    id: int
    score: float


def _as_vector(v, d: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if d is not None and arr.shape[0] != d:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {d}")
    return arr


def inner_product(a, b) -> float:
    """<a, b> accumulated in float64, emitted as a float32 value."""
    av = _as_vector(a, name="a")
    bv = _as_vector(b, d=av.shape[0], name="b")
    return float(np.float32(av @ bv))


def batch_inner_products(q, rows: np.ndarray) -> np.ndarray:
    """Scores <q, rows[i]> for every row, float64 accumulation, float32 out."""
    qv = _as_vector(q, name="query")
    mat = np.asarray(rows, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != qv.shape[0]:
        raise ValueError(f"rows of shape {mat.shape} do not match query dimension {qv.shape[0]}")
    return (mat @ qv).astype(np.float32)


def top_ids_by_score(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, score descending, ties by ascending id."""
    ids = np.arange(scores.shape[0])
    order = np.lexsort((ids, -scores.astype(np.float64)))
    return order[:k]


def brute_force_mips(q, X: Dataset, k: int) -> list[Neighbor]:
    """Exact top-k by inner product; the oracle every search path is held to."""
    if not 1 <= k <= X.n:
        raise ValueError(f"k={k} outside [1, {X.n}]")
    scores = batch_inner_products(q, X.data)
    top = top_ids_by_score(scores, k)
    return [Neighbor(int(i), float(scores[i])) for i in top]


def rank(q, v, X: Dataset) -> int:
    """Number of datapoints scoring at least <q, v>; the best possible rank is 1.

    Counting uses >= so v itself contributes when it is a member of X.
    """
    qv = _as_vector(q, d=X.d, name="query")
    vv = _as_vector(v, d=X.d, name="v")
    scores = batch_inner_products(qv, X.data)
    sv = np.float32(qv @ vv)
    return int(np.count_nonzero(scores >= sv))


def residual(x, c) -> np.ndarray:
    """x - c, the quantization error left after snapping x to center c."""
    xv = np.asarray(x)
    cv = np.asarray(c)
    if xv.shape != cv.shape:
        raise ValueError(f"shape mismatch: {xv.shape} vs {cv.shape}")
    return xv - cv


def cos_angle(q, r) -> float:
    """Cosine of the angle between q and r, clamped to [-1, 1].

    Raises on zero-norm input; callers that want the "zero residual scores
    zero" convention must special-case it themselves.
    """
    qv = _as_vector(q, name="q")
    rv = _as_vector(r, d=qv.shape[0], name="r")
    nq = float(np.linalg.norm(qv))
    nr = float(np.linalg.norm(rv))
    if nq == 0.0 or nr == 0.0:
        raise ValueError("cos_angle undefined for zero-norm input")
    return float(min(1.0, max(-1.0, float(qv @ rv) / (nq * nr))))
