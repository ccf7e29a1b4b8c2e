"""Quality metrics and statistical verification.

Two families live here. The measurement side: recall, the
kept-mips-recall curve (how much of the true top-k survives after scanning
the t best-ranked partitions, x-axis weighted by partition size), and
per-neighbor diagnostics of residual angles and score errors. The
verification side: Monte Carlo checks that the spill objective and the
score-correlation identity behave as the closed forms say they should,
with queries drawn uniformly from the unit sphere.

Monte Carlo runs are blocked: each fixed-size block gets its own seed
spawned from the master seed, and only float64 sums cross block
boundaries, so results depend on (seed, samples) alone and blocks can be
evaluated in any order or in parallel without changing the answer.
"""

from dataclasses import dataclass

import numpy as np

from .core import Dataset, Neighbor, batch_inner_products
from .vq import assign_spilled_soar, soar_loss

__all__ = [
    "KmrCurve",
    "kmr_curve",
    "datapoints_to_recall",
    "recall_at_k",
    "ground_truth_ids",
    "pearson",
    "DiagnosticsRecord",
    "DiagnosticsSummary",
    "DiagnosticsResult",
    "diagnostics",
    "SweepPoint",
    "lambda_sweep",
    "TheoremReport",
    "mc_verify_theorem1",
    "LemmaReport",
    "mc_verify_lemma",
    "MIN_THEOREM_SAMPLES",
]

MIN_THEOREM_SAMPLES = 100_000
_BLOCK = 131_072  # Monte Carlo block size; fixed so results ignore parallelism


# ---------------------------------------------------------------------------
# recall and ground truth


def recall_at_k(results: list, truth, k: int) -> float:
    """|results ∩ truth| / k. Short result lists just score what they have."""
    if k < 1:
        raise ValueError("k must be at least 1")
    truth_ids = {int(t.id) if isinstance(t, Neighbor) else int(t) for t in truth}
    if len(truth_ids) != k:
        raise ValueError(f"ground truth must contain exactly {k} distinct ids")
    result_ids = {int(r.id) if isinstance(r, Neighbor) else int(r) for r in results}
    if len(result_ids) != len(results):
        raise ValueError("results contain duplicate ids")
    return len(result_ids & truth_ids) / k


def _top_k_ids(scores: np.ndarray, k: int) -> np.ndarray:
    """Exact top-k ids by (score desc, id asc) without a full sort."""
    n = scores.shape[0]
    if k >= n:
        subset = np.arange(n)
    else:
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        above = np.flatnonzero(scores > kth)
        ties = np.flatnonzero(scores == kth)
        subset = np.concatenate([above, ties[: k - above.size]])
    order = np.lexsort((subset, -scores[subset].astype(np.float64)))
    return subset[order][:k]


def ground_truth_ids(Q: Dataset, X: Dataset, k: int, chunk: int = 64) -> np.ndarray:
    """(|Q|, k) int64 matrix of exact MIPS neighbors, row-equal to
    brute_force_mips on each query."""
    if not 1 <= k <= X.n:
        raise ValueError(f"k={k} outside [1, {X.n}]")
    if Q.d != X.d:
        raise ValueError(f"query dimension {Q.d} does not match dataset dimension {X.d}")
    out = np.empty((Q.n, k), dtype=np.int64)
    xt = X.data.astype(np.float64).T
    for lo in range(0, Q.n, chunk):
        hi = min(lo + chunk, Q.n)
        scores = (Q.data[lo:hi].astype(np.float64) @ xt).astype(np.float32)
        for i in range(hi - lo):
            out[lo + i] = _top_k_ids(scores[i], k)
    return out


# ---------------------------------------------------------------------------
# the kept-mips-recall curve


@dataclass(frozen=True)
class KmrCurve:
    """Recall of true top-k neighbors vs datapoints covered by the t
    best-ranked partitions, averaged over queries. One point per t."""

    datapoints: np.ndarray  # mean cumulative posting size at each t, len c
    recall: np.ndarray  # fraction of (query, neighbor) pairs kept, len c
    k: int
    policy: str
    lam: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return [(float(x), float(r)) for x, r in zip(self.datapoints, self.recall)]


def _partition_ranks(center_scores: np.ndarray) -> np.ndarray:
    """rank[j] = number of partitions scoring >= partition j (best is 1)."""
    sorted_scores = np.sort(center_scores)
    return center_scores.shape[0] - np.searchsorted(sorted_scores, center_scores, side="left")


def kmr_curve(Q: Dataset, X: Dataset, index, k: int) -> KmrCurve:
    """Sweep t = 1..c. A true neighbor is kept at t when the best-ranked of
    its partitions ranks within the top t."""
    truth = ground_truth_ids(Q, X, k)
    c = index.c
    centers = index.codebook.centers.astype(np.float64)
    sizes = index.posting_sizes()
    prim = index.assignment.primary
    spill = index.assignment.spilled
    part_ids = np.arange(c)
    hit_counts = np.zeros(c + 1, dtype=np.int64)  # hit_counts[r]: pairs with best rank r
    x_sums = np.zeros(c, dtype=np.int64)
    for qi in range(Q.n):
        cs = (centers @ Q.data[qi].astype(np.float64)).astype(np.float32)
        ranks = _partition_ranks(cs)
        ids = truth[qi]
        best = ranks[prim[ids]]
        if spill is not None:
            best = np.minimum(best, ranks[spill[ids]])
        hit_counts += np.bincount(best, minlength=c + 1)
        scan_order = np.lexsort((part_ids, -cs))
        x_sums += np.cumsum(sizes[scan_order])
    kept = np.cumsum(hit_counts)[1:]  # pairs with best rank <= t, t = 1..c
    recall = kept / (k * Q.n)
    datapoints = x_sums / Q.n
    return KmrCurve(
        datapoints=datapoints, recall=recall, k=k, policy=index.policy, lam=index.lam
    )


def datapoints_to_recall(curve: KmrCurve, target: float) -> float:
    """Smallest datapoint count on the curve whose recall meets the target."""
    if not 0.0 < target <= 1.0:
        raise ValueError("target must be in (0, 1]")
    idx = np.flatnonzero(curve.recall >= target)
    if idx.size == 0:
        raise ValueError(f"curve never reaches recall {target}")  # cannot happen for target <= 1
    return float(curve.datapoints[idx[0]])


# ---------------------------------------------------------------------------
# residual diagnostics


@dataclass(frozen=True)
class DiagnosticsRecord:
    """One (query, true neighbor) observation. Angles use the unit-norm
    query; a zero residual contributes cosine 0 by convention."""

    query_id: int
    neighbor_id: int
    residual_norm: float
    cos_primary: float
    score_err_primary: float
    rank_primary: int
    cos_spilled: float | None = None
    score_err_spilled: float | None = None
    rank_spilled: int | None = None


@dataclass(frozen=True)
class DiagnosticsSummary:
    policy: str
    lam: float
    k: int
    num_records: int
    pearson_cos: float | None  # corr(cos_primary, cos_spilled); None without spill
    rank_bins: np.ndarray
    mean_score_err_primary: np.ndarray
    mean_rank_spilled: np.ndarray | None
    counts: np.ndarray


@dataclass(frozen=True)
class DiagnosticsResult:
    records: list[DiagnosticsRecord]
    summary: DiagnosticsSummary


def pearson(a, b) -> float:
    """Sample correlation with degenerate-variance guards."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1 or av.size < 2:
        raise ValueError("pearson needs two equal-length 1-D arrays of size >= 2")
    da = av - av.mean()
    db = bv - bv.mean()
    na = float(np.sqrt(da @ da))
    nb = float(np.sqrt(db @ db))
    if na == 0.0 and nb == 0.0:
        return 1.0 if np.array_equal(av, bv) else 0.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def _unit_rows(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"{what} contains a zero-norm row")
    return rows / norms[:, None]


def diagnostics(Q: Dataset, X: Dataset, index, k: int) -> DiagnosticsResult:
    """Angle/error records for every (query, true top-k neighbor) pair."""
    truth = ground_truth_ids(Q, X, k)
    centers = index.codebook.centers.astype(np.float64)
    prim = index.assignment.primary
    spill = index.assignment.spilled
    data = X.data.astype(np.float64)
    qn = _unit_rows(Q.data.astype(np.float64), "queries")
    records: list[DiagnosticsRecord] = []

    def residual_stats(q, ids, parts):
        res = data[ids] - centers[parts]
        norms = np.linalg.norm(res, axis=1)
        errs = res @ q
        cosv = np.divide(errs, norms, out=np.zeros_like(errs), where=norms > 0)
        return res, norms, errs, cosv

    for qi in range(Q.n):
        q = qn[qi]
        cs = (centers @ q).astype(np.float32)
        ranks = _partition_ranks(cs)
        ids = truth[qi]
        _, norms, errs, cosv = residual_stats(q, ids, prim[ids])
        if spill is None:
            for j, v in enumerate(ids):
                records.append(
                    DiagnosticsRecord(
                        query_id=qi,
                        neighbor_id=int(v),
                        residual_norm=float(norms[j]),
                        cos_primary=float(cosv[j]),
                        score_err_primary=float(errs[j]),
                        rank_primary=int(ranks[prim[v]]),
                    )
                )
        else:
            _, _, errs2, cosv2 = residual_stats(q, ids, spill[ids])
            for j, v in enumerate(ids):
                records.append(
                    DiagnosticsRecord(
                        query_id=qi,
                        neighbor_id=int(v),
                        residual_norm=float(norms[j]),
                        cos_primary=float(cosv[j]),
                        score_err_primary=float(errs[j]),
                        rank_primary=int(ranks[prim[v]]),
                        cos_spilled=float(cosv2[j]),
                        score_err_spilled=float(errs2[j]),
                        rank_spilled=int(ranks[spill[v]]),
                    )
                )

    rank_primary = np.array([r.rank_primary for r in records], dtype=np.int64)
    score_err = np.array([r.score_err_primary for r in records], dtype=np.float64)
    bins = np.unique(rank_primary)
    counts = np.array([(rank_primary == b).sum() for b in bins], dtype=np.int64)
    mean_err = np.array([score_err[rank_primary == b].mean() for b in bins])
    if spill is None:
        pear = None
        mean_rank_spilled = None
    else:
        cos_p = np.array([r.cos_primary for r in records])
        cos_s = np.array([r.cos_spilled for r in records])
        pear = pearson(cos_p, cos_s)
        rank_s = np.array([r.rank_spilled for r in records], dtype=np.float64)
        mean_rank_spilled = np.array([rank_s[rank_primary == b].mean() for b in bins])
    summary = DiagnosticsSummary(
        policy=index.policy,
        lam=index.lam,
        k=k,
        num_records=len(records),
        pearson_cos=pear,
        rank_bins=bins,
        mean_score_err_primary=mean_err,
        mean_rank_spilled=mean_rank_spilled,
        counts=counts,
    )
    return DiagnosticsResult(records=records, summary=summary)


# ---------------------------------------------------------------------------
# lambda sweep


@dataclass(frozen=True)
class SweepPoint:
    lam: float
    mean_spill_sq_norm: float  # mean ||r'||^2 over datapoints
    mean_rho: float  # mean cos(r, r'), the closed-form score correlation


def lambda_sweep(X: Dataset, codebook, primary, Q=None, lambdas=(0.0, 0.5, 1.0, 2.0, 4.0)):
    """Re-run the spilled assignment per lambda over a fixed codebook and
    primary table, reporting spill residual mass and the closed-form
    correlation between primary and spilled score errors.

    The correlation needs no query sample (Q is accepted for signature
    symmetry and ignored): for unit-sphere queries it equals cos(r, r')
    exactly, so it is computed per datapoint from the residuals.
    """
    lams = [float(v) for v in lambdas]
    if len(lams) < 1 or any(b <= a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambdas must be strictly ascending")
    data = X.data.astype(np.float64)
    centers = codebook.centers.astype(np.float64)
    res = data - centers[primary.primary]
    res_norms = np.linalg.norm(res, axis=1)
    points = []
    for lam in lams:
        table = assign_spilled_soar(X, codebook, primary, lam)
        res2 = data - centers[table.spilled]
        res2_norms = np.linalg.norm(res2, axis=1)
        denom = res_norms * res2_norms
        rho = np.divide((res * res2).sum(axis=1), denom, out=np.zeros(X.n), where=denom > 0)
        points.append(
            SweepPoint(
                lam=lam,
                mean_spill_sq_norm=float((res2_norms**2).mean()),
                mean_rho=float(rho.mean()),
            )
        )
    return points


# ---------------------------------------------------------------------------
# Monte Carlo verification


def _sphere_blocks(d: int, samples: int, seed):
    """Yield blocks of unit-norm float32 rows with per-block seeds spawned
    from the master seed, so the stream is reproducible and
    order-independent. Per-sample float32 noise is orders of magnitude
    below the Monte Carlo noise floor; cross-block sums stay float64."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    n_blocks = (samples + _BLOCK - 1) // _BLOCK
    children = ss.spawn(n_blocks)
    left = samples
    for child in children:
        b = min(_BLOCK, left)
        left -= b
        g = np.random.default_rng(child).standard_normal((b, d), dtype=np.float32)
        norms = np.linalg.norm(g, axis=1)
        norms[norms == 0] = 1.0  # vanishing probability, but stay finite
        yield g / norms[:, None]


@dataclass(frozen=True)
class TheoremReport:
    lam: float
    samples: int
    empirical: np.ndarray  # mean weighted squared spill error per candidate
    closed_form: np.ndarray  # ||r'||^2 + lam * ||proj_r r'||^2 per candidate
    max_ratio_error: float  # worst relative mismatch of candidate ratios


def mc_verify_theorem1(r, r_primes, lam: float, samples: int, seed=0) -> TheoremReport:
    """Estimate E[|cos(q, r)|^lam * <q, r'>^2] over unit-sphere queries for
    each spill candidate r' and compare candidate ratios against the closed
    form. Ratios cancel the dimension-dependent constant."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if samples < MIN_THEOREM_SAMPLES:
        raise ValueError(f"need at least {MIN_THEOREM_SAMPLES} samples, got {samples}")
    rv = np.asarray(r, dtype=np.float64)
    if rv.ndim != 1 or rv.shape[0] < 2:
        raise ValueError("r must be a 1-D vector with d >= 2")
    rnorm = np.linalg.norm(rv)
    if rnorm == 0:
        raise ValueError("r must be nonzero")
    cands = np.asarray(r_primes, dtype=np.float64)
    if cands.ndim == 1:
        cands = cands[None, :]
    if cands.shape[0] < 2:
        raise ValueError("need at least two candidates to compare ratios")
    if cands.shape[1] != rv.shape[0]:
        raise ValueError("candidate dimension does not match r")
    if np.any(np.linalg.norm(cands, axis=1) == 0):
        raise ValueError("candidates must be nonzero")
    rhat = (rv / rnorm).astype(np.float32)
    cands32 = cands.astype(np.float32)
    sums = np.zeros(cands.shape[0], dtype=np.float64)
    for block in _sphere_blocks(rv.shape[0], samples, seed):
        proj = block @ cands32.T
        proj *= proj
        if lam == 0.0:
            sums += proj.sum(axis=0, dtype=np.float64)
            continue
        align = block @ rhat
        if lam == 1.0:
            weights = np.abs(align)
        elif lam == 2.0:
            weights = align * align
        else:
            weights = np.abs(align) ** np.float32(lam)
        sums += (weights @ proj).astype(np.float64)
    empirical = sums / samples
    closed = np.array([soar_loss(rp, rv, lam) for rp in cands])
    worst = 0.0
    for i in range(len(cands)):
        for j in range(i + 1, len(cands)):
            ratio = (empirical[i] / empirical[j]) / (closed[i] / closed[j])
            worst = max(worst, abs(ratio - 1.0))
    return TheoremReport(
        lam=float(lam),
        samples=samples,
        empirical=empirical,
        closed_form=closed,
        max_ratio_error=worst,
    )


@dataclass(frozen=True)
class LemmaReport:
    samples: int
    empirical_rho: float  # sample Pearson of (<q,r>, <q,r'>)
    closed_form: float  # cos(r, r')

    @property
    def abs_error(self) -> float:
        return abs(self.empirical_rho - self.closed_form)


def mc_verify_lemma(r, r_prime, samples: int, seed=0) -> LemmaReport:
    """Check that primary and spilled score errors correlate exactly like
    the cosine between the residuals, for unit-sphere queries."""
    rv = np.asarray(r, dtype=np.float64)
    rp = np.asarray(r_prime, dtype=np.float64)
    if rv.shape != rp.shape or rv.ndim != 1 or rv.shape[0] < 2:
        raise ValueError("r and r' must be equal-length 1-D vectors with d >= 2")
    if np.linalg.norm(rv) == 0 or np.linalg.norm(rp) == 0:
        raise ValueError("zero-norm input")
    if samples < 2:
        raise ValueError("need at least 2 samples")
    rv32 = rv.astype(np.float32)
    rp32 = rp.astype(np.float32)
    sa = sb = saa = sbb = sab = 0.0
    for block in _sphere_blocks(rv.shape[0], samples, seed):
        a = (block @ rv32).astype(np.float64)
        b = (block @ rp32).astype(np.float64)
        sa += a.sum()
        sb += b.sum()
        saa += a @ a
        sbb += b @ b
        sab += a @ b
    n = float(samples)
    cov = sab - sa * sb / n
    var_a = saa - sa * sa / n
    var_b = sbb - sb * sb / n
    rho = cov / np.sqrt(var_a * var_b)
    closed = float(rv @ rp / (np.linalg.norm(rv) * np.linalg.norm(rp)))
    return LemmaReport(samples=samples, empirical_rho=float(rho), closed_form=closed)
