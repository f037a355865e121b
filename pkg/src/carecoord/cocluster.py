"""Spectral co-clustering of the area x patient count matrix.

Rows (areas) and columns (patients) are embedded jointly through the singular
vectors of the degree-normalized matrix ``D1^-1/2 A D2^-1/2`` and clustered
together with k-means, which partitions the bipartite area/patient graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .datamodel import AreaUtilizationMatrix, DataError


class ConvergenceError(RuntimeError):
    def __init__(self, iterations, residual):
        super().__init__(f"subspace iteration did not converge after {iterations} iterations "
                         f"(last residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class NormalizedMatrix:
    values: sp.csr_matrix
    row_scale: np.ndarray
    col_scale: np.ndarray
    row_ids: tuple
    col_ids: tuple
    dropped_rows: tuple
    dropped_cols: tuple

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class SVDResult:
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray
    iterations: int
    residuals: np.ndarray


@dataclass(frozen=True)
class SpectralEmbedding:
    points: np.ndarray
    n_rows: int
    n_cols: int

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float


@dataclass(frozen=True)
class CoClusterAssignment:
    k: int
    patient_group: dict
    area_group: dict
    inertia: float
    dropped_patients: tuple = ()
    dropped_areas: tuple = ()
    singular_values: tuple = ()

    def patients_in(self, group):
        return [p for p, g in self.patient_group.items() if g == group]

    def areas_in(self, group):
        return [a for a, g in self.area_group.items() if g == group]


# ---------------------------------------------------------------------------

def normalize(aprime: AreaUtilizationMatrix) -> NormalizedMatrix:
    counts = sp.csr_matrix(aprime.counts, dtype=np.float64)
    if counts.shape[0] == 0 or counts.shape[1] == 0:
        raise DataError("degenerate matrix: empty")
    row_sum = np.asarray(counts.sum(axis=1)).ravel()
    col_sum = np.asarray(counts.sum(axis=0)).ravel()
    keep_r = np.flatnonzero(row_sum > 0)
    keep_c = np.flatnonzero(col_sum > 0)
    if keep_r.size == 0 or keep_c.size == 0:
        raise DataError("degenerate matrix: all rows or columns are zero")
    sub = counts[keep_r][:, keep_c]
    rs = 1.0 / np.sqrt(row_sum[keep_r])
    cs = 1.0 / np.sqrt(col_sum[keep_c])
    values = sp.csr_matrix(sp.diags(rs) @ sub @ sp.diags(cs))
    drop_r = tuple(aprime.areas[i] for i in np.flatnonzero(row_sum <= 0))
    drop_c = tuple(aprime.patients[j] for j in np.flatnonzero(col_sum <= 0))
    return NormalizedMatrix(values, rs, cs,
                            tuple(aprime.areas[i] for i in keep_r),
                            tuple(aprime.patients[j] for j in keep_c),
                            drop_r, drop_c)


def _fix_signs(u, v):
    # Orient each pair so the largest-magnitude entry of u is positive.
    idx = np.argmax(np.abs(u), axis=0)
    s = np.sign(u[idx, np.arange(u.shape[1])])
    s[s == 0] = 1.0
    return u * s, v * s


def _orthonormal_complement(q, locked, rng, rtol=1e-10):
    """Orthonormal basis of span(q) with ``locked`` projected out.

    Columns that are numerically dependent (a rank-deficient matrix collapses
    the power step) are refilled with random directions, so the block keeps
    its width without sneaking locked directions back in through QR.
    """
    for _ in range(5):
        q = q - locked @ (locked.T @ q)
        q, r = np.linalg.qr(q)
        d = np.abs(np.diag(r))
        bad = d <= rtol * max(d.max(initial=0.0), np.finfo(float).tiny)
        if not bad.any():
            q = q - locked @ (locked.T @ q)
            return np.linalg.qr(q)[0]
        q[:, bad] = rng.standard_normal((q.shape[0], int(bad.sum())))
    raise np.linalg.LinAlgError("could not build an orthonormal block")


def truncated_svd(m, num_vectors: int, tol: float = 1e-8, max_iter: int = 1000,
                  seed: int = 0, oversample: int = 8, known=None) -> SVDResult:
    """Leading singular triplets by block subspace iteration with locking.

    The start block is drawn on the row side, so permuting columns of ``m``
    permutes the right vectors and leaves the rest unchanged. Convergence is
    ``||M^T u - s v|| <= tol * s_1`` for every requested triplet; leading
    triplets that reach a much tighter residual are locked and deflated from
    the active block.

    ``known`` is an optional ``(u, s, v)`` of exact leading triplets (columns
    of ``u`` and ``v``); they start out locked and count toward ``num_vectors``.
    """
    mat = m.values if isinstance(m, NormalizedMatrix) else m
    mat = sp.csr_matrix(mat, dtype=np.float64) if sp.issparse(mat) else np.asarray(mat, dtype=np.float64)
    n_r, n_c = mat.shape
    if not 1 <= num_vectors <= min(n_r, n_c):
        raise ValueError(f"num_vectors must be in [1, {min(n_r, n_c)}], got {num_vectors}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    mt = mat.T.tocsr() if sp.issparse(mat) else mat.T

    rng = np.random.default_rng(seed)
    n_known = 0 if known is None else np.atleast_1d(known[1]).size
    b = min(num_vectors - n_known + oversample, min(n_r, n_c) - n_known)
    q = mt @ rng.standard_normal((n_r, b))

    locked_u = np.zeros((n_r, 0))
    locked_v = np.zeros((n_c, 0))
    locked_s = np.zeros(0)
    sigma1 = None
    resid = np.full(num_vectors, np.inf)
    if known is not None:
        ku, ks, kv = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in known)
        locked_u = ku.reshape(n_r, -1)
        locked_v = kv.reshape(n_c, -1)
        locked_s = ks
        if locked_s.size >= num_vectors:
            raise ValueError("known triplets already cover num_vectors")
        sigma1 = locked_s[0]
        resid[:locked_s.size] = np.linalg.norm(mt @ locked_u - locked_v * locked_s, axis=0)
    lock_tol = tol * 1e-4

    for it in range(1, max_iter + 1):
        # Rayleigh-Ritz on the active block, orthogonal to the locked vectors.
        q = _orthonormal_complement(q, locked_v, rng)
        ub, s, wt = np.linalg.svd(mat @ q, full_matrices=False)
        v = q @ wt.T
        if sigma1 is None or (locked_s.size == 0 and s[0] > sigma1):
            sigma1 = s[0] if locked_s.size == 0 else locked_s[0]
        scale = max(sigma1, np.finfo(float).tiny)
        r = np.linalg.norm(mt @ ub - v * s, axis=0)
        # A Ritz value at numerical zero belongs to the null space; its left
        # vector is arbitrary, so judge it by ||M v|| (= s) instead.
        r = np.where(s <= tol * scale, s, r)

        need = num_vectors - locked_s.size
        resid[locked_s.size:] = r[:need]
        if np.all(resid <= tol * scale):
            locked_u = np.hstack([locked_u, ub[:, :need]])
            locked_v = np.hstack([locked_v, v[:, :need]])
            locked_s = np.concatenate([locked_s, s[:need]])
            break
        # Lock well below tol so deflated vectors do not pollute the active block.
        n_lock = 0
        while n_lock < need - 1 and r[n_lock] <= lock_tol * scale:
            n_lock += 1
        if n_lock:
            locked_u = np.hstack([locked_u, ub[:, :n_lock]])
            locked_v = np.hstack([locked_v, v[:, :n_lock]])
            locked_s = np.concatenate([locked_s, s[:n_lock]])
        q = mt @ (mat @ v[:, n_lock:])
    else:
        raise ConvergenceError(max_iter, float(np.max(resid)))

    # Known triplets stay in front; rounding can put a computed twin a hair above them.
    rest = n_known + np.argsort(-locked_s[n_known:], kind="stable")
    order = np.concatenate([np.arange(n_known), rest])[:num_vectors]
    u, vv = _fix_signs(locked_u[:, order], locked_v[:, order])
    return SVDResult(u, locked_s[order], vv, it, resid[:num_vectors])


def trivial_triplet(m: NormalizedMatrix):
    """The leading singular triplet of a normalized matrix, known in closed form.

    D1^-1/2 A D2^-1/2 maps sqrt(col sums) to sqrt(row sums) with singular value 1.
    Deflating it exactly keeps the next vectors canonical when 1 is repeated, as
    it is for a disconnected (block-diagonal) matrix.
    """
    u = 1.0 / m.row_scale
    v = 1.0 / m.col_scale
    return u / np.linalg.norm(u), np.array([1.0]), v / np.linalg.norm(v)


def embedding_dim(k: int) -> int:
    return max(1, math.ceil(math.log2(k)))


def embed(svd: SVDResult, m: NormalizedMatrix, k: int, tol: float = 1e-8) -> SpectralEmbedding:
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    ell = embedding_dim(k)
    if svd.singular_values.size < ell + 1:
        raise ValueError(f"need {ell + 1} singular triplets for k={k}, have {svd.singular_values.size}")
    u = svd.left[:, 1:ell + 1] * m.row_scale[:, None]
    v = svd.right[:, 1:ell + 1] * m.col_scale[:, None]
    # Directions with zero singular value carry no structure.
    null = svd.singular_values[1:ell + 1] <= tol * svd.singular_values[0]
    u[:, null] = 0.0
    v[:, null] = 0.0
    return SpectralEmbedding(np.vstack([u, v]), u.shape[0], v.shape[0])


# ---------------------------------------------------------------------------
# k-means

def _distinct_count(points, rtol=1e-9):
    scale = max(float(np.max(np.abs(points))) if points.size else 0.0, 1e-300)
    return np.unique(np.round(points / (scale * rtol)), axis=0).shape[0]


def _sq_dist(points, centers):
    d = (points ** 2).sum(1)[:, None] - 2 * points @ centers.T + (centers ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def farthest_point_init(points, k, first):
    centers = [first]
    d = ((points - points[first]) ** 2).sum(1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        centers.append(nxt)
        d = np.minimum(d, ((points - points[nxt]) ** 2).sum(1))
    return points[centers].copy()


def _lloyd(points, centers, max_iter=300):
    k = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sq_dist(points, centers), axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # Repair: move the worst-fit point of the largest cluster.
            big = int(np.argmax(np.bincount(new, minlength=k)))
            members = np.flatnonzero(new == big)
            far = members[np.argmax(((points[members] - centers[big]) ** 2).sum(1))]
            new[far] = c
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.vstack([points[labels == c].mean(axis=0) for c in range(k)])
    inertia = float(((points - centers[labels]) ** 2).sum())
    return labels, centers, inertia


def greedy_kmeanspp_init(points, k, rng, n_candidates=None):
    """D^2-sampling seeding; each step keeps the candidate that most lowers the potential."""
    n = points.shape[0]
    n_candidates = n_candidates or 2 + int(np.log(k))
    first = int(rng.integers(n))
    centers = [first]
    d = ((points - points[first]) ** 2).sum(1)
    for _ in range(1, k):
        total = d.sum()
        if total <= 0:
            cand = rng.integers(n, size=n_candidates)
        else:
            cand = np.searchsorted(np.cumsum(d), rng.uniform(0, total, n_candidates))
            cand = np.minimum(cand, n - 1)
        best, best_pot, best_d = None, np.inf, None
        for c in cand:
            nd = np.minimum(d, ((points - points[c]) ** 2).sum(1))
            pot = nd.sum()
            if pot < best_pot:
                best, best_pot, best_d = int(c), pot, nd
        centers.append(best)
        d = best_d
    return points[centers].copy()


def kmeans_points(points, k: int, seed: int = 0, restarts: int = 10) -> KMeansResult:
    """Best-of-``restarts`` Lloyd k-means.

    Restart 0 uses greedy farthest-point seeding from the point farthest from
    the centroid. Farthest-point seeds chase outliers, which degree-scaled
    spectral embeddings of sparse counts have plenty of, so the remaining
    restarts seed by greedy D^2 sampling drawn from ``seed``. The lowest
    inertia wins; ties go to the lowest restart index.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if points.shape[0] < k or _distinct_count(points) < k:
        raise DataError("insufficient distinct points")
    rng = np.random.default_rng(seed)
    first = int(np.argmax(((points - points.mean(0)) ** 2).sum(1)))
    best = None
    for r in range(max(restarts, 1)):
        init = farthest_point_init(points, k, first) if r == 0 else greedy_kmeanspp_init(points, k, rng)
        labels, centers, inertia = _lloyd(points, init)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, centers, inertia)
    return best


def kmeans(embedding: SpectralEmbedding, k: int, seed: int = 0, restarts: int = 10) -> KMeansResult:
    return kmeans_points(embedding.points, k, seed, restarts)


def _canonical_labels(result: KMeansResult, n_rows: int):
    """Relabel clusters 1..k by ascending patient count, ties by centroid."""
    k = result.centers.shape[0]
    pcount = np.bincount(result.labels[n_rows:], minlength=k)
    keys = sorted(range(k), key=lambda c: (pcount[c], tuple(np.round(result.centers[c], 12)), c))
    remap = np.empty(k, dtype=np.int64)
    for new, old in enumerate(keys, start=1):
        remap[old] = new
    return remap[result.labels]


def cocluster(aprime: AreaUtilizationMatrix, k: int = 3, seed: int = 0, restarts: int = 10,
              tol: float = 1e-8, max_iter: int = 1000) -> CoClusterAssignment:
    m = normalize(aprime)
    ell = embedding_dim(k)
    if min(m.shape) < ell + 1:
        raise DataError(f"matrix {m.shape} too small for k={k}")
    svd = truncated_svd(m, ell + 1, tol=tol, max_iter=max_iter, seed=seed, known=trivial_triplet(m))
    emb = embed(svd, m, k, tol=tol)
    res = kmeans(emb, k, seed=seed, restarts=restarts)
    labels = _canonical_labels(res, emb.n_rows)
    area_group = {a: int(g) for a, g in zip(m.row_ids, labels[:emb.n_rows])}
    patient_group = {p: int(g) for p, g in zip(m.col_ids, labels[emb.n_rows:])}
    return CoClusterAssignment(k, patient_group, area_group, res.inertia,
                               m.dropped_cols, m.dropped_rows,
                               tuple(float(s) for s in svd.singular_values))


# ---------------------------------------------------------------------------
# model selection

def silhouette(points, labels, chunk: int = 2048) -> float:
    """Mean silhouette width; singleton clusters score 0."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    sizes = np.bincount(inv)
    onehot = np.zeros((labels.size, uniq.size))
    onehot[np.arange(labels.size), inv] = 1.0
    sq = (points ** 2).sum(1)
    s = np.empty(labels.size)
    for start in range(0, labels.size, chunk):
        stop = min(start + chunk, labels.size)
        d2 = sq[start:stop, None] - 2 * points[start:stop] @ points.T + sq[None, :]
        d = np.sqrt(np.maximum(d2, 0.0))
        d[np.arange(stop - start), np.arange(start, stop)] = 0.0
        sums = d @ onehot
        own = inv[start:stop]
        rows = np.arange(stop - start)
        own_n = sizes[own] - 1
        a = np.where(own_n > 0, sums[rows, own] / np.maximum(own_n, 1), 0.0)
        other = sums / sizes[None, :]
        other[rows, own] = np.inf
        b = other.min(axis=1)
        denom = np.maximum(a, b)
        val = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        s[start:stop] = np.where(own_n > 0, val, 0.0)
    return float(s.mean())


def choose_k(aprime: AreaUtilizationMatrix, k_min: int = 2, k_max: int = 6, seed: int = 0,
             restarts: int = 10, tol: float = 1e-8) -> int:
    """Pick k by mean silhouette of the embedding clustering; ties go to the smaller k.

    A k whose embedding has fewer than k distinct points is skipped; if every
    k is skipped, ``k_min`` is returned.
    """
    if not 2 <= k_min <= k_max:
        raise ValueError(f"invalid k range [{k_min}, {k_max}]")
    m = normalize(aprime)
    ell_max = embedding_dim(k_max)
    nv = min(ell_max + 1, min(m.shape))
    if nv < 2:
        return k_min
    svd = truncated_svd(m, nv, tol=tol, seed=seed, known=trivial_triplet(m))
    best_k, best_s = k_min, -np.inf
    for k in range(k_min, k_max + 1):
        if embedding_dim(k) + 1 > nv:
            break
        emb = embed(svd, m, k, tol=tol)
        try:
            res = kmeans(emb, k, seed=seed, restarts=restarts)
        except DataError:
            continue
        score = silhouette(emb.points, res.labels)
        if score > best_s + 1e-12:
            best_k, best_s = k, score
    return best_k
