"""Dictionary comparison up to permutation and sign, spectral norms and
support statistics."""

from dataclasses import dataclass

import numpy as np

from .rng import stream


@dataclass
class Alignment:
    """Matching of the columns of ``d`` onto the columns of ``d_star``.

    ``perm[i]`` is the column of ``d`` matched to ``d_star[:, i]`` and
    ``signs[i]`` the sign applied to it, so the aligned dictionary is
    ``d[:, perm] * signs``.
    """

    perm: np.ndarray
    signs: np.ndarray
    per_column_dist: np.ndarray
    total_cost: float

    def apply(self, d):
        return np.asarray(d)[:, self.perm] * self.signs

    def invert(self, d_aligned):
        """Undo :meth:`apply`."""
        out = np.empty_like(d_aligned)
        out[:, self.perm] = d_aligned * self.signs
        return out

    @classmethod
    def identity(cls, p):
        return cls(np.arange(p), np.ones(p), np.zeros(p), 0.0)


def hungarian_assign(cost):
    """Minimum-cost perfect assignment for a square cost matrix.

    Shortest augmenting path with dual potentials, O(p^3).  Returns
    ``assign`` with ``assign[i]`` the column given to row ``i``.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)

    # 1-based columns; column 0 is the virtual source of each augmentation.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)  # match[j] = row (1-based) owning column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    assign = np.empty(n, dtype=int)
    assign[match[1:] - 1] = np.arange(n)
    return assign


def align_dictionaries(d, d_star) -> Alignment:
    """Match columns of ``d`` to ``d_star`` allowing a sign flip per pair.

    The pair cost is ``min over sign of ||sign * d_j - d_star_i||_2``.
    """
    d = np.asarray(d, dtype=float)
    d_star = np.asarray(d_star, dtype=float)
    if d.shape != d_star.shape:
        raise ValueError(f"shape mismatch: {d.shape} vs {d_star.shape}")
    if np.any(np.linalg.norm(d, axis=0) == 0) or np.any(np.linalg.norm(d_star, axis=0) == 0):
        raise ValueError("dictionaries must have nonzero columns")
    # cost[i, j] compares d_star column i with d column j
    # squared distances from norms and inner products, O(m p^2) time, O(p^2) memory
    sq = np.sum(d_star * d_star, axis=0)[:, None] + np.sum(d * d, axis=0)[None, :]
    cross = 2.0 * (d_star.T @ d)
    dist_pos = np.sqrt(np.maximum(sq - cross, 0.0))
    dist_neg = np.sqrt(np.maximum(sq + cross, 0.0))
    cost = np.minimum(dist_pos, dist_neg)
    perm = hungarian_assign(cost)
    rows = np.arange(d.shape[1])
    signs = np.where(dist_neg[rows, perm] < dist_pos[rows, perm], -1.0, 1.0)
    dist = np.linalg.norm(d[:, perm] * signs - d_star, axis=0)
    return Alignment(perm, signs, dist, float(dist.sum()))


def spectral_norm(a, tol=1e-12, max_iter=10_000, restarts=3, seed=0, squarings=5):
    """Largest singular value of ``a`` by power iteration.

    The iteration runs on ``(a^T a)^(2^squarings)`` (formed by repeated
    normalised squaring) so a small spectral gap does not stall it.  Each of
    ``restarts`` random starts iterates until the Rayleigh quotient of
    ``a^T a`` changes by less than ``tol`` (relative) and its eigen-residual
    is below ``sqrt(tol)``; the largest estimate is returned.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if not np.any(a):
        return 0.0
    b = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    c = b / np.linalg.norm(b)
    for _ in range(squarings):
        c = c @ c
        c /= np.linalg.norm(c)
    rng = stream(seed, "probe")
    best = 0.0
    for _ in range(restarts):
        v = rng.standard_normal(b.shape[0])
        v /= np.linalg.norm(v)
        rq = 0.0
        for _ in range(max_iter):
            w = c @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            v = w / nw
            bv = b @ v
            rq_new = float(v @ bv)
            res = np.linalg.norm(bv - rq_new * v)
            converged = abs(rq_new - rq) <= tol * rq_new and res <= np.sqrt(tol) * rq_new
            rq = rq_new
            if converged:
                break
        best = max(best, rq)
    return float(np.sqrt(best))


def relative_error(d, d_star, alignment: Alignment = None, d_star_norm=None):
    """``||aligned(d) - d_star||_2 / ||d_star||_2``.

    ``d_star_norm`` may be passed to reuse a precomputed ``||d_star||_2``.
    """
    if alignment is None:
        alignment = align_dictionaries(d, d_star)
    diff = alignment.apply(d) - np.asarray(d_star, dtype=float)
    if d_star_norm is None:
        d_star_norm = spectral_norm(d_star)
    return spectral_norm(diff) / d_star_norm


@dataclass
class SupportStats:
    exact_signed: bool
    precision: float
    recall: float


def support_stats(z, z_star) -> SupportStats:
    """Signed-support agreement between a code estimate and the truth.

    An empty predicted support has precision 1 (nothing false reported);
    an empty true support has recall 1.
    """
    z = np.asarray(z)
    z_star = np.asarray(z_star)
    if z.shape != z_star.shape:
        raise ValueError("code shapes differ")
    pred = z != 0
    true = z_star != 0
    hits = np.count_nonzero(pred & true)
    precision = hits / np.count_nonzero(pred) if pred.any() else 1.0
    recall = hits / np.count_nonzero(true) if true.any() else 1.0
    exact = bool(np.array_equal(np.sign(z), np.sign(z_star)))
    return SupportStats(exact, float(precision), float(recall))
