"""Representer-point view of a dictionary at a ridge-regularised stationary
point: atoms and reconstructions written as combinations of training data.

With training data ``X`` (m x n), converged codes ``Z`` (p x n) and ridge
weight ``omega``, the stationary dictionary is ``X G^{-1} Z^T`` where
``G = Z^T Z + omega I``.  ``G`` is factorised once (Cholesky) and only
ever solved against.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .rng import stream

DEFAULT_OMEGA = 1e-3
REPRESENTER_BUDGET = 10_000


class RepresenterBudgetExceeded(MemoryError):
    pass


@dataclass
class RepresenterModel:
    x_train: np.ndarray
    z_train: np.ndarray
    omega: float
    gram_factor: tuple  # output of scipy.linalg.cho_factor

    @property
    def n(self):
        return self.x_train.shape[1]

    @property
    def p(self):
        return self.z_train.shape[0]

    def solve(self, rhs):
        """``G^{-1} rhs``."""
        return scipy.linalg.cho_solve(self.gram_factor, rhs)


def build_model(x_train, z_train, omega=DEFAULT_OMEGA, budget=REPRESENTER_BUDGET) -> RepresenterModel:
    x = np.asarray(x_train, dtype=float)
    z = np.asarray(z_train, dtype=float)
    if x.ndim != 2 or z.ndim != 2 or x.shape[1] != z.shape[1]:
        raise ValueError(f"x_train {x.shape} and z_train {z.shape} need the same number of columns")
    if not omega > 0:
        raise ValueError("omega must be positive")
    n = x.shape[1]
    if n > budget:
        raise RepresenterBudgetExceeded(
            f"representer model with n={n} exceeds the budget of {budget} training samples; "
            "subsample the training set")
    g = z.T @ z
    g[np.diag_indices(n)] += omega
    try:
        factor = scipy.linalg.cho_factor(g)
    except np.linalg.LinAlgError as exc:  # cannot happen for omega > 0 in exact arithmetic
        raise AssertionError("Cholesky factorisation of Z^T Z + omega I failed") from exc
    return RepresenterModel(x, z, float(omega), factor)


def reconstruct_dictionary(model: RepresenterModel):
    """``X G^{-1} Z^T``."""
    return model.x_train @ model.solve(model.z_train.T)


def stationarity_residual(d, x_train, z_train, omega):
    """Relative size of ``(X - D Z) Z^T - omega D``, which vanishes exactly at
    the ridge-regularised stationary dictionary."""
    d = np.asarray(d, dtype=float)
    x = np.asarray(x_train, dtype=float)
    z = np.asarray(z_train, dtype=float)
    if d.shape[0] != x.shape[0] or d.shape[1] != z.shape[0] or x.shape[1] != z.shape[1]:
        raise ValueError("shapes of d, x_train and z_train do not agree")
    dzz = d @ (z @ z.T)
    num = np.linalg.norm(x @ z.T - dzz - omega * d)
    den = np.linalg.norm(dzz) + omega * np.linalg.norm(d)
    if den == 0:
        return float(num)
    return float(num / den)


def atom_weights(model: RepresenterModel, j):
    """Interpolation weights ``G^{-1} w_j`` of atom ``j`` over the training
    samples, with ``w_j`` the activity of atom ``j`` across the training codes."""
    if not 0 <= j < model.p:
        raise IndexError(f"atom index {j} out of range for p={model.p}")
    return model.solve(model.z_train[j])


def representer_beta(model: RepresenterModel, z_hat):
    """``beta = G^{-1} Z^T z_hat``; the reconstruction is ``X beta``.

    Accepts a p-vector or a p x k matrix of test codes.
    """
    return model.solve(model.z_train.T @ np.asarray(z_hat, dtype=float))


@dataclass
class Contributions:
    """Per-training-sample decomposition of one test reconstruction.

    ``vectors[:, k] = (X G^{-1})_k * similarity[k]`` and the columns sum to the
    reconstruction.
    """

    beta: np.ndarray
    similarity: np.ndarray
    vectors: np.ndarray

    @property
    def reconstruction(self):
        return self.vectors.sum(axis=1)


def transformed_samples(model: RepresenterModel):
    """``X G^{-1}`` (m x n)."""
    # G is symmetric, so X G^{-1} = (G^{-1} X^T)^T
    return model.solve(model.x_train.T).T


def code_similarity_contributions(model: RepresenterModel, z_hat, transformed=None) -> Contributions:
    z_hat = np.asarray(z_hat, dtype=float)
    if z_hat.shape != (model.p,):
        raise ValueError(f"expected a single code of length {model.p}")
    sim = model.z_train.T @ z_hat
    xg = transformed_samples(model) if transformed is None else transformed
    return Contributions(model.solve(sim), sim, xg * sim)


def top_contributors(scores, k, descending=True):
    """Indices of the ``k`` largest (or smallest) scores, ties by ascending index."""
    scores = np.asarray(scores, dtype=float)
    if not 0 <= k <= scores.size:
        raise ValueError(f"k={k} must lie in [0, {scores.size}]")
    key = -scores if descending else scores
    order = np.lexsort((np.arange(scores.size), key))
    return order[:k]


def span_residual(d, x_train):
    """Largest relative distance of a column of ``d`` from the range of ``x_train``."""
    q, r = np.linalg.qr(np.asarray(x_train, dtype=float))
    diag = np.abs(np.diag(r))
    q = q[:, diag > diag.max() * 1e-12] if diag.size else q
    d = np.asarray(d, dtype=float)
    resid = d - q @ (q.T @ d)
    norms = np.linalg.norm(d, axis=0)
    return float(np.max(np.linalg.norm(resid, axis=0) / np.where(norms == 0, 1.0, norms)))


def min_eigenvalue_probe(model: RepresenterModel, iters=200, seed=0):
    """Smallest eigenvalue of ``G`` by inverse power iteration on the factor."""
    v = stream(seed, "probe").standard_normal(model.n)
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = model.solve(v)
        v = w / np.linalg.norm(w)
    gv = model.z_train.T @ (model.z_train @ v) + model.omega * v
    return float(v @ gv)


def ridge_fit_dictionary(x_train, z_train, omega, d0=None, tol=1e-8, max_iter=100_000):
    """Gradient descent on ``0.5 ||X - D Z||_F^2 + 0.5 omega ||D||_F^2`` with the
    codes held fixed, stopped once the gradient's Frobenius norm is below
    ``tol``.  Returns ``(D, grad_norm, iterations)``."""
    x = np.asarray(x_train, dtype=float)
    z = np.asarray(z_train, dtype=float)
    zz = z @ z.T
    xz = x @ z.T
    ev = np.linalg.eigvalsh(zz)
    step = 2.0 / (ev[0] + ev[-1] + 2 * omega)
    d = np.zeros((x.shape[0], z.shape[0])) if d0 is None else np.array(d0, dtype=float)
    gnorm = np.inf
    for it in range(max_iter):
        g = d @ zz - xz + omega * d
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            return d, gnorm, it
        d -= step * g
    return d, gnorm, max_iter
