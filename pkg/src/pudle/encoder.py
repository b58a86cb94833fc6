"""Unrolled ISTA encoder, a high-precision lasso solver and KKT checks.

Codes are stored column-wise: a batch of ``n`` samples is a ``p x n``
array.  Every public function also accepts single vectors and returns
vectors in that case.
"""

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .metrics import spectral_norm


class NonConverged(RuntimeError):
    """Raised by :func:`solve_lasso` when the KKT tolerance is not reached."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class StepSizeWarning(UserWarning):
    pass


def soft_threshold(v, b):
    """``sign(v) * max(|v| - b, 0)``."""
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - b, 0.0)


def hard_threshold(v, b):
    """``v * 1{|v| >= b}``."""
    v = np.asarray(v, dtype=float)
    return np.where(np.abs(v) >= b, v, 0.0)


PROX = {"soft": soft_threshold, "hard": hard_threshold}


@dataclass(frozen=True)
class LambdaSchedule:
    """Per-layer regularisation ``lambda_t`` for ``t = 0 .. T-1``.

    ``fixed``      lambda_t = lam
    ``geometric``  lambda_t = lam * nu**t
    ``oracle``     lambda_t = (mu / sqrt(m)) * ||z* - z_t||_1 + a_gamma,
                   which needs the ground-truth codes; ``lam0`` (optional)
                   overrides the first layer so support can be picked up
                   from ``z_0 = 0``.
    """

    kind: str = "fixed"
    lam: float = 0.0
    nu: float = 1.0
    a_gamma: float = 0.0
    mu: Optional[float] = None
    lam0: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("fixed", "geometric", "oracle"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0 < self.nu <= 1:
            raise ValueError("nu must lie in (0, 1]")
        if self.kind == "oracle" and self.mu is None:
            raise ValueError("oracle schedule needs the incoherence mu")

    @classmethod
    def fixed(cls, lam):
        return cls("fixed", lam=lam)

    @classmethod
    def geometric(cls, lam, nu):
        return cls("geometric", lam=lam, nu=nu)

    @classmethod
    def oracle(cls, a_gamma, mu, lam0=None):
        return cls("oracle", a_gamma=a_gamma, mu=mu, lam0=lam0)

    def values(self, t, z_t, z_star=None, m=None):
        """Per-sample lambda for layer ``t`` given the current codes ``z_t`` (p x n).

        ``m`` (signal dimension) is only needed by the oracle rule.
        """
        n = z_t.shape[1]
        if self.kind == "fixed":
            return np.full(n, self.lam)
        if self.kind == "geometric":
            return np.full(n, self.lam * self.nu ** t)
        if t == 0 and self.lam0 is not None:
            return np.full(n, self.lam0)
        if z_star is None:
            raise ValueError("oracle schedule needs ground-truth codes at evaluation time")
        return self.mu / np.sqrt(m) * np.abs(z_star - z_t).sum(axis=0) + self.a_gamma


@dataclass(frozen=True)
class EncoderConfig:
    T: int
    alpha: float
    prox: str = "soft"
    schedule: LambdaSchedule = LambdaSchedule.fixed(0.0)
    z0: Optional[np.ndarray] = None
    strict: bool = False

    def __post_init__(self):
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.prox not in PROX:
            raise ValueError(f"unknown prox {self.prox!r}")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class CodeTrajectory:
    """Iterates of the unrolled encoder.

    ``states`` has shape ``(T+1, p, n)``; ``masks[t]`` marks the entries
    that passed the threshold in layer ``t`` (the prox derivative);
    ``margins[t]`` is, per sample, the smallest distance of a pre-threshold
    value to the threshold ``thresholds[t]``.
    """

    states: np.ndarray
    masks: np.ndarray
    margins: np.ndarray
    lambdas: np.ndarray
    thresholds: np.ndarray
    alpha: float
    prox: str
    single: bool = False

    @property
    def T(self):
        return self.states.shape[0] - 1

    @property
    def z_T(self):
        z = self.states[-1]
        return z[:, 0] if self.single else z

    def z(self, t):
        z = self.states[t]
        return z[:, 0] if self.single else z

    def supports(self, sample=0):
        """Index sets ``{j : z_t[j] != 0}`` for t = 0..T of one sample."""
        return [np.flatnonzero(self.states[t][:, sample]) for t in range(self.T + 1)]

    def margin_ok(self, rel_eps=1e-4):
        """Per sample: no pre-threshold value within ``rel_eps * threshold``."""
        if self.T == 0:
            return np.ones(self.states.shape[2], dtype=bool)
        return np.all(self.margins >= rel_eps * self.thresholds, axis=0)

    def truncate(self, t):
        """The trajectory of the first ``t`` layers."""
        return CodeTrajectory(self.states[: t + 1], self.masks[:t], self.margins[:t],
                              self.lambdas[:t], self.thresholds[:t], self.alpha,
                              self.prox, self.single)


def _batch(a):
    a = np.asarray(a, dtype=float)
    return (a[:, None], True) if a.ndim == 1 else (a, False)


def ista_step(z, d, x, alpha, lambda_t, prox="soft"):
    """One layer ``prox(z - alpha * D^T (D z - x))``.

    Soft prox thresholds at ``alpha * lambda_t``; hard prox at ``lambda_t``.
    """
    d = np.asarray(d, dtype=float)
    zb, single = _batch(z)
    xb, _ = _batch(x)
    if d.shape[0] != xb.shape[0] or d.shape[1] != zb.shape[0]:
        raise ValueError(f"shape mismatch: D {d.shape}, z {zb.shape}, x {xb.shape}")
    # same arithmetic as the layers of encode
    u = (np.eye(d.shape[1]) - alpha * (d.T @ d)) @ zb + alpha * (d.T @ xb)
    thr = alpha * lambda_t if prox == "soft" else lambda_t
    out = PROX[prox](u, thr)
    return out[:, 0] if single else out


def _check_step(d, alpha, strict):
    L = spectral_norm(d, tol=1e-8) ** 2
    if alpha * L >= 1.0:
        msg = f"step size alpha={alpha} >= 1/sigma_max^2(D)={1.0 / L:.4g}"
        if strict:
            raise ValueError(msg)
        warnings.warn(msg, StepSizeWarning, stacklevel=3)


def encode(x, d, config: EncoderConfig, z_star=None, check_step=True,
           diagnostics=True) -> CodeTrajectory:
    """Run ``config.T`` ISTA layers from ``config.z0`` (zero by default).

    With ``diagnostics=False`` the per-layer threshold margins are not
    computed (left as NaN), which saves time inside training loops.
    """
    d = np.asarray(d, dtype=float)
    xb, single = _batch(x)
    m, p = d.shape
    n = xb.shape[1]
    if xb.shape[0] != m:
        raise ValueError(f"x has {xb.shape[0]} rows, D has {m}")
    if z_star is not None:
        z_star, _ = _batch(z_star)
    if check_step:
        _check_step(d, config.alpha, config.strict)
    sched = config.schedule

    T, alpha = config.T, config.alpha
    states = np.empty((T + 1, p, n))
    masks = np.empty((T, p, n), dtype=bool)
    margins = np.full((T, n), np.nan)
    lambdas = np.empty((T, n))
    if config.z0 is None:
        states[0] = 0.0
    else:
        states[0] = _batch(config.z0)[0]

    # z - alpha (G z - D^T x) = (I - alpha G) z + alpha D^T x
    layer = np.eye(p) - alpha * (d.T @ d)
    bias = alpha * (d.T @ xb)
    soft = config.prox == "soft"
    u = np.empty((p, n))
    clipped = np.empty((p, n))
    for t in range(T):
        z = states[t]
        lam = sched.values(t, z, z_star, m)
        thr = alpha * lam if soft else lam
        np.matmul(layer, z, out=u)
        u += bias
        if soft:
            # soft threshold as u - clip(u, -thr, thr)
            np.minimum(u, thr, out=clipped)
            np.maximum(clipped, -thr, out=clipped)
            np.subtract(u, clipped, out=states[t + 1])
            np.not_equal(states[t + 1], 0.0, out=masks[t])
        else:
            au = np.abs(u)
            np.greater(au, thr, out=masks[t])
            states[t + 1] = np.where(au >= thr, u, 0.0)
        if not np.isfinite(states[t + 1]).all():
            raise FloatingPointError(f"non-finite code values produced by encoder layer {t}")
        if diagnostics:
            margins[t] = np.abs(np.abs(u) - thr).min(axis=0)
        lambdas[t] = lam
    thresholds = alpha * lambdas if soft else lambdas.copy()
    return CodeTrajectory(states, masks, margins, lambdas, thresholds, alpha,
                          config.prox, single)


def lasso_objective(x, d, z, lam):
    """``0.5 ||x - D z||^2 + lam ||z||_1`` per sample."""
    d = np.asarray(d, dtype=float)
    xb, single = _batch(x)
    zb, _ = _batch(z)
    r = xb - d @ zb
    f = 0.5 * np.sum(r * r, axis=0) + lam * np.abs(zb).sum(axis=0)
    return float(f[0]) if single else f


def kkt_residual(z, x, d, lam):
    """Largest violation of the lasso optimality conditions, per sample.

    On the support ``|D_j^T r - lam sign(z_j)|``; off it
    ``max(|D_j^T r| - lam, 0)``, with ``r = x - D z``.
    """
    d = np.asarray(d, dtype=float)
    zb, single = _batch(z)
    xb, _ = _batch(x)
    c = d.T @ (xb - d @ zb)
    on = np.abs(c - lam * np.sign(zb))
    off = np.maximum(np.abs(c) - lam, 0.0)
    res = np.where(zb != 0, on, off).max(axis=0)
    return float(res[0]) if single else res


def _polish(x, d, z, lam):
    """Exact lasso solution on the current signed support, if consistent."""
    s = np.flatnonzero(z)
    if s.size == 0:
        return np.zeros_like(z)
    ds = d[:, s]
    sign = np.sign(z[s])
    try:
        zs = np.linalg.solve(ds.T @ ds, ds.T @ x - lam * sign)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.sign(zs) != sign):
        return None
    out = np.zeros_like(z)
    out[s] = zs
    return out


def solve_lasso(x, d, lam, tol=1e-10, max_iter=200_000, check_every=50):
    """Lasso minimiser to KKT residual ``<= tol``.

    ISTA with step ``1/sigma_max^2(D)``; every ``check_every`` iterations
    each unconverged sample is also solved exactly on its current signed
    support, and that candidate is kept when it satisfies the KKT
    conditions.  Raises :class:`NonConverged` after ``max_iter``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    d = np.asarray(d, dtype=float)
    xb, single = _batch(x)
    p, n = d.shape[1], xb.shape[1]
    L = spectral_norm(d, tol=1e-10) ** 2
    if L == 0.0:
        z = np.zeros((p, n))
        return z[:, 0] if single else z
    alpha = 0.99 / L
    gram = d.T @ d
    dtx = d.T @ xb
    z = np.zeros((p, n))
    active = np.ones(n, dtype=bool)
    it = 0
    res = kkt_residual(z, xb, d, lam)
    active = res > tol
    while active.any():
        if it >= max_iter:
            worst = float(res.max())
            raise NonConverged(f"lasso not solved to {tol:g} after {max_iter} iterations "
                               f"(residual {worst:.3g})", worst)
        idx = np.flatnonzero(active)
        za = z[:, idx]
        ga, ba = gram, dtx[:, idx]
        for _ in range(check_every):
            za = soft_threshold(za - alpha * (ga @ za - ba), alpha * lam)
        it += check_every
        z[:, idx] = za
        res[idx] = kkt_residual(za, xb[:, idx], d, lam)
        for k in idx[res[idx] > tol]:
            cand = _polish(xb[:, k], d, z[:, k], lam)
            if cand is None:
                continue
            r = kkt_residual(cand, xb[:, k], d, lam)
            if r <= tol:
                z[:, k] = cand
                res[k] = r
        active = res > tol
    return z[:, 0] if single else z
