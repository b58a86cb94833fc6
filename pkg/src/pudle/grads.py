"""Dictionary gradient estimators and code Jacobians.

Jacobian layout: a :class:`JacobianDense` holds an array of shape
``(p, m, p)`` where ``entries[j]`` is the ``m x p`` matrix
``d z_j / d D``.  The adjoint ``J^+ v`` of a p-vector is then
``sum_j v_j entries[j]``, an ``m x p`` matrix.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .encoder import CodeTrajectory, EncoderConfig, _batch, solve_lasso

GRAD_KINDS = ("dec", "ae-lasso", "ae-ls", "oracle-local", "oracle-global")
JACOBIAN_BUDGET = 10_000_000


class SingularSupportGram(np.linalg.LinAlgError):
    pass


class JacobianBudgetExceeded(MemoryError):
    pass


@dataclass
class GradientEstimate:
    value: np.ndarray
    kind: str
    t_used: int = 0
    margin_ok: bool = True

    def __post_init__(self):
        if self.kind not in GRAD_KINDS:
            raise ValueError(f"unknown gradient kind {self.kind!r}")


@dataclass
class JacobianDense:
    entries: np.ndarray  # (p, m, p)

    @property
    def shape(self):
        return self.entries.shape

    def adjoint(self, v):
        """``J^+ v`` for a p-vector ``v``; returns an ``m x p`` matrix."""
        return np.tensordot(np.asarray(v, dtype=float), self.entries, axes=(0, 0))

    def apply(self, delta_d):
        """Directional derivative of the code along a dictionary perturbation."""
        return np.tensordot(self.entries, delta_d, axes=([1, 2], [0, 1]))

    def norm(self):
        """Operator 2-norm of the ``p x (m p)`` matrix."""
        p = self.entries.shape[0]
        return float(np.linalg.norm(self.entries.reshape(p, -1), 2))

    def __sub__(self, other):
        return JacobianDense(self.entries - other.entries)


def _decoder_grad(xb, zb, d):
    # -(x - D z) z^T averaged over columns
    return (d @ zb - xb) @ zb.T / xb.shape[1]


def grad_dec(x, z_T, d) -> GradientEstimate:
    """Decoder-only gradient ``(1/n) sum_i -(x_i - D z_i) z_i^T``."""
    xb, _ = _batch(x)
    zb, _ = _batch(z_T)
    d = np.asarray(d, dtype=float)
    return GradientEstimate(_decoder_grad(xb, zb, d), "dec")


def backprop_grad(x, trajectory: CodeTrajectory, d, loss="least-squares",
                  config: EncoderConfig = None, lam=None, rel_eps=1e-4) -> GradientEstimate:
    """Reverse-mode derivative of the unrolled loss with respect to ``D``.

    The scalar differentiated per sample is ``0.5 ||x - D z_T(D)||^2``,
    plus ``lam ||z_T(D)||_1`` when ``loss == "lasso"``.  The prox
    derivative is the layer mask stored in the trajectory, the l1
    subgradient at zero entries is taken as 0, and the per-layer lambdas
    are treated as constants.  ``lam`` defaults to the last layer's lambda.
    """
    if loss not in ("lasso", "least-squares"):
        raise ValueError(f"unknown loss {loss!r}")
    d = np.asarray(d, dtype=float)
    xb, _ = _batch(x)
    n = xb.shape[1]
    alpha = trajectory.alpha if config is None else config.alpha
    T = trajectory.T
    zT = trajectory.states[T]

    r = d @ zT - xb
    grad = r @ zT.T
    v = d.T @ r
    if loss == "lasso":
        if lam is None:
            lam = trajectory.lambdas[-1] if T > 0 else 0.0
        v = v + np.sign(zT) * lam

    layer = np.eye(d.shape[1]) - alpha * (d.T @ d)
    acc_zw = np.zeros((d.shape[1], d.shape[1]))
    acc_w = np.zeros_like(zT)
    w = np.empty_like(zT)
    for t in range(T - 1, -1, -1):
        np.multiply(trajectory.masks[t], v, out=w)
        acc_zw += trajectory.states[t] @ w.T
        acc_w += w
        np.matmul(layer, w, out=v)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite adjoint at encoder layer {t}")
    # layer terms: -alpha [(D z_t - x) w_t^T + D w_t z_t^T]
    grad -= alpha * (d @ (acc_zw + acc_zw.T) - xb @ acc_w.T)
    grad /= n
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite dictionary gradient")
    kind = "ae-lasso" if loss == "lasso" else "ae-ls"
    ok = bool(np.all(trajectory.margin_ok(rel_eps)))
    return GradientEstimate(grad, kind, T, ok)


def _check_budget(m, p):
    if m * p * p > JACOBIAN_BUDGET:
        raise JacobianBudgetExceeded(
            f"dense Jacobian needs m*p^2 = {m * p * p} > {JACOBIAN_BUDGET} entries; "
            "use backprop_grad for adjoint products instead")


def _dgrad_dd(d, z, x):
    """``d/dD [D^T (D z - x)]`` as a (p, m, p) array."""
    r = d @ z - x
    out = np.einsum("ij,k->jik", d, z)
    idx = np.arange(d.shape[1])
    out[idx, :, idx] += r
    return out


def iter_explicit_jacobians(trajectory: CodeTrajectory, d, x, config: EncoderConfig = None,
                            sample=0):
    """Yield ``J_0 = 0, J_1, ..., J_T`` for one sample by forward accumulation of
    ``J_{t+1} = mask_t (J_t - a D^T D J_t - a d/dD[D^T(D z_t - x)])``."""
    d = np.asarray(d, dtype=float)
    m, p = d.shape
    _check_budget(m, p)
    xb, _ = _batch(x)
    xs = xb[:, sample]
    alpha = trajectory.alpha if config is None else config.alpha
    gram = d.T @ d
    jac = np.zeros((p, m, p))
    yield JacobianDense(jac)
    for t in range(trajectory.T):
        z = trajectory.states[t][:, sample]
        mask = trajectory.masks[t][:, sample]
        upd = jac - alpha * np.tensordot(gram, jac, axes=(1, 0)) - alpha * _dgrad_dd(d, z, xs)
        jac = upd * mask[:, None, None]
        yield JacobianDense(jac)


def explicit_jacobian(trajectory: CodeTrajectory, d, x, config: EncoderConfig = None,
                      sample=0) -> JacobianDense:
    """``J_T`` for one sample of the trajectory (see :func:`iter_explicit_jacobians`)."""
    for jac in iter_explicit_jacobians(trajectory, d, x, config, sample):
        pass
    return jac


def fixed_point_jacobian(z_hat, d, x) -> JacobianDense:
    """Closed-form Jacobian of the lasso minimiser with respect to ``D``.

    On the support ``S`` of ``z_hat`` the rows solve
    ``(D_S^T D_S) J_S = -[d/dD D^T(D z - x)]_S``; rows off ``S`` are zero.
    """
    d = np.asarray(d, dtype=float)
    z_hat = np.asarray(z_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    m, p = d.shape
    _check_budget(m, p)
    jac = np.zeros((p, m, p))
    s = np.flatnonzero(z_hat)
    if s.size == 0:
        return JacobianDense(jac)
    ds = d[:, s]
    rhs = _dgrad_dd(d, z_hat, x)[s].reshape(s.size, m * p)
    try:
        factor = scipy.linalg.cho_factor(ds.T @ ds)
    except np.linalg.LinAlgError as exc:
        raise SingularSupportGram(f"Gram matrix on support {s.tolist()} is singular") from exc
    jac[s] = -scipy.linalg.cho_solve(factor, rhs).reshape(s.size, m, p)
    return JacobianDense(jac)


def assemble_gradient(x, z, d, jac: JacobianDense, lam=0.0):
    """``grad_2 L(z, D) + J^+ (grad_1 L(z, D) + lam sign(z))`` for one sample."""
    d = np.asarray(d, dtype=float)
    r = d @ z - x
    return np.outer(r, z) + jac.adjoint(d.T @ r + lam * np.sign(z))


def grad_local_oracle(x, d, lam, tol=1e-10) -> GradientEstimate:
    """Decoder gradient at the exact lasso codes (the alternating-minimisation step)."""
    xb, _ = _batch(x)
    d = np.asarray(d, dtype=float)
    z_hat = solve_lasso(xb, d, lam, tol=tol)
    return GradientEstimate(_decoder_grad(xb, z_hat, d), "oracle-local")


def grad_global_oracle(x, z_star, d) -> GradientEstimate:
    """Decoder gradient at the ground-truth codes."""
    xb, _ = _batch(x)
    zb, _ = _batch(z_star)
    d = np.asarray(d, dtype=float)
    return GradientEstimate(_decoder_grad(xb, zb, d), "oracle-global")
