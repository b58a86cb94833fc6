"""Empirical validators for the forward- and backward-pass convergence
results: support recovery and preservation rates, linear-rate fits, and
per-layer gradient and Jacobian error curves."""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .datagen import SyntheticProblem
from .encoder import CodeTrajectory, EncoderConfig, encode, ista_step, solve_lasso
from .grads import (_decoder_grad, backprop_grad, fixed_point_jacobian,
                    iter_explicit_jacobians)
from .metrics import spectral_norm

ERROR_FLOOR = 1e-15
_Z95 = 1.959963984540054


@dataclass(frozen=True)
class RateEstimate:
    """Monte-Carlo success rate with a Wilson 95% interval."""

    rate: float
    lower: float
    upper: float
    successes: int
    trials: int

    def __float__(self):
        return self.rate


def wilson_interval(successes, trials, z=_Z95) -> Tuple[float, float]:
    if trials <= 0:
        return 0.0, 1.0
    phat = successes / trials
    denom = 1.0 + z * z / trials
    centre = (phat + z * z / (2 * trials)) / denom
    half = z * np.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return float(lo), float(hi)


def _rate(flags) -> RateEstimate:
    flags = np.asarray(flags, dtype=bool)
    k, n = int(flags.sum()), flags.size
    lo, hi = wilson_interval(k, n)
    return RateEstimate(k / n if n else float("nan"), lo, hi, k, n)


# --------------------------------------------------------------------------
# support


def one_step_support_recovery_rate(problem: SyntheticProblem, d, lambda0, alpha=1.0) -> RateEstimate:
    """Fraction of samples whose signed support is exact after one ISTA step
    from ``z = 0`` with regulariser ``lambda0`` (threshold ``alpha * lambda0``)."""
    if problem.z_star is None:
        raise ValueError("support recovery needs ground-truth codes")
    z1 = ista_step(np.zeros_like(problem.z_star), d, problem.x, alpha, lambda0, "soft")
    ok = np.all(np.sign(z1) == np.sign(problem.z_star), axis=0)
    return _rate(ok)


@dataclass
class SupportTrace:
    """``flags[t-1, i]``: support of ``z_t`` equals that of ``z*`` for sample ``i``.

    ``first_violation[i]`` is the first layer ``t >= 1`` where the flag is
    false, or -1 when the support holds at every layer.
    """

    flags: np.ndarray
    first_violation: np.ndarray

    @property
    def preserved(self):
        return self.first_violation < 0

    def preserved_rate(self) -> RateEstimate:
        return _rate(self.preserved)


def support_preservation_trace(trajectory: CodeTrajectory, z_star) -> SupportTrace:
    zs = np.asarray(z_star)
    if zs.ndim == 1:
        zs = zs[:, None]
    true = zs != 0
    flags = np.all((trajectory.states[1:] != 0) == true[None], axis=1)
    bad = ~flags
    first = np.where(bad.any(axis=0), bad.argmax(axis=0) + 1, -1)
    return SupportTrace(flags, first)


def support_selection_step(trajectory: CodeTrajectory):
    """Per sample, the smallest ``B`` with ``supp(z_t) == supp(z_T)`` for all ``t >= B``."""
    supp = trajectory.states != 0
    same = np.all(supp == supp[-1][None], axis=1)  # (T+1, n)
    # one past the last layer whose support differs from the final one
    diff = ~same
    T = trajectory.T
    return np.where(diff.any(axis=0), T - np.argmax(diff[::-1], axis=0) + 1, 0)


# --------------------------------------------------------------------------
# rate fits


@dataclass
class RateFit:
    rho_hat: float
    r_squared: float
    window: Tuple[int, int]
    support_selection_step: int
    slope: float = float("nan")
    n_points: int = 0


def _linfit(t, y):
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    tc = t - t.mean()
    yc = y - y.mean()
    stt = tc @ tc
    slope = (tc @ yc) / stt
    resid = yc - slope * tc
    sst = yc @ yc
    r2 = 1.0 if sst == 0 else 1.0 - (resid @ resid) / sst
    return float(slope), float(min(1.0, max(0.0, r2)))


def _window(t, vals, floor):
    """Cut the window at the first value at or below ``floor``: once a curve has
    reached the floor the remaining points are rounding noise."""
    below = np.flatnonzero(vals <= floor)
    stop = below[0] if below.size else len(vals)
    return t[:stop], vals[:stop]


def rate_fit(curve, support_selection_step=0, t_end=None, floor=ERROR_FLOOR) -> RateFit:
    """Least-squares fit of ``log(curve[t])`` against ``t`` on ``[B, t_end]``.

    The window ends early where the curve first reaches ``floor``; at least
    three points must remain.
    """
    curve = np.asarray(curve, dtype=float)
    B = int(support_selection_step)
    end = len(curve) - 1 if t_end is None else int(t_end)
    t, vals = _window(np.arange(B, end + 1), curve[B:end + 1], floor)
    if t.size < 3:
        raise ValueError(f"rate fit window [{B}, {end}] has fewer than 3 points above the floor")
    slope, r2 = _linfit(t, np.log(vals))
    return RateFit(float(np.exp(slope)), r2, (B, int(t[-1])), B, slope, int(t.size))


def precision_floor(scale, factor=1e3):
    """Error level indistinguishable from rounding for quantities of size ``scale``."""
    return max(ERROR_FLOOR, factor * np.finfo(float).eps * float(scale))


def jacobian_decay_fit(curve, start=1, floor=ERROR_FLOOR) -> RateFit:
    """Fit of ``log(err_t / t)`` against ``t`` from ``start``; decay as ``t rho^t``
    shows up as a negative slope with a good linear fit.  The window ends
    where the curve first reaches ``floor``."""
    curve = np.asarray(curve, dtype=float)
    start = max(int(start), 1)
    t, vals = _window(np.arange(start, len(curve)), curve[start:], floor)
    if t.size < 3:
        raise ValueError("Jacobian decay fit needs at least 3 points above the floor")
    slope, r2 = _linfit(t, np.log(vals / t))
    return RateFit(float(np.exp(slope)), r2, (start, int(t[-1])), start, slope, int(t.size))


def first_increase(curve, start=0, rtol=1e-9, floor=ERROR_FLOOR):
    """First ``t > start`` with ``curve[t] > curve[t-1] (1 + rtol)``, ignoring
    values at the floor; ``None`` when the curve is monotone."""
    c = np.asarray(curve, dtype=float)
    for t in range(max(start, 0) + 1, len(c)):
        if c[t] > floor and c[t] > c[t - 1] * (1 + rtol):
            return t
    return None


def tail_log_slope(curve, frac=0.1, floor=ERROR_FLOOR):
    """Slope of ``log10(curve)`` per layer over the last ``frac`` of the curve."""
    c = np.maximum(np.asarray(curve, dtype=float), floor)
    k = max(3, int(np.ceil(frac * len(c))))
    k = min(k, len(c))
    t = np.arange(len(c) - k, len(c))
    slope, _ = _linfit(t, np.log10(c[-k:]))
    return slope


def plateau_check(biased_curve, reference_curve, frac=0.1, ratio=0.1):
    """True when the tail slope magnitude of ``biased_curve`` is below
    ``ratio`` times that of ``reference_curve`` (both on a log scale)."""
    a = abs(tail_log_slope(biased_curve, frac))
    b = abs(tail_log_slope(reference_curve, frac))
    return a < ratio * b, a, b


# --------------------------------------------------------------------------
# curves


@dataclass
class ErrorCurves:
    """Per-layer errors.  Code curves have length ``T + 1`` (t = 0..T); gradient
    curves have length ``T`` (t = 1..T)."""

    code_vs_hat: np.ndarray
    code_vs_star: Optional[np.ndarray]
    grad_vs_hat: Dict[str, np.ndarray] = field(default_factory=dict)
    grad_vs_star: Dict[str, np.ndarray] = field(default_factory=dict)
    jacobian_vs_hat: Optional[np.ndarray] = None

    @property
    def T(self):
        return len(self.code_vs_hat) - 1

    def long_rows(self, experiment, seed):
        """Rows ``(experiment, kind, t, value, seed)`` for long-form CSV export."""
        rows = []
        for t, v in enumerate(self.code_vs_hat):
            rows.append((experiment, "code-vs-hat", t, float(v), seed))
        if self.code_vs_star is not None:
            for t, v in enumerate(self.code_vs_star):
                rows.append((experiment, "code-vs-star", t, float(v), seed))
        if self.jacobian_vs_hat is not None:
            for t, v in enumerate(self.jacobian_vs_hat):
                rows.append((experiment, "jacobian-vs-hat", t, float(v), seed))
        for tag, group in (("vs-hat", self.grad_vs_hat), ("vs-star", self.grad_vs_star)):
            for kind, curve in group.items():
                for t, v in enumerate(curve, start=1):
                    rows.append((experiment, f"{kind}-{tag}", t, float(v), seed))
        return rows


def _mean_col_norm(a):
    return float(np.mean(np.linalg.norm(a, axis=0)))


def code_error_curves(trajectory: CodeTrajectory, z_hat, z_star=None):
    """Per-sample ``||z_t - z_hat||`` (shape ``(T+1, n)``) and the same against ``z*``."""
    zh = np.asarray(z_hat, dtype=float).reshape(trajectory.states.shape[1], -1)
    vs_hat = np.linalg.norm(trajectory.states - zh[None], axis=1)
    vs_star = None
    if z_star is not None:
        zs = np.asarray(z_star, dtype=float).reshape(zh.shape)
        vs_star = np.linalg.norm(trajectory.states - zs[None], axis=1)
    return vs_hat, vs_star


def gradient_error_curves(problem: SyntheticProblem, d, enc_config: EncoderConfig,
                          lam=None, tol=1e-10, kinds=("dec", "ae-lasso", "ae-ls"),
                          jacobian_sample=None) -> ErrorCurves:
    """Errors of each gradient estimator at every depth ``t = 1..T`` against the
    local direction (decoder gradient at the lasso solution) and the global
    direction (decoder gradient at ``z*``).

    Code errors are batch means of per-sample Euclidean norms; gradient
    errors are spectral norms of the batch-averaged gradients.  The
    backward passes are rerun for every truncation, so the cost is
    quadratic in ``T``.  ``jacobian_sample`` adds ``||J_t - J_hat||`` for
    that sample (small instances only).
    """
    d = np.asarray(d, dtype=float)
    x = problem.x
    if lam is None:
        if enc_config.schedule.kind != "fixed":
            raise ValueError("pass lam explicitly for a non-fixed schedule")
        lam = enc_config.schedule.lam
    z_hat = solve_lasso(x, d, lam, tol=tol)
    traj = encode(x, d, enc_config, z_star=problem.z_star, check_step=False)
    vs_hat, vs_star = code_error_curves(traj, z_hat, problem.z_star)

    g_hat = _decoder_grad(x, z_hat, d)
    g_star = _decoder_grad(x, problem.z_star, d) if problem.z_star is not None else None
    T = traj.T
    grad_hat = {k: np.empty(T) for k in kinds}
    grad_star = {k: np.empty(T) for k in kinds} if g_star is not None else {}
    for t in range(1, T + 1):
        sub = traj.truncate(t)
        for k in kinds:
            if k == "dec":
                g = _decoder_grad(x, sub.states[-1], d)
            elif k == "ae-lasso":
                g = backprop_grad(x, sub, d, "lasso", lam=lam).value
            elif k == "ae-ls":
                g = backprop_grad(x, sub, d, "least-squares").value
            else:
                raise ValueError(f"unknown gradient kind {k!r}")
            grad_hat[k][t - 1] = spectral_norm(g - g_hat)
            if g_star is not None:
                grad_star[k][t - 1] = spectral_norm(g - g_star)

    jac = None
    if jacobian_sample is not None:
        jac = jacobian_error_curve(traj, d, x, z_hat[:, jacobian_sample], jacobian_sample)
    return ErrorCurves(vs_hat.mean(axis=1),
                       None if vs_star is None else vs_star.mean(axis=1),
                       grad_hat, grad_star, jac)


def jacobian_error_curve(trajectory: CodeTrajectory, d, x, z_hat, sample=0):
    """``||J_t - J_hat||_2`` for ``t = 0..T`` for one sample, where ``J_hat`` is the
    closed-form Jacobian of the lasso solution ``z_hat``.  Since ``J_0 = 0`` the
    first entry is ``||J_hat||_2``."""
    xb = np.asarray(x, dtype=float)
    xs = xb[:, sample] if xb.ndim == 2 else xb
    j_hat = fixed_point_jacobian(z_hat, d, xs)
    return np.array([(j - j_hat).norm()
                     for j in iter_explicit_jacobians(trajectory, d, x, sample=sample)])


def amplitude_bias(problem: SyntheticProblem, lam, tol=1e-10):
    """Mean over samples of ``||lasso(x, D*, lam) - z*||_2``."""
    if problem.z_star is None:
        raise ValueError("amplitude bias needs ground-truth codes")
    z = solve_lasso(problem.x, problem.d_star, lam, tol=tol)
    return _mean_col_norm(z - problem.z_star)
