"""Dictionary learning loops: unrolled (PUDLE) and classical alternating
minimisation, with optimisers and column-norm projections."""

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .datagen import SyntheticProblem
from .encoder import EncoderConfig, encode, solve_lasso
from .grads import _decoder_grad, backprop_grad
from .metrics import relative_error, spectral_norm
from .rng import stream

TRAIN_GRAD_KINDS = ("dec", "ae-lasso", "ae-ls", "ae-ls-ht", "altmin")
NORMALIZATIONS = ("project-unit-ball", "renormalize-unit", "at-end-only")


@dataclass(frozen=True)
class Optimizer:
    kind: str = "gd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    grad_kind: str = "ae-ls"
    eta: float = 1e-3
    epochs: int = 1
    batch_size: int = 0  # 0 means full batch
    optimizer: Optimizer = Optimizer()
    normalization: str = "project-unit-ball"
    decay_nu_step: Optional[Tuple[float, int]] = None  # (amount, every k updates)
    ridge: float = 0.0  # adds ridge * D to every gradient
    seed: int = 0
    track_ground_truth: bool = True

    def __post_init__(self):
        if self.grad_kind not in TRAIN_GRAD_KINDS:
            raise ValueError(f"unknown grad kind {self.grad_kind!r}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class UpdateRecord:
    update: int
    epoch: int
    rel_error: float
    grad_norm: float
    precision: float
    recall: float
    nu: float
    lam_last: float
    zero_columns: int
    wall_time: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    initial_rel_error: float = float("nan")
    _d_star_norm: Optional[float] = field(default=None, repr=False)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    @property
    def final_rel_error(self):
        return self.records[-1].rel_error if self.records else self.initial_rel_error

    def to_csv(self, path, include_time=False):
        names = [f for f in UpdateRecord.__dataclass_fields__ if include_time or f != "wall_time"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            w.writerow([0, 0, repr(self.initial_rel_error)] + [""] * (len(names) - 3))
            for r in self.records:
                row = asdict(r)
                w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in names])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(state: AdamState, grad, eta, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam.  Returns ``(delta, new_state)``; the update is ``D + delta``."""
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return -eta * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def project_columns(d, policy="project-unit-ball"):
    """Column-norm feasibility step.  Returns ``(d_new, n_zero_columns)``.

    ``project-unit-ball`` shrinks columns with norm above one,
    ``renormalize-unit`` rescales every nonzero column to norm one (zero
    columns are left as they are and counted), ``at-end-only`` is the
    identity.
    """
    d = np.asarray(d, dtype=float)
    norms = np.linalg.norm(d, axis=0)
    zero = int(np.count_nonzero(norms == 0))
    if policy == "at-end-only":
        return d.copy(), zero
    if policy == "project-unit-ball":
        return d / np.maximum(norms, 1.0), zero
    if policy == "renormalize-unit":
        return d / np.where(norms == 0, 1.0, norms), zero
    raise ValueError(f"unknown normalization {policy!r}")


def _batches(n, batch_size, rng):
    if batch_size == 0 or batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class _Stepper:
    def __init__(self, cfg: TrainConfig, shape):
        self.cfg = cfg
        self.state = AdamState.zeros(shape) if cfg.optimizer.kind == "adam" else None

    def __call__(self, d, g):
        cfg = self.cfg
        if self.state is None:
            d = d - cfg.eta * g
        else:
            o = cfg.optimizer
            delta, self.state = adam_step(self.state, g, cfg.eta, o.beta1, o.beta2, o.eps)
            d = d + delta
        return project_columns(d, cfg.normalization)


def _record(history, problem, d, z, g, update, epoch, nu, lam_last, zero_cols, t0, track):
    if track and problem.d_star is not None:
        err = relative_error(d, problem.d_star, d_star_norm=history._d_star_norm)
    else:
        err = float("nan")
    prec = rec = float("nan")
    if track and z is not None and problem.z_star is not None:
        zs, zt = z[1], z[0]
        nzp = np.count_nonzero(zt, axis=0)
        hits = np.count_nonzero((zt != 0) & (zs != 0), axis=0)
        prec = float(np.mean(np.where(nzp > 0, hits / np.maximum(nzp, 1), 1.0)))
        nzt = np.count_nonzero(zs, axis=0)
        rec = float(np.mean(np.where(nzt > 0, hits / np.maximum(nzt, 1), 1.0)))
    history.records.append(UpdateRecord(update, epoch, err, float(np.linalg.norm(g)), prec, rec,
                                        nu, lam_last, zero_cols, time.perf_counter() - t0))


def train_pudle(problem: SyntheticProblem, d_init, enc_config: EncoderConfig,
                train_config: TrainConfig):
    """Unrolled dictionary learning.

    Each update encodes the mini-batch with ``enc_config``, forms the
    gradient named by ``train_config.grad_kind``, takes an optimiser step
    and applies the column normalisation.  With ``decay_nu_step=(a, k)``
    the geometric schedule's ``nu`` drops by ``a`` every ``k`` updates.
    """
    cfg = train_config
    if cfg.grad_kind == "altmin":
        lam = enc_config.schedule.lam
        return train_altmin(problem, d_init, lam, 1e-10, cfg)
    enc = enc_config
    if cfg.grad_kind == "ae-ls-ht":
        enc = replace(enc, prox="hard")
    elif enc.prox != "soft":
        raise ValueError(f"grad kind {cfg.grad_kind} needs the soft prox")
    d = np.asarray(d_init, dtype=float).copy()
    if cfg.decay_nu_step is not None and enc.schedule.kind != "geometric":
        raise ValueError("decay_nu_step needs a geometric schedule")

    shuffle = stream(cfg.seed, "shuffle")
    history = TrainHistory()
    track = cfg.track_ground_truth and problem.d_star is not None
    if track:
        history._d_star_norm = spectral_norm(problem.d_star)
        history.initial_rel_error = relative_error(d, problem.d_star)
    d, _ = project_columns(d, cfg.normalization)
    step = _Stepper(cfg, d.shape)
    nu = enc.schedule.nu
    update = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        for idx in _batches(problem.n, cfg.batch_size, shuffle):
            if cfg.decay_nu_step is not None and update > 0 and update % cfg.decay_nu_step[1] == 0:
                nu = max(nu - cfg.decay_nu_step[0], cfg.decay_nu_step[0])
                enc = replace(enc, schedule=replace(enc.schedule, nu=nu))
            x = problem.x[:, idx]
            z_star = problem.z_star[:, idx] if problem.z_star is not None else None
            traj = encode(x, d, enc, z_star=z_star, check_step=False, diagnostics=False)
            if cfg.grad_kind == "dec":
                g = _decoder_grad(x, traj.states[-1], d)
            else:
                loss = "lasso" if cfg.grad_kind == "ae-lasso" else "least-squares"
                g = backprop_grad(x, traj, d, loss).value
            if cfg.ridge:
                g = g + cfg.ridge * d
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at update {update}")
            d, zero_cols = step(d, g)
            lam_last = float(traj.lambdas[-1].mean()) if traj.T else float("nan")
            zpair = (traj.states[-1], z_star) if z_star is not None else None
            _record(history, problem, d, zpair, g, update, epoch, nu, lam_last, zero_cols, t0, track)
            update += 1
    if cfg.normalization == "at-end-only":
        d, _ = project_columns(d, "project-unit-ball")
    return d, history


def train_altmin(problem: SyntheticProblem, d_init, lam, tol, train_config: TrainConfig):
    """Classical alternating minimisation: exact lasso codes, then a decoder step."""
    cfg = train_config
    d = np.asarray(d_init, dtype=float).copy()
    shuffle = stream(cfg.seed, "shuffle")
    history = TrainHistory()
    track = cfg.track_ground_truth and problem.d_star is not None
    if track:
        history._d_star_norm = spectral_norm(problem.d_star)
        history.initial_rel_error = relative_error(d, problem.d_star)
    d, _ = project_columns(d, cfg.normalization)
    step = _Stepper(cfg, d.shape)
    update = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        for idx in _batches(problem.n, cfg.batch_size, shuffle):
            x = problem.x[:, idx]
            z = solve_lasso(x, d, lam, tol=tol)
            g = _decoder_grad(x, z, d)
            if cfg.ridge:
                g = g + cfg.ridge * d
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at update {update}")
            d, zero_cols = step(d, g)
            zpair = (z, problem.z_star[:, idx]) if problem.z_star is not None else None
            _record(history, problem, d, zpair, g, update, epoch, 1.0, lam, zero_cols, t0, track)
            update += 1
    if cfg.normalization == "at-end-only":
        d, _ = project_columns(d, "project-unit-ball")
    return d, history
