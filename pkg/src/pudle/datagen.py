"""Synthetic sparse-coding problems ``x = D* z*`` and the structural
quantities (incoherence, closeness) used to describe them.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .metrics import Alignment, align_dictionaries
from .rng import stream


@dataclass(frozen=True)
class AmplitudeLaw:
    """Distribution of the nonzero code entries.

    ``uniform``: magnitude ~ Uniform(low, high) with an independent uniform
    random sign.  ``gaussian``: standard normal values.
    """

    kind: str = "uniform"
    low: float = 1.0
    high: float = 2.0

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown amplitude law {self.kind!r}")
        if self.kind == "uniform" and not 0 <= self.low <= self.high:
            raise ValueError("uniform law needs 0 <= low <= high")

    def to_dict(self):
        return {"law": self.kind, "low": self.low, "high": self.high}


@dataclass
class SyntheticProblem:
    d_star: np.ndarray
    z_star: np.ndarray
    x: np.ndarray
    s: int
    amplitude_law: AmplitudeLaw
    snr_db: Optional[float]
    seed: int

    @property
    def m(self):
        return self.d_star.shape[0]

    @property
    def p(self):
        return self.d_star.shape[1]

    @property
    def n(self):
        return self.x.shape[1]

    @property
    def c_min(self):
        """Smallest nonzero code magnitude in the realised codes."""
        nz = np.abs(self.z_star[self.z_star != 0])
        return float(nz.min()) if nz.size else 0.0

    def subset(self, idx):
        idx = np.asarray(idx)
        return SyntheticProblem(self.d_star, self.z_star[:, idx], self.x[:, idx],
                                self.s, self.amplitude_law, self.snr_db, self.seed)

    def metadata(self):
        return {
            "m": self.m, "p": self.p, "n": self.n, "s": self.s,
            "amplitude": self.amplitude_law.to_dict(),
            "snr_db": self.snr_db, "seed": self.seed,
        }


@dataclass(frozen=True)
class InitSpec:
    tau_b: float
    seed: int = 0

    def __post_init__(self):
        if self.tau_b < 0:
            raise ValueError("tau_b must be nonnegative")


def tau_over_log_m(c, m):
    """Perturbation scale ``c / ln(m)``."""
    return c / np.log(m)


def gen_dictionary(m: int, p: int, seed: int) -> np.ndarray:
    """Gaussian ``m x p`` dictionary with unit-norm columns."""
    if m < 1 or p < 1:
        raise ValueError(f"dimensions must be positive, got m={m}, p={p}")
    d = stream(seed, "dictionary").standard_normal((m, p))
    return d / np.linalg.norm(d, axis=0)


def gen_codes(p: int, n: int, s: int, law: AmplitudeLaw = AmplitudeLaw(), seed: int = 0):
    """``p x n`` codes, each column exactly ``s``-sparse.

    Supports are uniform size-``s`` subsets of ``range(p)``.
    """
    if not 1 <= s <= p:
        raise ValueError(f"sparsity must satisfy 1 <= s <= p, got s={s}, p={p}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = stream(seed, "codes")
    # the s smallest of p iid uniforms index a uniform random subset
    support = np.argsort(rng.random((p, n)), axis=0)[:s]
    if law.kind == "uniform":
        vals = rng.uniform(law.low, law.high, (s, n)) * rng.choice([-1.0, 1.0], (s, n))
    else:
        vals = rng.standard_normal((s, n))
        # a standard normal draw of exactly 0 would break the sparsity count
        vals[vals == 0] = np.finfo(float).tiny
    z = np.zeros((p, n))
    np.put_along_axis(z, support, vals, axis=0)
    return z


def synthesize(d_star, z_star, snr_db=None, seed=0):
    """Observations ``d_star @ z_star``, optionally with Gaussian noise.

    The noise is rescaled so the realised batch SNR,
    ``10 log10(||signal||^2 / ||noise||^2)``, equals ``snr_db``.
    """
    d_star = np.asarray(d_star, dtype=float)
    z_star = np.asarray(z_star, dtype=float)
    if d_star.shape[1] != z_star.shape[0]:
        raise ValueError(f"inner dimensions differ: {d_star.shape} @ {z_star.shape}")
    x = d_star @ z_star
    if snr_db is None:
        return x
    noise = stream(seed, "noise").standard_normal(x.shape)
    sig = np.sum(x * x)
    noise *= np.sqrt(sig / (np.sum(noise * noise) * 10.0 ** (snr_db / 10.0)))
    return x + noise


def measured_snr_db(clean, noisy):
    noise = np.asarray(noisy) - np.asarray(clean)
    return 10.0 * np.log10(np.sum(clean * clean) / np.sum(noise * noise))


def make_problem(m, p, n, s, law=AmplitudeLaw(), snr_db=None, seed=0) -> SyntheticProblem:
    d_star = gen_dictionary(m, p, seed)
    z_star = gen_codes(p, n, s, law, seed)
    x = synthesize(d_star, z_star, snr_db, seed)
    return SyntheticProblem(d_star, z_star, x, s, law, snr_db, seed)


def perturb_dictionary(d_star, init: InitSpec):
    """``d_star + tau_b * B`` with ``B_ij ~ N(0, 1/m)``; no renormalisation."""
    d_star = np.asarray(d_star, dtype=float)
    if d_star.ndim != 2:
        raise ValueError("dictionary must be a matrix")
    if init.tau_b == 0:
        return d_star.copy()
    m = d_star.shape[0]
    b = stream(init.seed, "init").standard_normal(d_star.shape) / np.sqrt(m)
    return d_star + init.tau_b * b


def coherence(d):
    """``mu = sqrt(m) * max_{i != j} |cos(d_i, d_j)|``."""
    d = np.asarray(d, dtype=float)
    if d.shape[1] < 2:
        raise ValueError("coherence needs at least two columns")
    norms = np.linalg.norm(d, axis=0)
    if np.any(norms == 0):
        raise ValueError("coherence needs nonzero columns")
    u = d / norms
    g = np.abs(u.T @ u)
    np.fill_diagonal(g, 0.0)
    return float(np.sqrt(d.shape[0]) * g.max())


def closeness_delta(d, d_star, alignment: Alignment = None):
    """``max_j ||u(j) d_pi(j) - d*_j||_2`` under the given alignment."""
    d = np.asarray(d, dtype=float)
    d_star = np.asarray(d_star, dtype=float)
    if d.shape != d_star.shape:
        raise ValueError(f"shape mismatch: {d.shape} vs {d_star.shape}")
    if alignment is None:
        alignment = align_dictionaries(d, d_star)
    return float(np.linalg.norm(alignment.apply(d) - d_star, axis=0).max())
