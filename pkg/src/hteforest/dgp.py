"""Synthetic data generators for the four benchmark setups A-D.

Each setup fixes a propensity function pi(x), a treatment-effect function
tau(x) and a prognostic function mu(x) with known closed forms, so that
estimators can be scored against the exact ground truth.  Covariates are
uniform on [0, 1]^p for Setup A and standard normal otherwise; treatment is
Bernoulli(pi(x)) and the outcome is

    y = mu(x) + tau(x) * (w - 0.5) + noise_sd * z,   z ~ N(0, 1).

Randomness is split into three independent substreams (covariates,
treatment, noise) derived from a single root seed, so regenerating with the
same spec is bitwise reproducible and paired designs can reuse covariates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

SETUPS = ("A", "B", "C", "D")

# Substream labels used with SeedSequence(seed, spawn_key=(label,)).
COVARIATE_STREAM = 0
TREATMENT_STREAM = 1
NOISE_STREAM = 2

# Setup A propensities are clamped to this range.
PI_CLAMP_LO = 0.1
PI_CLAMP_HI = 0.9


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of one simulated dataset."""

    setup: str
    n: int
    p: int
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ValueError(f"unknown setup {self.setup!r}, expected one of {SETUPS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.p < 5:
            raise ValueError("p must be >= 5 (tau/mu read covariates x1..x5)")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class SimulatedSample:
    """One generated dataset plus the generating ground truth per row."""

    X: np.ndarray
    w: np.ndarray
    y: np.ndarray
    true_pi: np.ndarray
    true_tau: np.ndarray
    true_mu: np.ndarray
    spec: DgpSpec


def _substream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose,)))


def _as_matrix(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def sample_covariates(spec: DgpSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw the n x p covariate matrix for a setup.

    Setup A draws uniform on [0, 1]^p, the other setups standard normal.
    When `rng` is omitted it is derived from spec.seed (COVARIATE_STREAM).
    """
    if rng is None:
        rng = _substream(spec.seed, COVARIATE_STREAM)
    if spec.setup == "A":
        return rng.random((spec.n, spec.p))
    return rng.standard_normal((spec.n, spec.p))


def propensity(setup: str, x) -> np.ndarray | float:
    """Treatment probability pi(x) for one covariate vector or a matrix of rows."""
    if setup not in SETUPS:
        raise ValueError(f"unknown setup {setup!r}")
    X, single = _as_matrix(x)
    if X.shape[1] < 3:
        raise ValueError("covariate vector too short: propensity reads x1..x3")
    x1, x2 = X[:, 0], X[:, 1]
    if setup == "A":
        out = np.clip(np.sin(np.pi * x1 * x2), PI_CLAMP_LO, PI_CLAMP_HI)
    elif setup == "B":
        out = np.full(X.shape[0], 0.5)
    elif setup == "C":
        out = expit(-(X[:, 1] + X[:, 2]))
    else:  # D
        out = 1.0 / (1.0 + np.exp(-x1) + np.exp(-x2))
    return float(out[0]) if single else out


def cate(setup: str, x) -> np.ndarray | float:
    """Treatment-effect function tau(x)."""
    if setup not in SETUPS:
        raise ValueError(f"unknown setup {setup!r}")
    X, single = _as_matrix(x)
    if X.shape[1] < 5:
        raise ValueError("covariate vector too short: tau reads x1..x5")
    x1, x2 = X[:, 0], X[:, 1]
    if setup == "A":
        out = (x1 + x2) / 2.0
    elif setup == "B":
        out = x1 + np.logaddexp(0.0, x2)
    elif setup == "C":
        out = np.ones(X.shape[0])
    else:  # D
        out = np.maximum(x1 + x2 + X[:, 2], 0.0) - np.maximum(X[:, 3] + X[:, 4], 0.0)
    return float(out[0]) if single else out


def prognostic(setup: str, x) -> np.ndarray | float:
    """Prognostic function mu(x) (treatment-independent outcome component)."""
    if setup not in SETUPS:
        raise ValueError(f"unknown setup {setup!r}")
    X, single = _as_matrix(x)
    if X.shape[1] < 5:
        raise ValueError("covariate vector too short: mu reads x1..x5")
    x1, x2, x3, x4, x5 = (X[:, i] for i in range(5))
    if setup == "A":
        out = np.sin(np.pi * x1 * x2) + 2.0 * (x3 - 0.5) ** 2 + x4 + 0.5 * x5
    elif setup == "B":
        out = np.maximum(np.maximum(x1 + x2, x3), 0.0) + np.maximum(x4 + x5, 0.0)
    elif setup == "C":
        out = 2.0 * np.logaddexp(0.0, x1 + x2 + x3)
    else:  # D
        out = (np.maximum(x1 + x2 + x3, 0.0) + np.maximum(x4 + x5, 0.0)) / 2.0
    return float(out[0]) if single else out


def generate(spec: DgpSpec) -> SimulatedSample:
    """Generate a full dataset: covariates, treatment, outcome, ground truth."""
    X = sample_covariates(spec)
    true_pi = np.asarray(propensity(spec.setup, X))
    true_tau = np.asarray(cate(spec.setup, X))
    true_mu = np.asarray(prognostic(spec.setup, X))

    rng_w = _substream(spec.seed, TREATMENT_STREAM)
    w = (rng_w.random(spec.n) < true_pi).astype(np.float64)

    rng_z = _substream(spec.seed, NOISE_STREAM)
    y = true_mu + true_tau * (w - 0.5) + spec.noise_sd * rng_z.standard_normal(spec.n)

    return SimulatedSample(X=X, w=w, y=y, true_pi=true_pi, true_tau=true_tau,
                           true_mu=true_mu, spec=spec)


def write_sample_csv(sample: SimulatedSample, path) -> None:
    """Dump a sample as CSV with header x1..xp,w,y,pi,tau,mu."""
    p = sample.X.shape[1]
    header = [f"x{j + 1}" for j in range(p)] + ["w", "y", "pi", "tau", "mu"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(sample.X.shape[0]):
            row = [repr(float(v)) for v in sample.X[i]]
            row += [repr(float(sample.w[i])), repr(float(sample.y[i])),
                    repr(float(sample.true_pi[i])), repr(float(sample.true_tau[i])),
                    repr(float(sample.true_mu[i]))]
            writer.writerow(row)
