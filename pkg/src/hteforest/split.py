"""Node-level model fits, score matrices, and split selection.

Two split criteria are implemented.  The quadratic criterion measures the
discrepancy of score sums between children, standardized by the node's score
second-moment matrix:

    C_quad = Z' V Z,   Z = sum(psi_left) - n_L * mean(psi),
    V = ((n * n_L / (n-1) - n_L^2 / (n-1)) * Vh)^{-1},
    Vh = (1/n) sum_i psi_i psi_i'.

The pseudo-outcome criterion runs CART on rescaled effect scores:

    C_cf = (n_L * n_R / n^2) * ||mean(rho_left) - mean(rho_right)||^2,
    rho = psi_tau / A_p,   A_p = (1/n) sum_i w_i^2,

which is a quadratic form in mean(psi_left) - mean(psi_right) with the same
argmax.  Split variables for the quadratic criterion are ranked by a
score-association test: the linear statistic T_j = sum_i x_ij * psi_i is
standardized by its permutation mean and covariance and referred to a
chi-square distribution with df = rank of the score covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc

from . import kernels
from ._kernels_py import VAR_TOL, XVAR_TOL, pinv_sym
from .exceptions import DegenerateError, NoVariationError

SCORE_KINDS = ("mob", "cf", "multiarm")
CRITERIA = ("mob", "cf")


@dataclass
class NodeFit:
    """Local model parameters inside one node."""

    mu_hat: float
    tau_hat: float | np.ndarray
    n_node: int
    n_treated: int
    n_control: int


@dataclass
class ScoreMatrix:
    """Per-observation score contributions at a node fit.

    kind "mob" has columns (residual, residual * w); "cf" the single column
    residual * w on centered data; "multiarm" (residual, residual * d_1, ...,
    residual * d_{K-1}) for arm dummies d_k.
    """

    psi: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        self.psi = np.atleast_2d(np.asarray(self.psi, dtype=np.float64))


@dataclass
class SplitDecision:
    """A chosen split: variable, cut and the quantities that selected it."""

    variable: int
    p_value: float
    cut: float
    criterion_value: float
    left: np.ndarray


def _arm_counts(w):
    w = np.asarray(w, dtype=np.float64)
    n_treated = int(np.count_nonzero(w > 0))
    return n_treated, w.shape[0] - n_treated


def fit_node_lm(y, w) -> NodeFit:
    """Least-squares fit of y on (1, w) inside a node.

    w may be the raw binary treatment or a centered version of it; treated
    counts go by sign, which centering by a propensity in (0, 1) preserves.
    Raises NoVariationError when w is (numerically) constant.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = y.shape[0]
    if n < 2:
        raise ValueError("node must contain at least 2 observations")
    w_mean = w.mean()
    var_w = np.mean((w - w_mean) ** 2)
    if var_w <= VAR_TOL:
        raise NoVariationError("treatment regressor is constant within node")
    y_mean = y.mean()
    tau = np.mean((w - w_mean) * (y - y_mean)) / var_w
    mu = y_mean - tau * w_mean
    n_treated, n_control = _arm_counts(w)
    return NodeFit(mu_hat=float(mu), tau_hat=float(tau), n_node=n,
                   n_treated=n_treated, n_control=n_control)


def fit_node_moment(u, v) -> NodeFit:
    """Effect-only fit solving sum_i (u_i - tau * v_i) * v_i = 0.

    u and v are the centered outcome and centered treatment; there is no
    intercept.  Raises DegenerateError when sum v^2 vanishes.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    den = float(v @ v)
    n = u.shape[0]
    if den <= VAR_TOL * n:
        raise DegenerateError("centered treatment has no second moment in node")
    tau = float(u @ v) / den
    n_treated, n_control = _arm_counts(v)
    return NodeFit(mu_hat=0.0, tau_hat=tau, n_node=n,
                   n_treated=n_treated, n_control=n_control)


def fit_node_multiarm(y, arm, n_arms) -> NodeFit:
    """Saturated fit for K treatment arms: mu = mean(y | arm 0), tau_k the
    contrast of arm k against arm 0.  Every arm must be present."""
    y = np.asarray(y, dtype=np.float64)
    arm = np.asarray(arm, dtype=np.int64)
    counts = np.bincount(arm, minlength=n_arms)
    if np.any(counts == 0):
        raise NoVariationError("every treatment arm needs at least one row")
    means = np.bincount(arm, weights=y, minlength=n_arms) / counts
    mu = float(means[0])
    tau = means[1:] - mu
    return NodeFit(mu_hat=mu, tau_hat=tau, n_node=y.shape[0],
                   n_treated=int(y.shape[0] - counts[0]),
                   n_control=int(counts[0]))


def node_scores(y, w, fit: NodeFit, kind: str) -> ScoreMatrix:
    """Score contributions psi_i at the fitted node parameters."""
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if kind == "mob":
        resid = y - fit.mu_hat - fit.tau_hat * w
        psi = np.column_stack([resid, resid * w])
    elif kind == "cf":
        resid = y - fit.tau_hat * w
        psi = (resid * w)[:, None]
    elif kind == "multiarm":
        arm = w.astype(np.int64)
        tau = np.asarray(fit.tau_hat, dtype=np.float64)
        n_arms = tau.shape[0] + 1
        effect = np.concatenate([[0.0], tau])[arm]
        resid = y - fit.mu_hat - effect
        dummies = (arm[:, None] == np.arange(1, n_arms)[None, :]).astype(np.float64)
        psi = np.column_stack([resid, resid[:, None] * dummies])
    else:
        raise ValueError(f"unknown score kind {kind!r}")
    return ScoreMatrix(psi=psi, kind=kind)


def finite_diff_check(y, w, fit: NodeFit, epsilon: float = 1e-6) -> float:
    """Max deviation between central-difference gradients of the node loss
    and the negated score column sums.  Validates that the score matrix is
    the loss gradient (up to sign)."""
    if not 1e-8 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-8, 1e-3]")
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)

    def loss(mu, tau):
        r = y - mu - tau * w
        return 0.5 * float(r @ r)

    mu, tau = fit.mu_hat, fit.tau_hat
    g_mu = (loss(mu + epsilon, tau) - loss(mu - epsilon, tau)) / (2 * epsilon)
    g_tau = (loss(mu, tau + epsilon) - loss(mu, tau - epsilon)) / (2 * epsilon)
    sums = node_scores(y, w, fit, "mob").psi.sum(axis=0)
    return float(max(abs(g_mu - (-sums[0])), abs(g_tau - (-sums[1]))))


def _chi2_sf(stat: float, df: int) -> float:
    if df <= 0:
        return 1.0
    if df == 1:
        return math.erfc(math.sqrt(0.5 * max(stat, 0.0)))
    if df == 2:
        return math.exp(-0.5 * stat)
    return float(gammaincc(0.5 * df, 0.5 * stat))


def select_split_variable(scores: ScoreMatrix, X_node, candidates):
    """Rank candidate covariates by the score-association test.

    Returns (best_index, p_values) where p_values aligns with `candidates`;
    best_index is None when all scores vanish or the score covariance has
    rank zero (nothing to split on).  Ties go to the smallest variable index.
    """
    psi = scores.psi
    X_node = np.asarray(X_node, dtype=np.float64)
    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidates must be nonempty")
    n = psi.shape[0]
    if n < 3:
        raise ValueError("node too small for the association test")
    pvals = np.ones(len(candidates))
    if np.max(np.abs(psi)) == 0.0:
        return None, pvals
    pm = psi.mean(axis=0)
    centered = psi - pm
    vpsi = centered.T @ centered / n
    minv, rank = pinv_sym(vpsi)
    if rank == 0:
        return None, pvals
    for k, j in enumerate(candidates):
        x = X_node[:, j]
        sx = x.sum()
        sxx = float(x @ x)
        cx_ss = sxx - sx * sx / n
        if cx_ss <= XVAR_TOL * max(sxx, 1e-30):
            continue
        cx = (n / (n - 1.0)) * cx_ss
        d = x @ psi - sx * pm
        stat = float(d @ minv @ d) / cx
        pvals[k] = _chi2_sf(stat, rank)
    order = sorted(range(len(candidates)), key=lambda k: (pvals[k], candidates[k]))
    return candidates[order[0]], pvals


def cut_criterion_mob(scores: ScoreMatrix, left) -> float:
    """Quadratic split criterion for a given left/right membership."""
    psi = scores.psi
    left = np.asarray(left, dtype=bool)
    n = psi.shape[0]
    n_l = int(np.count_nonzero(left))
    if not 0 < n_l < n:
        raise ValueError("membership must split the node in two")
    vh = psi.T @ psi / n
    minv, _rank = pinv_sym(vh)
    z = psi[left].sum(axis=0) - n_l * psi.mean(axis=0)
    return float(z @ minv @ z) * ((n - 1.0) / (n_l * (n - n_l)))


def cut_criterion_cf(psi_tau, w_centered, left) -> float:
    """Pseudo-outcome CART criterion for a given membership."""
    psi_tau = np.asarray(psi_tau, dtype=np.float64).ravel()
    w_centered = np.asarray(w_centered, dtype=np.float64)
    left = np.asarray(left, dtype=bool)
    n = psi_tau.shape[0]
    n_l = int(np.count_nonzero(left))
    if not 0 < n_l < n:
        raise ValueError("membership must split the node in two")
    a_p = float(w_centered @ w_centered) / n
    if a_p <= 1e-12:
        raise DegenerateError("A_p vanishes; centered treatment is null")
    n_r = n - n_l
    diff = psi_tau[left].mean() - psi_tau[~left].mean()
    return (n_l * n_r) / (n * float(n)) * diff * diff / (a_p * a_p)


def choose_split(scores: ScoreMatrix, X_node, candidates, criterion: str,
                 min_per_arm: int, w, w_centered=None):
    """One full node-level split decision, or None when the node is done.

    The quadratic criterion first picks the variable by the association
    test and then searches that variable for a cut; the pseudo-outcome
    criterion scans every candidate and keeps the best (variable, cut).
    """
    X_node = np.asarray(X_node, dtype=np.float64)
    candidates = list(candidates)
    if criterion == "mob":
        idx, pvals = select_split_variable(scores, X_node, candidates)
        if idx is None:
            return None
        got = best_cut(scores, X_node[:, idx], "mob", min_per_arm, w)
        if got is None:
            return None
        return SplitDecision(variable=idx,
                             p_value=float(pvals[candidates.index(idx)]),
                             cut=got[0], criterion_value=got[1], left=got[2])
    best = None
    for j in candidates:
        got = best_cut(scores, X_node[:, j], "cf", min_per_arm, w, w_centered)
        if got is not None and (best is None or got[1] > best.criterion_value):
            best = SplitDecision(variable=j, p_value=float("nan"), cut=got[0],
                                 criterion_value=got[1], left=got[2])
    return best


def best_cut(scores: ScoreMatrix, xj, criterion: str, min_per_arm: int, w,
             w_centered=None):
    """Best feasible cut of one covariate column.

    Scans every midpoint between consecutive distinct values of xj, discards
    cuts leaving fewer than min_per_arm rows of any treatment arm in either
    child, and returns (cut, criterion_value, left_membership) or None.  Arm
    membership uses the original (binary or multi-arm label) w; for the cf
    criterion the A_p scale uses w_centered when supplied, else w.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    xj = np.asarray(xj, dtype=np.float64)
    arm = np.asarray(w, dtype=np.int64)
    n_arms = int(arm.max()) + 1 if arm.size else 1
    psi = scores.psi
    if criterion == "mob":
        vh = psi.T @ psi / psi.shape[0]
        minv, _rank = pinv_sym(vh)
        found, cut, value = kernels.best_cut_scan_mob(
            np.ascontiguousarray(xj), np.ascontiguousarray(psi), arm,
            n_arms, minv, min_per_arm)
    else:
        if scores.psi.shape[1] != 1:
            raise ValueError("cf criterion needs one-column effect scores")
        wc = np.asarray(w if w_centered is None else w_centered,
                        dtype=np.float64)
        a_p = float(wc @ wc) / psi.shape[0]
        if a_p <= 1e-12:
            raise DegenerateError("A_p vanishes; centered treatment is null")
        found, cut, value = kernels.best_cut_scan_cf(
            np.ascontiguousarray(xj), np.ascontiguousarray(psi[:, 0]), arm,
            n_arms, a_p, min_per_arm)
    if not found:
        return None
    return cut, value, xj <= cut
