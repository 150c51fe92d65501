"""Shared fixtures and independent oracles for the test suite.

The oracles reimplement the split criteria directly from their defining
formulas (explicit loops, numpy pseudo-inverse) so that the fast scan
kernels are checked against an implementation that shares no code with
them.
"""

import numpy as np
import pytest


def mob_criterion_direct(psi, left):
    """Quadratic criterion Z' V Z computed literally from its definition."""
    psi = np.asarray(psi, dtype=np.float64)
    left = np.asarray(left, dtype=bool)
    n = psi.shape[0]
    n_l = int(left.sum())
    vh = np.zeros((psi.shape[1], psi.shape[1]))
    for i in range(n):
        vh += np.outer(psi[i], psi[i])
    vh /= n
    z = psi[left].sum(axis=0) - n_l * psi.mean(axis=0)
    d = n * n_l / (n - 1.0) - n_l ** 2 / (n - 1.0)
    return float(z @ np.linalg.pinv(d * vh) @ z)


def cf_criterion_direct(psi_tau, w_centered, left):
    """Pseudo-outcome CART criterion computed literally from its definition."""
    psi_tau = np.asarray(psi_tau, dtype=np.float64).ravel()
    w_centered = np.asarray(w_centered, dtype=np.float64)
    left = np.asarray(left, dtype=bool)
    n = psi_tau.shape[0]
    a_p = float((w_centered ** 2).mean())
    rho = psi_tau / a_p
    n_l = int(left.sum())
    n_r = n - n_l
    return n_l * n_r / n ** 2 * (rho[left].mean() - rho[~left].mean()) ** 2


def candidate_cuts(x):
    """Midpoints between consecutive distinct values, with the same
    adjacent-float guard as the scan kernels."""
    xs = np.sort(np.asarray(x, dtype=np.float64))
    cuts = []
    for k in range(xs.shape[0] - 1):
        if xs[k] < xs[k + 1]:
            cut = xs[k] + 0.5 * (xs[k + 1] - xs[k])
            if cut >= xs[k + 1]:
                cut = xs[k]
            cuts.append(cut)
    return cuts


def feasible(x, cut, arm, min_per_arm):
    left = x <= cut
    for a in np.unique(arm):
        in_arm = arm == a
        if (left & in_arm).sum() < min_per_arm:
            return False
        if (~left & in_arm).sum() < min_per_arm:
            return False
    return True


def brute_force_best_cut(x, arm, min_per_arm, value_fn):
    """Exhaustive scan of one column; value_fn(left) -> criterion value.

    Ties break toward the smaller cut (first strict maximum in ascending
    order), matching the production tie rule."""
    best = None
    for cut in candidate_cuts(x):
        if not feasible(x, cut, arm, min_per_arm):
            continue
        val = value_fn(x <= cut)
        if best is None or val > best[1]:
            best = (cut, val)
    return best


def brute_force_best_split(X, arm, min_per_arm, value_fn):
    """Exhaustive scan over all (variable, cut) pairs; smaller variable
    index wins ties."""
    best = None
    for j in range(X.shape[1]):
        cand = brute_force_best_cut(X[:, j], arm, min_per_arm,
                                    lambda left: value_fn(left))
        if cand is not None and (best is None or cand[1] > best[2]):
            best = (j, cand[0], cand[1])
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_node(rng, n=None, p=3, q=2):
    """A generic small node: continuous covariates, binary arms, scores at
    a bivariate least-squares fit (so score columns sum to ~0)."""
    n = int(rng.integers(16, 50)) if n is None else n
    X = rng.normal(size=(n, p))
    w = np.zeros(n)
    w[rng.permutation(n)[:n // 2]] = 1.0
    y = rng.normal(size=n) + w * rng.normal() + X[:, 0] * rng.normal()
    wm = w.mean()
    ym = y.mean()
    tau = float(((w - wm) * (y - ym)).sum() / ((w - wm) ** 2).sum())
    mu = ym - tau * wm
    resid = y - mu - tau * w
    psi = np.column_stack([resid, resid * w])[:, :q]
    return X, w, y, psi
