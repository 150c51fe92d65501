"""Regression forests for nuisance estimation and local centering.

A plain variance-reduction CART ensemble estimates the marginal outcome mean
m(x) = E(Y | X = x) and the propensity pi(x) = E(W | X = x).  Training rows
receive out-of-bag predictions (averaged over the trees whose subsample
excludes the row) so that centering a row never leaks its own outcome.
Estimated propensities are clipped to [0.01, 0.99]; a known randomization
probability bypasses estimation entirely.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

PI_CLIP_LO = 0.01
PI_CLIP_HI = 0.99

# Substream labels for deriving the two nuisance-forest seeds from one seed.
M_FOREST_STREAM = 10
PI_FOREST_STREAM = 11

CENTER_OUTCOME = {"cf", "mobwy", "mobcf"}
CENTER_TREATMENT = {"cf", "mobw", "mobwy", "mobcf"}


@dataclass
class RegressionForestConfig:
    n_trees: int = 500
    min_node: int = 5
    mtry: int | None = None          # default ceil(sqrt(p)) at fit time
    subsample_fraction: float = 0.5
    honest: bool = False

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_node < 1:
            raise ValueError("min_node must be >= 1")
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must be in (0, 1]")


@dataclass
class NuisanceEstimates:
    """Per-training-row centering estimates.

    pi_mode is "estimated", "known" (constant randomization probability) or
    "none" (variant does not center the treatment; pi_hat is all zeros).
    """

    m_hat: np.ndarray
    pi_hat: np.ndarray
    pi_mode: str
    m_oob_fallback: np.ndarray | None = None
    pi_oob_fallback: np.ndarray | None = None


@dataclass
class _RegTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray


@dataclass
class RegressionForest:
    config: RegressionForestConfig
    seed: int
    n: int
    p: int
    X_train: np.ndarray | None = None
    trees: list = field(default_factory=list)
    in_subsample: np.ndarray | None = None   # (n_trees, n) bool

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        acc = np.zeros(X.shape[0])
        for tree in self.trees:
            leaf = kernels.route_points(X, tree.feature, tree.threshold,
                                        tree.left, tree.right)
            acc += tree.value[leaf]
        return acc / len(self.trees)

    def oob_predictions(self) -> tuple[np.ndarray, np.ndarray]:
        """Out-of-bag prediction per training row plus a fallback flag.

        Rows contained in every tree's subsample get the full-forest
        prediction and a True flag.
        """
        X = self.X_train
        n = X.shape[0]
        acc = np.zeros(n)
        cnt = np.zeros(n)
        for t, tree in enumerate(self.trees):
            leaf = kernels.route_points(X, tree.feature, tree.threshold,
                                        tree.left, tree.right)
            oob = ~self.in_subsample[t]
            acc[oob] += tree.value[leaf[oob]]
            cnt[oob] += 1.0
        fallback = cnt == 0
        out = np.empty(n)
        covered = ~fallback
        out[covered] = acc[covered] / cnt[covered]
        if np.any(fallback):
            out[fallback] = self.predict(X[fallback])
        return out, fallback

    def oob_tree_counts(self) -> np.ndarray:
        return (~self.in_subsample).sum(axis=0)


def _candidate_pool(rng, p, mtry, max_nodes):
    if mtry >= p:
        return np.tile(np.arange(p, dtype=np.int64), (max_nodes, 1))
    pool = np.empty((max_nodes, mtry), dtype=np.int64)
    for k in range(max_nodes):
        pool[k] = np.sort(rng.choice(p, size=mtry, replace=False))
    return pool


def _is_reachable(feature, left, right, target):
    node = 0
    stack = [0]
    while stack:
        node = stack.pop()
        if node == target:
            return True
        if feature[node] >= 0:
            stack.append(left[node])
            stack.append(right[node])
    return False


def _honest_leaf_values(tree: _RegTree, X, y, est_rows):
    """Replace leaf values by estimation-half means, collapsing any subtree
    whose leaf receives no estimation rows up to the nearest fed ancestor."""
    X_est = np.ascontiguousarray(X[est_rows], dtype=np.float64)
    y_est = y[est_rows]
    n_nodes = tree.feature.shape[0]
    while True:
        leaf = kernels.route_points(X_est, tree.feature, tree.threshold,
                                    tree.left, tree.right)
        counts = np.bincount(leaf, minlength=n_nodes)
        parent = np.full(n_nodes, -1, dtype=np.int64)
        for k in range(n_nodes):
            if tree.feature[k] >= 0:
                parent[tree.left[k]] = k
                parent[tree.right[k]] = k
        bad = [k for k in range(n_nodes)
               if tree.feature[k] < 0 and counts[k] == 0 and parent[k] >= 0
               and _is_reachable(tree.feature, tree.left, tree.right, k)]
        if not bad:
            sums = np.bincount(leaf, weights=y_est, minlength=n_nodes)
            nz = counts > 0
            tree.value[nz] = sums[nz] / counts[nz]
            return
        for k in bad:
            tree.feature[parent[k]] = -1


def fit_regression_forest(X, target, cfg: RegressionForestConfig,
                          seed: int) -> RegressionForest:
    """Fit an ensemble of variance-reduction CART trees.

    Each tree grows on a without-replacement subsample of
    ceil(subsample_fraction * n) rows; per-tree randomness comes from
    SeedSequence(seed, spawn_key=(tree_index,)), so results are reproducible
    and independent of evaluation order.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    target = np.ascontiguousarray(target, dtype=np.float64)
    n, p = X.shape
    if n < 2 * cfg.min_node:
        raise ValueError("need at least 2 * min_node rows")
    mtry = cfg.mtry if cfg.mtry is not None else math.ceil(math.sqrt(p))
    if not 1 <= mtry <= p:
        raise ValueError("mtry must be in [1, p]")
    s = math.ceil(cfg.subsample_fraction * n)
    forest = RegressionForest(config=cfg, seed=seed, n=n, p=p, X_train=X)
    forest.in_subsample = np.zeros((cfg.n_trees, n), dtype=bool)
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))
        chosen = rng.choice(n, size=s, replace=False)
        forest.in_subsample[t, chosen] = True
        if cfg.honest and s >= 2:
            half = s // 2
            build = np.sort(chosen[:half])
            est = np.sort(chosen[half:])
        else:
            build = np.sort(chosen)
            est = build
        grow_rows = build
        max_nodes = max(3, 2 * (grow_rows.shape[0] // cfg.min_node) + 3)
        cand = _candidate_pool(rng, p, mtry, max_nodes)
        Xs = np.ascontiguousarray(X[grow_rows])
        ys = np.ascontiguousarray(target[grow_rows])
        feature, threshold, left, right, value, _n_nodes = kernels.grow_reg_tree(
            Xs, ys, cfg.min_node, cand, max_nodes, kernels.MAX_DEPTH_SENTINEL)
        tree = _RegTree(feature=feature.copy(), threshold=threshold.copy(),
                        left=left.copy(), right=right.copy(), value=value.copy())
        if cfg.honest:
            _honest_leaf_values(tree, X, target, est)
        forest.trees.append(tree)
    return forest


def oob_predict(forest: RegressionForest, row_index: int) -> tuple[float, bool]:
    """Out-of-bag prediction for one training row; the flag marks the
    full-forest fallback used when every tree contains the row."""
    if not 0 <= row_index < forest.n:
        raise IndexError("row_index out of range")
    xrow = forest.X_train[row_index:row_index + 1]
    acc = 0.0
    cnt = 0
    for t, tree in enumerate(forest.trees):
        if forest.in_subsample[t, row_index]:
            continue
        leaf = kernels.route_points(xrow, tree.feature, tree.threshold,
                                    tree.left, tree.right)
        acc += float(tree.value[leaf[0]])
        cnt += 1
    if cnt == 0:
        return float(forest.predict(xrow)[0]), True
    return acc / cnt, False


def estimate_m_hat(X, y, cfg: RegressionForestConfig, seed: int):
    """Out-of-bag estimate of the marginal outcome mean per training row."""
    forest = fit_regression_forest(X, y, cfg, seed)
    return forest.oob_predictions()


def estimate_pi_hat(X, w, cfg: RegressionForestConfig, seed: int):
    """Out-of-bag propensity estimate per training row, clipped to
    [0.01, 0.99] to keep it bounded away from 0 and 1."""
    forest = fit_regression_forest(X, w, cfg, seed)
    raw, fallback = forest.oob_predictions()
    return np.clip(raw, PI_CLIP_LO, PI_CLIP_HI), fallback


def compute_centering(sample, variant: str, pi_known: float | None = None,
                      cfg: RegressionForestConfig | None = None,
                      seed: int = 0) -> NuisanceEstimates:
    """Assemble the centering estimates a forest variant needs.

    Treatment-centering variants get pi_hat from the known randomization
    probability when provided, else from an out-of-bag regression forest of w
    on X (clipped to [0.01, 0.99]).  Outcome-centering variants get m_hat
    from an out-of-bag forest of y on X.  The plain "mob" variant centers
    nothing; both vectors stay zero so y - m_hat = y and w - pi_hat = w.
    """
    if variant not in ("cf", "mob", "mobw", "mobwy", "mobcf"):
        raise ValueError(f"unknown variant {variant!r}")
    if pi_known is not None and not 0.0 < pi_known < 1.0:
        raise ValueError("pi_known must lie strictly inside (0, 1)")
    cfg = cfg if cfg is not None else RegressionForestConfig()
    n = sample.y.shape[0]
    m_hat = np.zeros(n)
    pi_hat = np.zeros(n)
    pi_mode = "none"
    m_fallback = None
    pi_fallback = None
    if variant in CENTER_OUTCOME:
        m_hat, m_fallback = estimate_m_hat(
            sample.X, sample.y, cfg, _derive_seed(seed, M_FOREST_STREAM))
    if variant in CENTER_TREATMENT:
        if pi_known is not None:
            pi_hat = np.full(n, float(pi_known))
            pi_mode = "known"
        else:
            pi_hat, pi_fallback = estimate_pi_hat(
                sample.X, sample.w, cfg, _derive_seed(seed, PI_FOREST_STREAM))
            pi_mode = "estimated"
    return NuisanceEstimates(m_hat=m_hat, pi_hat=pi_hat, pi_mode=pi_mode,
                             m_oob_fallback=m_fallback,
                             pi_oob_fallback=pi_fallback)


def _derive_seed(seed: int, purpose: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(purpose,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def write_nuisance_csv(est: NuisanceEstimates, true_pi, path) -> None:
    """Diagnostic dump with header row,m_hat,pi_hat,true_pi."""
    true_pi = np.asarray(true_pi, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "m_hat", "pi_hat", "true_pi"])
        for i in range(est.m_hat.shape[0]):
            writer.writerow([i, repr(float(est.m_hat[i])), repr(float(est.pi_hat[i])),
                             repr(float(true_pi[i]))])
