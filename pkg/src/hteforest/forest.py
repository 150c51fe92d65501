"""Treatment-effect forests: five variants, honesty, weights, prediction.

Variants differ in which inputs are centered and how nodes are split:

  mob     raw outcome, raw treatment, bivariate local model, quadratic
          criterion with score-association variable test;
  mobw    treatment centered by pi_hat, otherwise like mob;
  mobwy   outcome and treatment centered, otherwise like mob;
  mobcf   outcome and treatment centered, effect-only local model, one-column
          scores through the same test and criterion;
  cf      outcome and treatment centered, effect-only local model, all
          candidate variables scanned directly by the pseudo-outcome
          criterion (no pre-test).

Every tree grows on a without-replacement subsample (honest trees split it
in half: one half places splits, the other populates leaves).  Predictions
aggregate per-leaf estimation-row means across trees, which is exactly the
nearest-neighbor-weighted re-estimation of the local model at the query
point.

Inside nodes the working treatment is centered against the node's first row
before any arithmetic, so centering by a known constant (e.g. pi = 0.5 under
randomization) leaves fits, scores, trees and predictions bitwise unchanged
relative to the uncentered run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dgp import SimulatedSample
from .exceptions import DegenerateError, EmptyNeighborhoodError
from .nuisance import NuisanceEstimates, RegressionForestConfig, compute_centering

VARIANTS = ("cf", "mob", "mobw", "mobwy", "mobcf")
INTERCEPT_VARIANTS = ("mob", "mobw", "mobwy")

SERIALIZATION_VERSION = 1


WEIGHTINGS = ("leaf-share", "count")


@dataclass
class HteForestConfig:
    variant: str
    n_trees: int = 500
    min_per_arm: int = 7
    mtry: int | None = None          # default: all variables
    subsample_fraction: float = 0.5
    honest: bool = False
    max_depth: int | None = None
    seed: int = 0
    # "leaf-share": each tree spreads mass 1/|leaf| (grf convention);
    # "count": raw leaf co-occurrence counts, normalized at the end
    weighting: str = "leaf-share"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_per_arm < 1:
            raise ValueError("min_per_arm must be >= 1")
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must be in (0, 1]")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass
class FittedTree:
    """One grown tree: split structure plus leaf estimation contents."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    build_rows: np.ndarray
    estimation_rows: np.ndarray
    est_members: np.ndarray      # estimation rows grouped by leaf
    est_lo: np.ndarray           # per-node slice bounds into est_members
    est_hi: np.ndarray
    est_count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def leaf_of(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return kernels.route_points(X, self.feature, self.threshold,
                                    self.left, self.right)


@dataclass
class ForestWeights:
    """Nearest-neighbor weights over training rows for one query point."""

    alpha: np.ndarray


@dataclass
class HteForest:
    config: HteForestConfig
    nuisance: NuisanceEstimates
    n: int
    p: int
    y: np.ndarray
    w: np.ndarray
    trees: list = field(default_factory=list)
    # per-row working data and global anchors (see module docstring)
    _u: np.ndarray | None = None
    _v: np.ndarray | None = None
    _tables: list = field(default_factory=list)

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def has_intercept(self) -> bool:
        return self.variant in INTERCEPT_VARIANTS


def variant_flags(variant: str) -> tuple[bool, bool]:
    """(intercept, use_test) kernel wiring for a variant."""
    return variant in INTERCEPT_VARIANTS, variant != "cf"


def working_data(y, w, nuisance: NuisanceEstimates) -> tuple[np.ndarray, np.ndarray]:
    """Centered outcome u = y - m_hat and centered treatment v = w - pi_hat.

    Variants that do not center carry all-zero nuisance vectors, so the
    subtraction is exact and u, v coincide bitwise with y, w.
    """
    return y - nuisance.m_hat, w - nuisance.pi_hat


def draw_partition(n: int, cfg: HteForestConfig, rng: np.random.Generator):
    """Draw one tree's subsample and its build/estimation halves.

    Adaptive trees use the whole subsample for both roles; honest trees cut
    it in half (sizes differ by at most one row).  Row sets are returned in
    ascending order.
    """
    s = math.ceil(cfg.subsample_fraction * n)
    chosen = rng.choice(n, size=s, replace=False)
    if cfg.honest and s >= 2:
        half = s // 2
        build = np.sort(chosen[:half])
        est = np.sort(chosen[half:])
    else:
        build = np.sort(chosen)
        est = build
    return np.sort(chosen), build, est


def _candidate_pool(rng, p, mtry, max_nodes):
    if mtry >= p:
        return np.tile(np.arange(p, dtype=np.int64), (max_nodes, 1))
    pool = np.empty((max_nodes, mtry), dtype=np.int64)
    for k in range(max_nodes):
        pool[k] = np.sort(rng.choice(p, size=mtry, replace=False))
    return pool


def _group_by_leaf(leaf_ids, rows_global, n_nodes):
    order = np.argsort(leaf_ids, kind="stable")
    members = rows_global[order]
    counts = np.bincount(leaf_ids, minlength=n_nodes)
    hi = np.cumsum(counts)
    lo = hi - counts
    return members, lo, hi, counts


def grow_tree(sample: SimulatedSample, nuisance: NuisanceEstimates,
              cfg: HteForestConfig, tree_seed: int) -> FittedTree:
    """Grow a single tree with its own random stream (subsample included)."""
    rng = np.random.default_rng(np.random.SeedSequence(tree_seed))
    u, v = working_data(sample.y, sample.w, nuisance)
    arm = sample.w.astype(np.int64)
    X = np.ascontiguousarray(sample.X, dtype=np.float64)
    return _grow_one(X, u, v, arm, cfg, rng)


def _grow_one(X, u, v, arm, cfg: HteForestConfig,
              rng: np.random.Generator) -> FittedTree:
    n, p = X.shape
    mtry = cfg.mtry if cfg.mtry is not None else p
    if not 1 <= mtry <= p:
        raise ValueError("mtry must be in [1, p]")
    _subsample, build, est = draw_partition(n, cfg, rng)
    m = build.shape[0]
    max_nodes = max(3, 2 * (m // (2 * cfg.min_per_arm)) + 3)
    cand = _candidate_pool(rng, p, mtry, max_nodes)
    max_depth = (cfg.max_depth if cfg.max_depth is not None
                 else kernels.MAX_DEPTH_SENTINEL)
    intercept, use_test = variant_flags(cfg.variant)
    Xb = np.ascontiguousarray(X[build])
    feature, threshold, left, right, _n_nodes, _seg_lo, _seg_hi, _rows = (
        kernels.grow_hte_tree(Xb, np.ascontiguousarray(u[build]),
                              np.ascontiguousarray(v[build]),
                              np.ascontiguousarray(arm[build]),
                              intercept, use_test, cfg.min_per_arm,
                              max_depth, cand, max_nodes))
    feature = feature.copy()
    threshold = threshold.copy()
    left = left.copy()
    right = right.copy()
    n_nodes = feature.shape[0]
    # populate leaves with estimation rows; repair infeasible honest leaves
    # (a leaf must hold at least one estimation row of each arm, else its
    # parent collapses into a leaf, cascading toward the root)
    X_est = np.ascontiguousarray(X[est])
    arm_est = arm[est]
    while True:
        leaf_ids = kernels.route_points(X_est, feature, threshold, left, right)
        treated = np.bincount(leaf_ids[arm_est == 1], minlength=n_nodes)
        control = np.bincount(leaf_ids[arm_est == 0], minlength=n_nodes)
        is_leaf = feature < 0
        reachable = _reachable_mask(feature, left, right)
        bad = np.nonzero(is_leaf & reachable
                         & ((treated == 0) | (control == 0)))[0]
        bad = bad[bad != 0]
        if bad.size == 0:
            break
        parent = _parent_array(feature, left, right)
        feature[parent[bad]] = -1
    members, lo, hi, counts = _group_by_leaf(leaf_ids, est, n_nodes)
    return FittedTree(feature=feature, threshold=threshold, left=left,
                      right=right, build_rows=build, estimation_rows=est,
                      est_members=members, est_lo=lo, est_hi=hi,
                      est_count=counts)


def _parent_array(feature, left, right):
    n_nodes = feature.shape[0]
    parent = np.full(n_nodes, -1, dtype=np.int64)
    internal = np.nonzero(feature >= 0)[0]
    parent[left[internal]] = internal
    parent[right[internal]] = internal
    return parent


def _reachable_mask(feature, left, right):
    n_nodes = feature.shape[0]
    mask = np.zeros(n_nodes, dtype=bool)
    stack = [0]
    while stack:
        k = stack.pop()
        mask[k] = True
        if feature[k] >= 0:
            stack.append(int(left[k]))
            stack.append(int(right[k]))
    return mask


def _leaf_tables(tree: FittedTree, quantities) -> np.ndarray:
    """Per-node means of each quantity over the leaf's estimation rows."""
    n_nodes = tree.n_nodes
    table = np.zeros((n_nodes, len(quantities)))
    members = tree.est_members
    if members.size == 0:
        return table
    leaf_rep = np.repeat(np.arange(n_nodes), tree.est_hi - tree.est_lo)
    nz = tree.est_count > 0
    for i, q in enumerate(quantities):
        sums = np.bincount(leaf_rep, weights=q[members], minlength=n_nodes)
        table[nz, i] = sums[nz] / tree.est_count[nz]
    return table


def fit_hte_forest(sample: SimulatedSample, cfg: HteForestConfig,
                   pi_known: float | None = None,
                   nuisance: NuisanceEstimates | None = None,
                   nuisance_cfg: RegressionForestConfig | None = None) -> HteForest:
    """Fit a forest for one variant.

    Nuisance estimates are computed once per call (seeded from cfg.seed)
    unless precomputed ones are supplied, which lets paired comparisons share
    m_hat / pi_hat across variants.  Per-tree randomness comes from
    SeedSequence(cfg.seed, spawn_key=(tree_index,)); trees are therefore
    independent of fitting order and thread count.
    """
    n, p = sample.X.shape
    if n < 4 * cfg.min_per_arm:
        raise ValueError("need at least 4 * min_per_arm rows")
    if nuisance is None:
        nuisance = compute_centering(sample, cfg.variant, pi_known=pi_known,
                                     cfg=nuisance_cfg, seed=cfg.seed)
    u, v = working_data(sample.y, sample.w, nuisance)
    arm = sample.w.astype(np.int64)
    X = np.ascontiguousarray(sample.X, dtype=np.float64)
    forest = HteForest(config=cfg, nuisance=nuisance, n=n, p=p,
                       y=sample.y, w=sample.w)
    forest._u = u
    forest._v = v
    quantities = _table_quantities(forest.has_intercept, u, v)
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(t,)))
        tree = _grow_one(X, u, v, arm, cfg, rng)
        forest.trees.append(tree)
        forest._tables.append(_leaf_tables(tree, quantities))
    return forest


def _table_quantities(intercept: bool, u, v):
    if intercept:
        tv = v - v[0]
        tu = u - u[0]
        return [tv, tu, tv * tv, tv * tu]
    return [u * v, v * v]


def forest_weights(forest: HteForest, x) -> ForestWeights:
    """Nearest-neighbor weights alpha_i(x) over training rows.

    Under "leaf-share" weighting each tree spreads mass 1/|leaf| over the
    estimation rows sharing the query's leaf and masses are averaged over
    the trees whose leaf is nonempty; under "count" weighting rows
    accumulate raw co-occurrence counts.  Both sum to one.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    alpha = np.zeros(forest.n)
    count_mode = forest.config.weighting == "count"
    contributing = 0
    for tree in forest.trees:
        leaf = int(tree.leaf_of(x)[0])
        cnt = int(tree.est_count[leaf])
        if cnt == 0:
            continue
        members = tree.est_members[tree.est_lo[leaf]:tree.est_hi[leaf]]
        alpha[members] += 1.0 if count_mode else 1.0 / cnt
        contributing += 1
    if contributing == 0:
        raise EmptyNeighborhoodError("query fell into empty leaves in every tree")
    alpha /= alpha.sum() if count_mode else contributing
    return ForestWeights(alpha=alpha)


def _aggregate_tables(forest: HteForest, X) -> np.ndarray:
    """Weighted moments per query row, aggregated from per-leaf mean tables.

    Exactly the moments one gets from forest_weights under the configured
    weighting: leaf-share averages leaf means over trees, count weighting
    averages leaf sums and divides by the total co-occurrence count.
    """
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    k = X.shape[0]
    width = forest._tables[0].shape[1]
    count_mode = forest.config.weighting == "count"
    acc = np.zeros((k, width))
    nb = np.zeros(k)
    for tree, table in zip(forest.trees, forest._tables):
        leaf = tree.leaf_of(X)
        cnt = tree.est_count[leaf]
        ok = cnt > 0
        if count_mode:
            acc[ok] += table[leaf[ok]] * cnt[ok, None]
            nb[ok] += cnt[ok]
        else:
            acc[ok] += table[leaf[ok]]
            nb[ok] += 1.0
    if np.any(nb == 0):
        raise EmptyNeighborhoodError("a query fell into empty leaves in every tree")
    return acc / nb[:, None]


def predict_local_model(forest: HteForest, X) -> tuple[np.ndarray, np.ndarray | None]:
    """Effect estimate tau_hat(x) per query row, plus the working-scale
    intercept mu_hat(x) for the bivariate variants (None for cf / mobcf).

    Equivalent to re-fitting the variant's local model on the training data
    weighted by forest_weights(x).
    """
    moments = _aggregate_tables(forest, X)
    if forest.has_intercept:
        mv, mu_, mvv, mvu = (moments[:, i] for i in range(4))
        var = mvv - mv * mv
        if np.any(var <= 1e-12):
            raise DegenerateError("weighted treatment variance vanished at a query")
        tau = (mvu - mv * mu_) / var
        v0 = forest._v[0]
        u0 = forest._u[0]
        mu_hat = (u0 + mu_) - tau * (v0 + mv)
        return tau, mu_hat
    muv, mvv = moments[:, 0], moments[:, 1]
    if np.any(mvv <= 1e-12):
        raise DegenerateError("weighted squared treatment vanished at a query")
    return muv / mvv, None


def predict_tau(forest: HteForest, X):
    """tau_hat(x) for one query vector (returns float) or a query matrix."""
    single = np.asarray(X).ndim == 1
    tau, _mu = predict_local_model(forest, X)
    return float(tau[0]) if single else tau


def predict_tau_from_weights(forest: HteForest, weights: ForestWeights) -> float:
    """Reference implementation of the weighted local re-estimation; agrees
    with predict_tau up to floating-point summation order."""
    alpha = weights.alpha
    if forest.has_intercept:
        tv = forest._v - forest._v[0]
        tu = forest._u - forest._u[0]
        s = alpha.sum()
        mv = float(alpha @ tv) / s
        mu_ = float(alpha @ tu) / s
        var = float(alpha @ (tv * tv)) / s - mv * mv
        if var <= 1e-12:
            raise DegenerateError("weighted treatment variance vanished")
        cov = float(alpha @ (tv * tu)) / s - mv * mu_
        return cov / var
    num = float(alpha @ (forest._u * forest._v))
    den = float(alpha @ (forest._v * forest._v))
    if den <= 1e-12:
        raise DegenerateError("weighted squared treatment vanished")
    return num / den


def save_forest(forest: HteForest, path) -> None:
    """Serialize a fitted forest to a versioned .npz archive.

    The archive stores the split structures, per-leaf estimation indices and
    the training vectors needed for prediction (y, w, m_hat, pi_hat); leaf
    moment tables are rebuilt deterministically on load.  The format is
    stable within a serialization version.
    """
    cfg = forest.config
    node_counts = np.array([t.n_nodes for t in forest.trees], dtype=np.int64)
    member_counts = np.array([t.est_members.shape[0] for t in forest.trees],
                             dtype=np.int64)
    build_counts = np.array([t.build_rows.shape[0] for t in forest.trees],
                            dtype=np.int64)
    est_counts = np.array([t.estimation_rows.shape[0] for t in forest.trees],
                          dtype=np.int64)
    np.savez_compressed(
        path,
        version=np.array([SERIALIZATION_VERSION]),
        variant=np.array([cfg.variant]),
        cfg_numeric=np.array([cfg.n_trees, cfg.min_per_arm,
                              -1 if cfg.mtry is None else cfg.mtry,
                              int(cfg.honest),
                              -1 if cfg.max_depth is None else cfg.max_depth,
                              WEIGHTINGS.index(cfg.weighting)],
                             dtype=np.int64),
        cfg_fraction=np.array([cfg.subsample_fraction]),
        cfg_seed=np.array([cfg.seed], dtype=np.uint64),
        dims=np.array([forest.n, forest.p], dtype=np.int64),
        y=forest.y, w=forest.w,
        m_hat=forest.nuisance.m_hat, pi_hat=forest.nuisance.pi_hat,
        pi_mode=np.array([forest.nuisance.pi_mode]),
        node_counts=node_counts, member_counts=member_counts,
        build_counts=build_counts, est_counts=est_counts,
        feature=np.concatenate([t.feature for t in forest.trees]),
        threshold=np.concatenate([t.threshold for t in forest.trees]),
        left=np.concatenate([t.left for t in forest.trees]),
        right=np.concatenate([t.right for t in forest.trees]),
        est_members=np.concatenate([t.est_members for t in forest.trees]),
        est_lo=np.concatenate([t.est_lo for t in forest.trees]),
        est_hi=np.concatenate([t.est_hi for t in forest.trees]),
        build_rows=np.concatenate([t.build_rows for t in forest.trees]),
        estimation_rows=np.concatenate([t.estimation_rows for t in forest.trees]),
    )


def load_forest(path) -> HteForest:
    """Reload a forest saved by save_forest; predictions match the original."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"][0])
        if version != SERIALIZATION_VERSION:
            raise ValueError(f"unsupported forest format version {version}")
        num = data["cfg_numeric"]
        cfg = HteForestConfig(
            variant=str(data["variant"][0]),
            n_trees=int(num[0]), min_per_arm=int(num[1]),
            mtry=None if num[2] < 0 else int(num[2]),
            subsample_fraction=float(data["cfg_fraction"][0]),
            honest=bool(num[3]),
            max_depth=None if num[4] < 0 else int(num[4]),
            seed=int(data["cfg_seed"][0]),
            weighting=WEIGHTINGS[int(num[5])])
        y = data["y"]
        w = data["w"]
        nuisance = NuisanceEstimates(m_hat=data["m_hat"], pi_hat=data["pi_hat"],
                                     pi_mode=str(data["pi_mode"][0]))
        forest = HteForest(config=cfg, nuisance=nuisance,
                           n=int(data["dims"][0]), p=int(data["dims"][1]),
                           y=y, w=w)
        u, v = working_data(y, w, nuisance)
        forest._u = u
        forest._v = v
        quantities = _table_quantities(forest.has_intercept, u, v)
        node_off = np.concatenate([[0], np.cumsum(data["node_counts"])])
        mem_off = np.concatenate([[0], np.cumsum(data["member_counts"])])
        build_off = np.concatenate([[0], np.cumsum(data["build_counts"])])
        est_off = np.concatenate([[0], np.cumsum(data["est_counts"])])
        for t in range(cfg.n_trees):
            a, b = node_off[t], node_off[t + 1]
            ma, mb = mem_off[t], mem_off[t + 1]
            members = data["est_members"][ma:mb]
            lo = data["est_lo"][a:b]
            hi = data["est_hi"][a:b]
            tree = FittedTree(
                feature=data["feature"][a:b], threshold=data["threshold"][a:b],
                left=data["left"][a:b], right=data["right"][a:b],
                build_rows=data["build_rows"][build_off[t]:build_off[t + 1]],
                estimation_rows=data["estimation_rows"][est_off[t]:est_off[t + 1]],
                est_members=members, est_lo=lo, est_hi=hi,
                est_count=(hi - lo).astype(np.int64))
            forest.trees.append(tree)
            forest._tables.append(_leaf_tables(tree, quantities))
    return forest
