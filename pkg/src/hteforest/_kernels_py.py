"""Vectorized NumPy implementations of the hot per-node kernels.

This is the fallback path used when numba is unavailable or disabled via
``HTEFOREST_NUMBA=0``.  The numba twins in ``_kernels_jit`` implement the
same functions with identical decision logic (tolerances, traversal order,
tie-breaking), so both backends grow the same trees up to floating-point
summation order.

Conventions shared by both backends:
  * a point goes LEFT iff x[feature] <= threshold;
  * cut candidates are midpoints between consecutive distinct sorted values;
  * ties are broken toward the smallest candidate variable index and the
    smallest cut value (first strict maximum wins in ascending scans);
  * leaves carry feature == -1.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erfc

# Numerical guards (mirrored in _kernels_jit).
VAR_TOL = 1e-12      # per-row variance floor for the node regressor
RANK_TOL = 1e-10     # relative eigenvalue cutoff for pseudo-inverses
XVAR_TOL = 1e-12     # relative floor for covariate variation in the test

MAX_DEPTH_SENTINEL = 1 << 30


def chi2_sf(stat, df):
    """Chi-square upper tail for df in {0, 1, 2} (closed forms)."""
    stat = np.asarray(stat, dtype=np.float64)
    if df <= 0:
        return np.ones_like(stat)
    if df == 1:
        return erfc(np.sqrt(0.5 * np.maximum(stat, 0.0)))
    return np.exp(-0.5 * stat)


def pinv_sym2(a, b, c):
    """Pseudo-inverse of the symmetric PSD 2x2 matrix [[a, b], [b, c]].

    Returns (m00, m01, m11, rank) using the eigenvalue cutoff RANK_TOL
    relative to the spectral norm.  Identical closed form in both backends.
    """
    disc = np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam1 = 0.5 * (a + c) + disc
    lam2 = 0.5 * (a + c) - disc
    if lam1 <= 0.0:
        return 0.0, 0.0, 0.0, 0
    if lam2 > RANK_TOL * lam1:
        det = a * c - b * b
        return c / det, -b / det, a / det, 2
    # rank one: project on the leading eigenvector
    e0, e1 = lam1 - c, b
    nrm = e0 * e0 + e1 * e1
    f0, f1 = b, lam1 - a
    nrm2 = f0 * f0 + f1 * f1
    if nrm2 > nrm:
        e0, e1, nrm = f0, f1, nrm2
    if nrm <= 0.0:
        return 0.0, 0.0, 0.0, 0
    s = 1.0 / (lam1 * nrm)
    return e0 * e0 * s, e0 * e1 * s, e1 * e1 * s, 1


def pinv_sym(mat):
    """Pseudo-inverse and rank of a symmetric PSD matrix of any size.

    Sizes 1 and 2 use the same closed forms as the jit backend; larger score
    dimensions (multi-arm treatments) go through an eigendecomposition.
    """
    q = mat.shape[0]
    if q == 1:
        h = mat[0, 0]
        if h <= 0.0:
            return np.zeros((1, 1)), 0
        return np.array([[1.0 / h]]), 1
    if q == 2:
        m00, m01, m11, rank = pinv_sym2(mat[0, 0], mat[0, 1], mat[1, 1])
        return np.array([[m00, m01], [m01, m11]]), rank
    vals, vecs = np.linalg.eigh(mat)
    lam_max = vals[-1]
    if lam_max <= 0.0:
        return np.zeros_like(mat), 0
    keep = vals > RANK_TOL * lam_max
    rank = int(np.count_nonzero(keep))
    if rank == 0:
        return np.zeros_like(mat), 0
    inv_vals = np.where(keep, 1.0 / np.where(keep, vals, 1.0), 0.0)
    return (vecs * inv_vals) @ vecs.T, rank


def _boundaries(xs):
    """Indices k with xs[k] < xs[k+1] for a sorted array."""
    return np.nonzero(xs[:-1] < xs[1:])[0]


def _midpoints(xs, boundary):
    lo = xs[boundary]
    hi = xs[boundary + 1]
    cut = lo + 0.5 * (hi - lo)
    # adjacent floats can round the midpoint up to hi; keep left-closed routing
    return np.where(cut >= hi, lo, cut)


def _arm_prefix(arm_sorted, n_arms, boundary):
    onehot = np.zeros((arm_sorted.shape[0], n_arms), dtype=np.int64)
    onehot[np.arange(arm_sorted.shape[0]), arm_sorted] = 1
    return np.cumsum(onehot, axis=0)[boundary]


def best_cut_scan_mob(xcol, psi, arm, n_arms, minv, min_per_arm):
    """Best feasible cut of one covariate under the quadratic score criterion.

    C(cut) = (m-1) / (n_L * n_R) * Z' Minv Z with Z = sum(psi_left) - n_L * mean(psi),
    where Minv is the (pseudo-)inverse of (1/m) sum_i psi_i psi_i'.
    Returns (found, cut, value).
    """
    m = xcol.shape[0]
    order = np.argsort(xcol)
    xs = xcol[order]
    boundary = _boundaries(xs)
    if boundary.size == 0:
        return False, 0.0, 0.0
    ps = psi[order]
    prefix = np.cumsum(ps, axis=0)[boundary]
    arm_sorted = arm[order]
    left_arm = _arm_prefix(arm_sorted, n_arms, boundary)
    total_arm = np.bincount(arm_sorted, minlength=n_arms)
    feas = (np.all(left_arm >= min_per_arm, axis=1)
            & np.all(total_arm[None, :] - left_arm >= min_per_arm, axis=1))
    if not np.any(feas):
        return False, 0.0, 0.0
    nl = (boundary + 1).astype(np.float64)
    nr = m - nl
    mean = psi.sum(axis=0) / m
    z = prefix - nl[:, None] * mean[None, :]
    quad = np.einsum("bi,ij,bj->b", z, minv, z)
    vals = quad * ((m - 1.0) / (nl * nr))
    vals = np.where(feas, vals, -np.inf)
    k = int(np.argmax(vals))
    cut = float(_midpoints(xs, boundary)[k])
    return True, cut, float(vals[k])


def best_cut_scan_cf(xcol, psi_tau, arm, n_arms, a_p, min_per_arm):
    """Best feasible cut maximizing the pseudo-outcome mean-difference criterion.

    C(cut) = (n_L * n_R / m^2) * (mean_L - mean_R)^2 / a_p^2 over psi_tau.
    Returns (found, cut, value).
    """
    m = xcol.shape[0]
    order = np.argsort(xcol)
    xs = xcol[order]
    boundary = _boundaries(xs)
    if boundary.size == 0:
        return False, 0.0, 0.0
    ps = psi_tau[order]
    prefix = np.cumsum(ps)[boundary]
    arm_sorted = arm[order]
    left_arm = _arm_prefix(arm_sorted, n_arms, boundary)
    total_arm = np.bincount(arm_sorted, minlength=n_arms)
    feas = (np.all(left_arm >= min_per_arm, axis=1)
            & np.all(total_arm[None, :] - left_arm >= min_per_arm, axis=1))
    if not np.any(feas):
        return False, 0.0, 0.0
    nl = (boundary + 1).astype(np.float64)
    nr = m - nl
    total = psi_tau.sum()
    diff = prefix / nl - (total - prefix) / nr
    vals = (nl * nr) / (m * float(m)) * (diff * diff) / (a_p * a_p)
    vals = np.where(feas, vals, -np.inf)
    k = int(np.argmax(vals))
    cut = float(_midpoints(xs, boundary)[k])
    return True, cut, float(vals[k])


def best_cut_scan_var(xcol, y, min_child):
    """Best feasible cut maximizing S_L^2/n_L + S_R^2/n_R (SSE reduction
    up to a parent-level constant).  Returns (found, cut, value)."""
    m = xcol.shape[0]
    order = np.argsort(xcol)
    xs = xcol[order]
    boundary = _boundaries(xs)
    if boundary.size == 0:
        return False, 0.0, 0.0
    prefix = np.cumsum(y[order])[boundary]
    nl = (boundary + 1).astype(np.float64)
    nr = m - nl
    feas = (nl >= min_child) & (nr >= min_child)
    if not np.any(feas):
        return False, 0.0, 0.0
    total = y.sum()
    vals = prefix * prefix / nl + (total - prefix) ** 2 / nr
    vals = np.where(feas, vals, -np.inf)
    k = int(np.argmax(vals))
    cut = float(_midpoints(xs, boundary)[k])
    return True, cut, float(vals[k])


def route_points(X, feature, threshold, left, right):
    """Leaf index for each row of X under the shared routing convention."""
    k = X.shape[0]
    node = np.zeros(k, dtype=np.int64)
    active = np.nonzero(feature[node] >= 0)[0]
    while active.size:
        nd = node[active]
        f = feature[nd]
        go_left = X[active, f] <= threshold[nd]
        node[active] = np.where(go_left, left[nd], right[nd])
        active = active[feature[node[active]] >= 0]
    return node


def grow_reg_tree(Xs, ys, min_node, cand, max_nodes, max_depth):
    """Grow one regression tree on a subsample by variance-reduction CART.

    cand holds the candidate feature indices per created node id (rows sorted
    ascending).  Returns (feature, threshold, left, right, value, n_nodes);
    value is the segment mean at every node.
    """
    m = ys.shape[0]
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)
    rows = np.arange(m, dtype=np.int64)
    stack = [(0, 0, m, 0)]
    next_id = 1
    while stack:
        node, lo, hi, depth = stack.pop()
        seg = rows[lo:hi]
        yseg = ys[seg]
        nrow = hi - lo
        value[node] = yseg.sum() / nrow
        if nrow < 2 * min_node or depth >= max_depth or next_id + 1 >= max_nodes:
            continue
        if np.all(yseg == yseg[0]):
            continue
        best_val = -np.inf
        best_j = -1
        best_cut = 0.0
        for j in cand[node]:
            found, cut, val = best_cut_scan_var(Xs[seg, j], yseg, min_node)
            if found and val > best_val:
                best_val, best_j, best_cut = val, j, cut
        if best_j < 0:
            continue
        mask = Xs[seg, best_j] <= best_cut
        nl = int(mask.sum())
        rows[lo:hi] = np.concatenate([seg[mask], seg[~mask]])
        feature[node] = best_j
        threshold[node] = best_cut
        lid, rid = next_id, next_id + 1
        next_id += 2
        left[node] = lid
        right[node] = rid
        stack.append((rid, lo + nl, hi, depth + 1))
        stack.append((lid, lo, lo + nl, depth + 1))
    return (feature[:next_id], threshold[:next_id], left[:next_id],
            right[:next_id], value[:next_id], next_id)


def grow_hte_tree(Xb, u, v, wbin, intercept, use_test, min_per_arm,
                  max_depth, cand, max_nodes):
    """Grow one treatment-effect tree on its build rows.

    u, v are the working outcome and working treatment (already centered as
    the variant requires); wbin holds the original binary arm for the
    per-arm size constraint.

    Variant wiring:
      * intercept=True,  use_test=True  -- bivariate local model, score-based
        variable test, quadratic cut criterion (mob, mobW, mobWY);
      * intercept=False, use_test=True  -- effect-only local model, one-column
        scores, same test and criterion (mobcf);
      * intercept=False, use_test=False -- effect-only local model, all
        candidates scanned by the pseudo-outcome criterion (cf).

    Inside a node the regressor is anchored at the node's first row and then
    mean-centered.  Split decisions are invariant to affine shifts of the
    regressor, so centering the treatment by a known constant leaves the tree
    bitwise unchanged.

    Returns (feature, threshold, left, right, n_nodes, seg_lo, seg_hi, rows):
    rows[seg_lo[k]:seg_hi[k]] are the build rows of node k in ascending
    original order; leaves have feature == -1.
    """
    m = Xb.shape[0]
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    seg_lo = np.zeros(max_nodes, dtype=np.int64)
    seg_hi = np.zeros(max_nodes, dtype=np.int64)
    rows = np.arange(m, dtype=np.int64)
    stack = [(0, 0, m, 0)]
    next_id = 1
    while stack:
        node, lo, hi, depth = stack.pop()
        seg_lo[node] = lo
        seg_hi[node] = hi
        nrow = hi - lo
        if depth >= max_depth or next_id + 1 >= max_nodes:
            continue
        seg = rows[lo:hi]
        wseg = wbin[seg]
        nt = int(wseg.sum())
        nc = nrow - nt
        if nt < 2 * min_per_arm or nc < 2 * min_per_arm:
            continue
        useg = u[seg]
        vseg = v[seg]
        a_p = 0.0
        if intercept:
            tv = vseg - vseg[0]
            tu = useg - useg[0]
            sv = tv.sum()
            su = tu.sum()
            mv = sv / nrow
            mu_ = su / nrow
            var_v = (tv * tv).sum() - sv * mv
            if var_v <= VAR_TOL * nrow:
                continue
            cov = (tv * tu).sum() - sv * mu_
            tau = cov / var_v
            cvreg = tv - mv
            resid = (tu - mu_) - tau * cvreg
            psi = np.empty((nrow, 2))
            psi[:, 0] = resid
            psi[:, 1] = resid * cvreg
        else:
            den = (vseg * vseg).sum()
            if den <= VAR_TOL * nrow:
                continue
            tau = (useg * vseg).sum() / den
            psi = np.empty((nrow, 1))
            psi[:, 0] = (useg - tau * vseg) * vseg
            a_p = den / nrow
        if np.max(np.abs(psi)) == 0.0:
            continue
        q = psi.shape[1]
        cand_row = cand[node]
        if use_test:
            pm = psi.sum(axis=0) / nrow
            centered = psi - pm
            vpsi = centered.T @ centered / nrow
            minv_t, rank = pinv_sym(vpsi)
            if rank == 0:
                continue
            Xn = Xb[seg][:, cand_row]
            sx = Xn.sum(axis=0)
            sxx = (Xn * Xn).sum(axis=0)
            tmat = Xn.T @ psi
            d = tmat - sx[:, None] * pm[None, :]
            cx_ss = sxx - sx * sx / nrow
            deg = cx_ss <= XVAR_TOL * np.maximum(sxx, 1e-30)
            cx = (nrow / (nrow - 1.0)) * np.where(deg, 1.0, cx_ss)
            stat = np.einsum("ki,ij,kj->k", d, minv_t, d) / cx
            pvals = np.where(deg, 1.0, chi2_sf(stat, rank))
            best_j = int(cand_row[int(np.argmin(pvals))])
            uncentered = psi.T @ psi / nrow
            minv_h, _ = pinv_sym(uncentered)
            found, cut, _val = best_cut_scan_mob(
                Xb[seg, best_j], psi, wseg, 2, minv_h, min_per_arm)
            if not found:
                continue
        else:
            best_val = -np.inf
            best_j = -1
            cut = 0.0
            for j in cand_row:
                found, cj, val = best_cut_scan_cf(
                    Xb[seg, j], psi[:, 0], wseg, 2, a_p, min_per_arm)
                if found and val > best_val:
                    best_val, best_j, cut = val, int(j), cj
            if best_j < 0:
                continue
        mask = Xb[seg, best_j] <= cut
        nl = int(mask.sum())
        rows[lo:hi] = np.concatenate([seg[mask], seg[~mask]])
        feature[node] = best_j
        threshold[node] = cut
        lid, rid = next_id, next_id + 1
        next_id += 2
        left[node] = lid
        right[node] = rid
        stack.append((rid, lo + nl, hi, depth + 1))
        stack.append((lid, lo, lo + nl, depth + 1))
    return (feature[:next_id], threshold[:next_id], left[:next_id],
            right[:next_id], next_id, seg_lo[:next_id], seg_hi[:next_id], rows)
