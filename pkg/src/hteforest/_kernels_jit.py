"""Numba implementations of the hot per-node kernels.

Loop-style twins of ``_kernels_py`` with the same decision logic; importing
this module requires numba.  All functions are cached nopython compilations,
carry no internal random state, and release no resources, so they are safe
to call from any thread.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

VAR_TOL = 1e-12
RANK_TOL = 1e-10
XVAR_TOL = 1e-12

MAX_DEPTH_SENTINEL = 1 << 30


@njit(cache=True)
def _chi2_sf(stat, df):
    if df <= 0:
        return 1.0
    if df == 1:
        return math.erfc(math.sqrt(0.5 * max(stat, 0.0)))
    return math.exp(-0.5 * stat)


@njit(cache=True)
def _pinv_sym2(a, b, c):
    disc = math.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam1 = 0.5 * (a + c) + disc
    lam2 = 0.5 * (a + c) - disc
    if lam1 <= 0.0:
        return 0.0, 0.0, 0.0, 0
    if lam2 > RANK_TOL * lam1:
        det = a * c - b * b
        return c / det, -b / det, a / det, 2
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


@njit(cache=True)
def _pinv_small(mat):
    """Pseudo-inverse and rank for symmetric PSD mat with q in {1, 2}."""
    q = mat.shape[0]
    out = np.zeros((q, q))
    if q == 1:
        h = mat[0, 0]
        if h > 0.0:
            out[0, 0] = 1.0 / h
            return out, 1
        return out, 0
    m00, m01, m11, rank = _pinv_sym2(mat[0, 0], mat[0, 1], mat[1, 1])
    out[0, 0] = m00
    out[0, 1] = m01
    out[1, 0] = m01
    out[1, 1] = m11
    return out, rank


@njit(cache=True)
def _midpoint(lo, hi):
    cut = lo + 0.5 * (hi - lo)
    if cut >= hi:
        cut = lo
    return cut


@njit(cache=True)
def best_cut_scan_mob(xcol, psi, arm, n_arms, minv, min_per_arm):
    m = xcol.shape[0]
    q = psi.shape[1]
    order = np.argsort(xcol)
    mean = np.zeros(q)
    for i in range(m):
        for a in range(q):
            mean[a] += psi[i, a]
    for a in range(q):
        mean[a] /= m
    total_arm = np.zeros(n_arms, dtype=np.int64)
    for i in range(m):
        total_arm[arm[i]] += 1
    pref = np.zeros(q)
    carm = np.zeros(n_arms, dtype=np.int64)
    z = np.zeros(q)
    found = False
    best_val = -np.inf
    best_cut = 0.0
    for k in range(m - 1):
        r = order[k]
        for a in range(q):
            pref[a] += psi[r, a]
        carm[arm[r]] += 1
        xk = xcol[r]
        xk1 = xcol[order[k + 1]]
        if xk < xk1:
            ok = True
            for a in range(n_arms):
                if carm[a] < min_per_arm or total_arm[a] - carm[a] < min_per_arm:
                    ok = False
                    break
            if ok:
                nl = float(k + 1)
                nr = float(m - k - 1)
                for a in range(q):
                    z[a] = pref[a] - nl * mean[a]
                quad = 0.0
                for a in range(q):
                    s = 0.0
                    for b in range(q):
                        s += minv[a, b] * z[b]
                    quad += z[a] * s
                val = quad * ((m - 1.0) / (nl * nr))
                if val > best_val:
                    best_val = val
                    best_cut = _midpoint(xk, xk1)
                    found = True
    if not found:
        return False, 0.0, 0.0
    return True, best_cut, best_val


@njit(cache=True)
def best_cut_scan_cf(xcol, psi_tau, arm, n_arms, a_p, min_per_arm):
    m = xcol.shape[0]
    order = np.argsort(xcol)
    total = 0.0
    for i in range(m):
        total += psi_tau[i]
    total_arm = np.zeros(n_arms, dtype=np.int64)
    for i in range(m):
        total_arm[arm[i]] += 1
    pref = 0.0
    carm = np.zeros(n_arms, dtype=np.int64)
    found = False
    best_val = -np.inf
    best_cut = 0.0
    for k in range(m - 1):
        r = order[k]
        pref += psi_tau[r]
        carm[arm[r]] += 1
        xk = xcol[r]
        xk1 = xcol[order[k + 1]]
        if xk < xk1:
            ok = True
            for a in range(n_arms):
                if carm[a] < min_per_arm or total_arm[a] - carm[a] < min_per_arm:
                    ok = False
                    break
            if ok:
                nl = float(k + 1)
                nr = float(m - k - 1)
                diff = pref / nl - (total - pref) / nr
                val = (nl * nr) / (m * float(m)) * (diff * diff) / (a_p * a_p)
                if val > best_val:
                    best_val = val
                    best_cut = _midpoint(xk, xk1)
                    found = True
    if not found:
        return False, 0.0, 0.0
    return True, best_cut, best_val


@njit(cache=True)
def best_cut_scan_var(xcol, y, min_child):
    m = xcol.shape[0]
    order = np.argsort(xcol)
    total = 0.0
    for i in range(m):
        total += y[i]
    pref = 0.0
    found = False
    best_val = -np.inf
    best_cut = 0.0
    for k in range(m - 1):
        r = order[k]
        pref += y[r]
        xk = xcol[r]
        xk1 = xcol[order[k + 1]]
        if xk < xk1:
            nl = float(k + 1)
            nr = float(m - k - 1)
            if nl >= min_child and nr >= min_child:
                rest = total - pref
                val = pref * pref / nl + rest * rest / nr
                if val > best_val:
                    best_val = val
                    best_cut = _midpoint(xk, xk1)
                    found = True
    if not found:
        return False, 0.0, 0.0
    return True, best_cut, best_val


@njit(cache=True)
def route_points(X, feature, threshold, left, right):
    k = X.shape[0]
    out = np.empty(k, dtype=np.int64)
    for i in range(k):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True)
def _stable_partition(rows, lo, hi, Xb, j, cut):
    """Partition rows[lo:hi] by Xb[row, j] <= cut, preserving order."""
    n = hi - lo
    buf = np.empty(n, dtype=np.int64)
    nl = 0
    for i in range(lo, hi):
        if Xb[rows[i], j] <= cut:
            buf[nl] = rows[i]
            nl += 1
    nr = nl
    for i in range(lo, hi):
        if not (Xb[rows[i], j] <= cut):
            buf[nr] = rows[i]
            nr += 1
    for i in range(n):
        rows[lo + i] = buf[i]
    return nl


@njit(cache=True)
def grow_reg_tree(Xs, ys, min_node, cand, max_nodes, max_depth):
    m = ys.shape[0]
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)
    rows = np.arange(m)
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_lo = np.empty(max_nodes, dtype=np.int64)
    stack_hi = np.empty(max_nodes, dtype=np.int64)
    stack_depth = np.empty(max_nodes, dtype=np.int64)
    sp = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = m
    stack_depth[0] = 0
    sp = 1
    next_id = 1
    mtry = cand.shape[1]
    xbuf = np.empty(m)
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        depth = stack_depth[sp]
        nrow = hi - lo
        ysum = 0.0
        for i in range(lo, hi):
            ysum += ys[rows[i]]
        value[node] = ysum / nrow
        if nrow < 2 * min_node or depth >= max_depth or next_id + 1 >= max_nodes:
            continue
        y0 = ys[rows[lo]]
        const = True
        for i in range(lo, hi):
            if ys[rows[i]] != y0:
                const = False
                break
        if const:
            continue
        ybuf = np.empty(nrow)
        for i in range(nrow):
            ybuf[i] = ys[rows[lo + i]]
        best_val = -np.inf
        best_j = -1
        best_cut = 0.0
        for idx in range(mtry):
            j = cand[node, idx]
            for i in range(nrow):
                xbuf[i] = Xs[rows[lo + i], j]
            found, cut, val = best_cut_scan_var(xbuf[:nrow], ybuf, min_node)
            if found and val > best_val:
                best_val = val
                best_j = j
                best_cut = cut
        if best_j < 0:
            continue
        nl = _stable_partition(rows, lo, hi, Xs, best_j, best_cut)
        feature[node] = best_j
        threshold[node] = best_cut
        lid = next_id
        rid = next_id + 1
        next_id += 2
        left[node] = lid
        right[node] = rid
        stack_node[sp] = rid
        stack_lo[sp] = lo + nl
        stack_hi[sp] = hi
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = lid
        stack_lo[sp] = lo
        stack_hi[sp] = lo + nl
        stack_depth[sp] = depth + 1
        sp += 1
    return (feature[:next_id], threshold[:next_id], left[:next_id],
            right[:next_id], value[:next_id], next_id)


@njit(cache=True)
def grow_hte_tree(Xb, u, v, wbin, intercept, use_test, min_per_arm,
                  max_depth, cand, max_nodes):
    m = Xb.shape[0]
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    seg_lo = np.zeros(max_nodes, dtype=np.int64)
    seg_hi = np.zeros(max_nodes, dtype=np.int64)
    rows = np.arange(m)
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_lo = np.empty(max_nodes, dtype=np.int64)
    stack_hi = np.empty(max_nodes, dtype=np.int64)
    stack_depth = np.empty(max_nodes, dtype=np.int64)
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = m
    stack_depth[0] = 0
    sp = 1
    next_id = 1
    mtry = cand.shape[1]
    q = 2 if intercept else 1
    psi = np.empty((m, q))
    xbuf = np.empty(m)
    armbuf = np.empty(m, dtype=np.int64)
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        depth = stack_depth[sp]
        seg_lo[node] = lo
        seg_hi[node] = hi
        nrow = hi - lo
        if depth >= max_depth or next_id + 1 >= max_nodes:
            continue
        nt = 0
        for i in range(lo, hi):
            armbuf[i - lo] = wbin[rows[i]]
            nt += wbin[rows[i]]
        nc = nrow - nt
        if nt < 2 * min_per_arm or nc < 2 * min_per_arm:
            continue
        a_p = 0.0
        tau = 0.0
        if intercept:
            r0 = rows[lo]
            va = v[r0]
            ua = u[r0]
            sv = 0.0
            su = 0.0
            svv = 0.0
            svu = 0.0
            for i in range(lo, hi):
                tv = v[rows[i]] - va
                tu = u[rows[i]] - ua
                sv += tv
                su += tu
                svv += tv * tv
                svu += tv * tu
            mv = sv / nrow
            mu_ = su / nrow
            var_v = svv - sv * mv
            if var_v <= VAR_TOL * nrow:
                continue
            cov = svu - sv * mu_
            tau = cov / var_v
            for i in range(lo, hi):
                tv = v[rows[i]] - va
                tu = u[rows[i]] - ua
                cvreg = tv - mv
                resid = (tu - mu_) - tau * cvreg
                psi[i - lo, 0] = resid
                psi[i - lo, 1] = resid * cvreg
        else:
            den = 0.0
            num = 0.0
            for i in range(lo, hi):
                vv = v[rows[i]]
                den += vv * vv
                num += u[rows[i]] * vv
            if den <= VAR_TOL * nrow:
                continue
            tau = num / den
            for i in range(lo, hi):
                vv = v[rows[i]]
                psi[i - lo, 0] = (u[rows[i]] - tau * vv) * vv
            a_p = den / nrow
        maxabs = 0.0
        for i in range(nrow):
            for a in range(q):
                av = abs(psi[i, a])
                if av > maxabs:
                    maxabs = av
        if maxabs == 0.0:
            continue
        best_j = -1
        cut = 0.0
        if use_test:
            pm = np.zeros(q)
            for i in range(nrow):
                for a in range(q):
                    pm[a] += psi[i, a]
            for a in range(q):
                pm[a] /= nrow
            vpsi = np.zeros((q, q))
            for i in range(nrow):
                for a in range(q):
                    da = psi[i, a] - pm[a]
                    for b in range(a, q):
                        vpsi[a, b] += da * (psi[i, b] - pm[b])
            for a in range(q):
                for b in range(a, q):
                    vpsi[a, b] /= nrow
                    vpsi[b, a] = vpsi[a, b]
            minv_t, rank = _pinv_small(vpsi)
            if rank == 0:
                continue
            best_p = 2.0
            tvec = np.zeros(q)
            dvec = np.zeros(q)
            for idx in range(mtry):
                j = cand[node, idx]
                sx = 0.0
                sxx = 0.0
                for a in range(q):
                    tvec[a] = 0.0
                for i in range(nrow):
                    xi = Xb[rows[lo + i], j]
                    sx += xi
                    sxx += xi * xi
                    for a in range(q):
                        tvec[a] += xi * psi[i, a]
                cx_ss = sxx - sx * sx / nrow
                if cx_ss <= XVAR_TOL * max(sxx, 1e-30):
                    pval = 1.0
                else:
                    cx = (nrow / (nrow - 1.0)) * cx_ss
                    for a in range(q):
                        dvec[a] = tvec[a] - sx * pm[a]
                    quad = 0.0
                    for a in range(q):
                        s = 0.0
                        for b in range(q):
                            s += minv_t[a, b] * dvec[b]
                        quad += dvec[a] * s
                    pval = _chi2_sf(quad / cx, rank)
                if pval < best_p:
                    best_p = pval
                    best_j = j
            if best_j < 0:
                continue
            vh = np.zeros((q, q))
            for i in range(nrow):
                for a in range(q):
                    for b in range(a, q):
                        vh[a, b] += psi[i, a] * psi[i, b]
            for a in range(q):
                for b in range(a, q):
                    vh[a, b] /= nrow
                    vh[b, a] = vh[a, b]
            minv_h, _rank_h = _pinv_small(vh)
            for i in range(nrow):
                xbuf[i] = Xb[rows[lo + i], best_j]
            found, cut, _val = best_cut_scan_mob(
                xbuf[:nrow], psi[:nrow], armbuf[:nrow], 2, minv_h, min_per_arm)
            if not found:
                continue
        else:
            best_val = -np.inf
            for idx in range(mtry):
                j = cand[node, idx]
                for i in range(nrow):
                    xbuf[i] = Xb[rows[lo + i], j]
                found, cj, val = best_cut_scan_cf(
                    xbuf[:nrow], psi[:nrow, 0], armbuf[:nrow], 2, a_p,
                    min_per_arm)
                if found and val > best_val:
                    best_val = val
                    best_j = j
                    cut = cj
            if best_j < 0:
                continue
        nl = _stable_partition(rows, lo, hi, Xb, best_j, cut)
        feature[node] = best_j
        threshold[node] = cut
        lid = next_id
        rid = next_id + 1
        next_id += 2
        left[node] = lid
        right[node] = rid
        stack_node[sp] = rid
        stack_lo[sp] = lo + nl
        stack_hi[sp] = hi
        stack_depth[sp] = depth + 1
        sp += 1
        stack_node[sp] = lid
        stack_lo[sp] = lo
        stack_hi[sp] = lo + nl
        stack_depth[sp] = depth + 1
        sp += 1
    return (feature[:next_id], threshold[:next_id], left[:next_id],
            right[:next_id], next_id, seg_lo[:next_id], seg_hi[:next_id], rows)
