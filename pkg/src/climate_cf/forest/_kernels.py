"""Compiled inner loops: tree growth, leaf lookup and kernel-weighted prediction.

All functions release the GIL so trees and query chunks can be processed by a
thread pool. Nothing here draws from a global RNG; feature sampling uses a
per-tree splitmix64 stream so results do not depend on thread scheduling.
"""

import math

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def _next_u64(state):
    state[0] = state[0] + _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _sample_features(p, mtry, state):
    feats = np.arange(p)
    for i in range(mtry):
        j = i + np.int64(_next_u64(state) % np.uint64(p - i))
        tmp = feats[i]
        feats[i] = feats[j]
        feats[j] = tmp
    out = np.sort(feats[:mtry])
    return out


@njit(cache=True, nogil=True)
def _pseudo_outcomes(y, w, rows, causal, rho):
    """Fill rho[row] for the node rows; return False when the node cannot be split."""
    m = rows.shape[0]
    if causal:
        sw = 0.0
        sy = 0.0
        for k in range(m):
            sw += w[rows[k]]
            sy += y[rows[k]]
        wbar = sw / m
        ybar = sy / m
        sww = 0.0
        swy = 0.0
        for k in range(m):
            dw = w[rows[k]] - wbar
            sww += dw * dw
            swy += dw * (y[rows[k]] - ybar)
        if not sww > 0.0:
            return False
        tau = swy / sww
        mean_ww = sww / m
        for k in range(m):
            r = rows[k]
            dw = w[r] - wbar
            rho[r] = dw * ((y[r] - ybar) - tau * dw) / mean_ww
    else:
        lo = y[rows[0]]
        hi = lo
        s = 0.0
        for k in range(m):
            v = y[rows[k]]
            s += v
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        if lo == hi:
            return False
        ybar = s / m
        for k in range(m):
            rho[rows[k]] = y[rows[k]] - ybar
    return True


@njit(cache=True, nogil=True)
def _partition_sorted(order, lo, hi, n_left, goes_left, scratch):
    """Stable partition of each feature's sorted segment by goes_left."""
    p = order.shape[0]
    for f in range(p):
        il = 0
        ir = n_left
        for k in range(lo, hi):
            r = order[f, k]
            if goes_left[r]:
                scratch[il] = r
                il += 1
            else:
                scratch[ir] = r
                ir += 1
        for k in range(hi - lo):
            order[f, lo + k] = scratch[k]


@njit(cache=True, nogil=True)
def _has_variation(w, rows):
    if rows.shape[0] < 2:
        return False
    first = w[rows[0]]
    for k in range(1, rows.shape[0]):
        if w[rows[k]] != first:
            return True
    return False


@njit(cache=True, nogil=True)
def presort(X):
    """Row indices sorted by each feature, shape (p, n); computed once per forest."""
    p = X.shape[1]
    n = X.shape[0]
    order = np.empty((p, n), np.int64)
    for f in range(p):
        order[f] = np.argsort(X[:, f], kind="mergesort")
    return order


@njit(cache=True, nogil=True)
def _restrict(global_order, member, m):
    """Per-feature sorted orderings restricted to rows with member[row] set."""
    p = global_order.shape[0]
    n = global_order.shape[1]
    out = np.empty((p, m), np.int64)
    for f in range(p):
        k = 0
        for j in range(n):
            r = global_order[f, j]
            if member[r]:
                out[f, k] = r
                k += 1
    return out


@njit(cache=True, nogil=True)
def grow_tree(X, y, w, order, split_rows, est_rows, causal, min_node_size, mtry, alpha,
              seed):
    """Grow one honest tree.

    Splits are chosen on ``split_rows`` only; ``est_rows`` are routed down the
    chosen splits and end up, grouped by leaf, in the returned ``est_order``
    buffer. Node size constraints count estimation rows; ``alpha`` is the
    smallest share of the node's split rows either child may receive.
    ``order`` is the output of ``presort(X)``.

    Returns (feature, threshold, left, right, leaf_lo, leaf_hi, est_order);
    internal nodes have left >= 0, leaves have left == right == -1 and own
    ``est_order[leaf_lo:leaf_hi]``.
    """
    n = X.shape[0]
    p = X.shape[1]
    n_split = split_rows.shape[0]
    n_est = est_rows.shape[0]
    max_nodes = 2 * n_split + 1
    feature = np.full(max_nodes, -1, np.int32)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    leaf_lo = np.zeros(max_nodes, np.int64)
    leaf_hi = np.zeros(max_nodes, np.int64)

    # each node owns the same [lo, hi) segment in every feature's ordering
    goes_left = np.zeros(n, np.bool_)
    for k in range(n_split):
        goes_left[split_rows[k]] = True
    S = _restrict(order, goes_left, n_split)
    goes_left[:] = False
    for k in range(n_est):
        goes_left[est_rows[k]] = True
    E = _restrict(order, goes_left, n_est)
    goes_left[:] = False
    rho = np.zeros(n)
    scratch = np.empty(max(n_split, n_est) + 1, np.int64)
    state = np.empty(1, np.uint64)
    state[0] = np.uint64(seed)

    stack = np.empty((max_nodes, 5), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_split
    stack[0, 3] = 0
    stack[0, 4] = n_est
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack[top, 0]
        s_lo = stack[top, 1]
        s_hi = stack[top, 2]
        e_lo = stack[top, 3]
        e_hi = stack[top, 4]
        ns = s_hi - s_lo
        ne = e_hi - e_lo
        leaf_lo[node] = e_lo
        leaf_hi[node] = e_hi

        if ns < 2 or ne < 2 * min_node_size:
            continue
        if not _pseudo_outcomes(y, w, S[0, s_lo:s_hi], causal, rho):
            continue
        total = 0.0
        total_sq = 0.0
        for k in range(s_lo, s_hi):
            v = rho[S[0, k]]
            total += v
            total_sq += v * v
        if not total_sq > 0.0:
            continue

        feats = _sample_features(p, mtry, state)
        min_child = max(1, int(np.ceil(alpha * ns)))
        # gains this close are ties; features and thresholds are scanned in
        # ascending order, so ties go to the lowest feature, then threshold
        tie_tol = 1e-10 * total_sq
        best_gain = -1.0
        best_feat = -1
        best_thr = 0.0
        for fi in range(feats.shape[0]):
            f = feats[fi]
            # estimation counts on each side are monotone in the threshold, so
            # the min-node constraint is an interval of admissible thresholds
            thr_lo = X[E[f, e_lo + min_node_size - 1], f]
            thr_hi = X[E[f, e_hi - min_node_size], f]
            s_left = 0.0
            for j in range(s_lo, s_hi - 1):
                s_left += rho[S[f, j]]
                v0 = X[S[f, j], f]
                v1 = X[S[f, j + 1], f]
                if v0 == v1:
                    continue
                thr = v0 + (v1 - v0) * 0.5
                if thr >= v1:
                    thr = v0
                if thr < thr_lo:
                    continue
                if thr >= thr_hi:
                    break
                n_left = j - s_lo + 1
                if n_left < min_child:
                    continue
                if ns - n_left < min_child:
                    break
                s_right = total - s_left
                gain = s_left * s_left / n_left + s_right * s_right / (ns - n_left)
                if gain > best_gain + tie_tol:
                    best_gain = gain
                    best_feat = f
                    best_thr = thr

        if best_feat < 0:
            continue
        if not (best_gain - total * total / ns) > 1e-12 * total_sq:
            continue

        for k in range(s_lo, s_hi):
            r = S[0, k]
            goes_left[r] = X[r, best_feat] <= best_thr
        for k in range(e_lo, e_hi):
            r = E[0, k]
            goes_left[r] = X[r, best_feat] <= best_thr
        # the estimation split is cheap to check from E's sorted column
        e_mid = e_lo
        while e_mid < e_hi and X[E[best_feat, e_mid], best_feat] <= best_thr:
            e_mid += 1
        # a child without treatment variation among its estimation rows is
        # merged back into this node, which then stays a leaf
        if causal and not (_has_variation(w, E[best_feat, e_lo:e_mid])
                           and _has_variation(w, E[best_feat, e_mid:e_hi])):
            continue
        s_mid = s_lo
        while X[S[best_feat, s_mid], best_feat] <= best_thr:
            s_mid += 1
        _partition_sorted(S, s_lo, s_hi, s_mid - s_lo, goes_left, scratch)
        _partition_sorted(E, e_lo, e_hi, e_mid - e_lo, goes_left, scratch)

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        # push right first so the left subtree is expanded first
        stack[top, 0] = rc
        stack[top, 1] = s_mid
        stack[top, 2] = s_hi
        stack[top, 3] = e_mid
        stack[top, 4] = e_hi
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = s_lo
        stack[top, 2] = s_mid
        stack[top, 3] = e_lo
        stack[top, 4] = e_mid
        top += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        leaf_lo[:n_nodes].copy(),
        leaf_hi[:n_nodes].copy(),
        E[0].copy(),
    )


@njit(cache=True, nogil=True)
def find_leaves(X, node_offset, feature, threshold, left, right, leaf_id):
    """Global leaf id reached by every row of X in every tree, shape (n, n_trees)."""
    n = X.shape[0]
    n_trees = node_offset.shape[0] - 1
    out = np.empty((n, n_trees), np.int64)
    for i in range(n):
        for b in range(n_trees):
            off = node_offset[b]
            node = 0
            while left[off + node] >= 0:
                if X[i, feature[off + node]] <= threshold[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            out[i, b] = leaf_id[off + node]
    return out


@njit(cache=True, nogil=True)
def predict_regression(X, node_offset, feature, threshold, left, right, leaf_id,
                       leaf_n, leaf_sum, query_rows, inbag):
    """Average of leaf means over trees; out-of-bag when query_rows[i] >= 0.

    Returns (prediction, number of trees used).
    """
    n = X.shape[0]
    n_trees = node_offset.shape[0] - 1
    pred = np.full(n, np.nan)
    used = np.zeros(n, np.int64)
    for i in range(n):
        q = query_rows[i]
        acc = 0.0
        cnt = 0
        for b in range(n_trees):
            if q >= 0 and inbag[b, q]:
                continue
            off = node_offset[b]
            node = 0
            while left[off + node] >= 0:
                if X[i, feature[off + node]] <= threshold[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            lf = leaf_id[off + node]
            if leaf_n[lf] > 0:
                acc += leaf_sum[lf] / leaf_n[lf]
                cnt += 1
        if cnt > 0:
            pred[i] = acc / cnt
        used[i] = cnt
    return pred, used


@njit(cache=True, nogil=True)
def _debiased_variance(between, within, n_groups):
    """Posterior mean of a non-negative variance given a noisy unbiased estimate.

    Flat prior on [0, inf) and a normal likelihood centred on
    ``between - within`` give a truncated-normal posterior; its mean is always
    positive.
    """
    est = between - within
    scale = max(between, within) * np.sqrt(2.0 / n_groups)
    if not scale > 0.0:
        return max(est, 0.0)
    r = est / scale
    dens = np.exp(-0.5 * r * r) / np.sqrt(2.0 * np.pi)
    tail = 0.5 * math.erfc(-r / np.sqrt(2.0))
    if tail < 1e-300:
        return max(est, 0.0)
    return est + scale * dens / tail


@njit(cache=True, nogil=True)
def predict_causal(X, node_offset, feature, threshold, left, right, leaf_id,
                   leaf_n, leaf_sw, leaf_sy, leaf_swy, leaf_sww,
                   query_rows, inbag, group_size):
    """Kernel-weighted residual-on-residual effect with half-sample variance.

    For each query row the forest weights are
    alpha_i(x) = mean over trees of 1{i in leaf_b(x)} / |leaf_b(x)|, so every
    weighted moment is an average of per-tree leaf means. Returns an array of
    shape (n, 6): effect, variance, weighted mean of w, weighted mean of y,
    weighted mean of w^2, trees used.
    """
    n = X.shape[0]
    n_trees = node_offset.shape[0] - 1
    out = np.full((n, 6), np.nan)
    mw = np.empty(n_trees)
    my = np.empty(n_trees)
    mwy = np.empty(n_trees)
    mww = np.empty(n_trees)
    valid = np.zeros(n_trees, np.bool_)
    for i in range(n):
        q = query_rows[i]
        aw = 0.0
        ay = 0.0
        awy = 0.0
        aww = 0.0
        cnt = 0
        for b in range(n_trees):
            valid[b] = False
            if q >= 0 and inbag[b, q]:
                continue
            off = node_offset[b]
            node = 0
            while left[off + node] >= 0:
                if X[i, feature[off + node]] <= threshold[off + node]:
                    node = left[off + node]
                else:
                    node = right[off + node]
            lf = leaf_id[off + node]
            m = leaf_n[lf]
            if m <= 0:
                continue
            mw[b] = leaf_sw[lf] / m
            my[b] = leaf_sy[lf] / m
            mwy[b] = leaf_swy[lf] / m
            mww[b] = leaf_sww[lf] / m
            valid[b] = True
            aw += mw[b]
            ay += my[b]
            awy += mwy[b]
            aww += mww[b]
            cnt += 1
        out[i, 5] = cnt
        if cnt == 0:
            continue
        aw /= cnt
        ay /= cnt
        awy /= cnt
        aww /= cnt
        out[i, 2] = aw
        out[i, 3] = ay
        out[i, 4] = aww
        denom = aww - aw * aw
        if not denom > 1e-14 * aww:
            continue
        tau = (awy - aw * ay) / denom
        out[i, 0] = tau
        if group_size < 2:
            continue

        # psi_b: the per-tree estimating equation evaluated at the forest solution
        n_groups = n_trees // group_size
        gsum = 0.0
        gsq = 0.0
        within = 0.0
        good = 0
        psi = np.empty(group_size)
        for g in range(n_groups):
            ok = True
            for t in range(group_size):
                if not valid[g * group_size + t]:
                    ok = False
                    break
            if not ok:
                continue
            gmean = 0.0
            for t in range(group_size):
                b = g * group_size + t
                v = (mwy[b] - aw * my[b] - ay * mw[b] + aw * ay
                     - tau * (mww[b] - 2.0 * aw * mw[b] + aw * aw))
                psi[t] = v
                gmean += v
            gmean /= group_size
            ss = 0.0
            for t in range(group_size):
                ss += (psi[t] - gmean) ** 2
            within += ss / group_size
            gsum += gmean
            gsq += gmean * gmean
            good += 1
        if good < 2:
            continue
        gbar = gsum / good
        between = gsq / good - gbar * gbar
        within = within / good / (group_size - 1)
        v = _debiased_variance(between, within, good)
        out[i, 1] = v / (denom * denom)
    return out


@njit(cache=True, nogil=True)
def node_moments(y, w, est_order, lo, hi):
    """Per-node counts and sums of w, y, w*y, w*w over estimation rows."""
    m = lo.shape[0]
    out = np.zeros((m, 5))
    for j in range(m):
        for k in range(lo[j], hi[j]):
            r = est_order[k]
            out[j, 0] += 1.0
            out[j, 1] += w[r]
            out[j, 2] += y[r]
            out[j, 3] += w[r] * y[r]
            out[j, 4] += w[r] * w[r]
    return out
