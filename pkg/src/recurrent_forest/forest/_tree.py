"""Compiled kernels for growing SSE regression trees and walking them.

Trees are flat arrays in preorder: ``feature[i] < 0`` marks a leaf, an
internal node sends rows with ``x[feature] < threshold`` to ``left``.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _splitmix_next(state):
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _rand_below(state, n):
    # modulo draw; bias is below n / 2**64
    return np.int64(_splitmix_next(state) % np.uint64(n))


@njit(cache=True, nogil=True)
def _draw_candidates(state, p, m, scratch):
    for j in range(p):
        scratch[j] = j
    for j in range(m):
        k = j + _rand_below(state, p - j)
        tmp = scratch[j]
        scratch[j] = scratch[k]
        scratch[k] = tmp
    out = np.sort(scratch[:m].copy())
    return out


# equal partitions reached through different variables can differ in the last
# bits of the gain; treat those as ties so the lowest variable wins
_TIE_RTOL = 1.0 + 1e-10
_MIN_GAIN = 1e-14


@njit(cache=True, nogil=True)
def _best_split(rows, start, end, X, codes, values_by_feat, n_codes, y, w,
                cand, min_node, bin_w, bin_s, total_w, mean):
    """Best (feature, code) over candidate features for rows[start:end].

    Returns (gain, feature, code) where splitting sends codes < code left.
    Gain is the SSE decrease; ties keep the lowest feature then the lowest
    threshold because candidates are scanned in ascending order.
    """
    best_gain = 0.0
    best_f = -1
    best_c = -1
    n_node = end - start
    for fi in range(cand.shape[0]):
        f = cand[fi]
        k = n_codes[f]
        if k <= 1:
            continue
        if k <= 4 * n_node:
            for c in range(k):
                bin_w[c] = 0.0
                bin_s[c] = 0.0
            for r in range(start, end):
                i = rows[r]
                c = codes[i, f]
                bin_w[c] += w[i]
                bin_s[c] += w[i] * (y[i] - mean)
            cum_w = 0.0
            cum_s = 0.0
            seen = False
            for c in range(k):
                if bin_w[c] == 0.0:
                    continue
                if seen and cum_w >= min_node and total_w - cum_w >= min_node:
                    gain = cum_s * cum_s * total_w / (cum_w * (total_w - cum_w))
                    if gain > best_gain * _TIE_RTOL and gain > _MIN_GAIN:
                        best_gain = gain
                        best_f = f
                        best_c = c
                cum_w += bin_w[c]
                cum_s += bin_s[c]
                seen = True
        else:
            node_codes = np.empty(n_node, dtype=np.int64)
            for r in range(n_node):
                node_codes[r] = codes[rows[start + r], f]
            order = np.argsort(node_codes)
            cum_w = 0.0
            cum_s = 0.0
            prev = -1
            for q in range(n_node):
                i = rows[start + order[q]]
                c = node_codes[order[q]]
                if c != prev and prev >= 0:
                    if cum_w >= min_node and total_w - cum_w >= min_node:
                        gain = cum_s * cum_s * total_w / (cum_w * (total_w - cum_w))
                        if gain > best_gain * _TIE_RTOL and gain > _MIN_GAIN:
                            best_gain = gain
                            best_f = f
                            best_c = c
                cum_w += w[i]
                cum_s += w[i] * (y[i] - mean)
                prev = c
    return best_gain, best_f, best_c


@njit(cache=True, nogil=True)
def grow_tree(X, codes, values_by_feat, n_codes, y, w, rows, mtry, min_node,
              max_depth, seed):
    """Grow one tree on the rows with positive weight.

    ``w`` holds bootstrap multiplicities; ``rows`` lists the row indices with
    ``w > 0`` and is partitioned in place. ``max_depth < 0`` means unlimited.
    """
    n, p = X.shape
    n_rows = rows.shape[0]
    cap = 2 * n_rows + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap)

    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    scratch = np.empty(p, dtype=np.int64)
    kmax = 1
    for f in range(p):
        if n_codes[f] > kmax:
            kmax = n_codes[f]
    bin_w = np.zeros(kmax)
    bin_s = np.zeros(kmax)

    # stack of (start, end, depth, parent, is_right)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_parent = np.empty(cap, dtype=np.int64)
    st_right = np.empty(cap, dtype=np.int64)
    st_start[0] = 0
    st_end[0] = n_rows
    st_depth[0] = 0
    st_parent[0] = -1
    st_right[0] = 0
    top = 1
    n_nodes = 0

    while top > 0:
        top -= 1
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        node = n_nodes
        n_nodes += 1
        parent = st_parent[top]
        if parent >= 0:
            if st_right[top] == 1:
                right[parent] = node
            else:
                left[parent] = node

        total_w = 0.0
        total_s = 0.0
        ymin = np.inf
        ymax = -np.inf
        for r in range(start, end):
            i = rows[r]
            total_w += w[i]
            total_s += w[i] * y[i]
            if y[i] < ymin:
                ymin = y[i]
            if y[i] > ymax:
                ymax = y[i]
        mean = total_s / total_w
        value[node] = mean
        count[node] = total_w

        if (total_w < 2 * min_node or ymin == ymax
                or (max_depth >= 0 and depth >= max_depth)):
            continue

        cand = _draw_candidates(state, p, mtry, scratch)
        gain, f, c = _best_split(rows, start, end, X, codes, values_by_feat, n_codes,
                                 y, w, cand, min_node, bin_w, bin_s, total_w, mean)
        if f < 0 or not gain > 0.0:
            continue

        # partition rows[start:end] by code < c
        lo = start
        hi = end - 1
        while lo <= hi:
            if codes[rows[lo], f] < c:
                lo += 1
            else:
                tmp = rows[lo]
                rows[lo] = rows[hi]
                rows[hi] = tmp
                hi -= 1
        feature[node] = f
        threshold[node] = values_by_feat[f, c]

        # right pushed first so the left subtree is numbered next (preorder)
        st_start[top] = lo
        st_end[top] = end
        st_depth[top] = depth + 1
        st_parent[top] = node
        st_right[top] = 1
        top += 1
        st_start[top] = start
        st_end[top] = lo
        st_depth[top] = depth + 1
        st_parent[top] = node
        st_right[top] = 0
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _walk(feature, threshold, left, right, value, base, x):
    node = base
    while feature[node] >= 0:
        if x[feature[node]] < threshold[node]:
            node = base + left[node]
        else:
            node = base + right[node]
    return value[node]


@njit(cache=True, nogil=True)
def predict_sum(feature, threshold, left, right, value, offsets, X, tree_mask):
    """Per-row sum and count of tree outputs over trees allowed by ``tree_mask``.

    ``tree_mask`` is (n_rows, n_trees) boolean, or (0, 0) to use every tree.
    Child indices are local to each tree; ``offsets[b]`` is tree b's base.
    """
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    use_all = tree_mask.shape[0] == 0
    total = np.zeros(n)
    used = np.zeros(n, dtype=np.int64)
    for i in range(n):
        s = 0.0
        k = 0
        for b in range(n_trees):
            if use_all or tree_mask[i, b]:
                s += _walk(feature, threshold, left, right, value, offsets[b], X[i])
                k += 1
        total[i] = s
        used[i] = k
    return total, used


@njit(cache=True, nogil=True)
def predict_each(feature, threshold, left, right, value, offsets, X):
    """(n_rows, n_trees) matrix of individual tree outputs."""
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.empty((n, n_trees))
    for i in range(n):
        for b in range(n_trees):
            out[i, b] = _walk(feature, threshold, left, right, value, offsets[b], X[i])
    return out


@njit(cache=True, nogil=True)
def permutation_paths(feature, threshold, left, right, value, offsets, X, tree_mask, var):
    """Cache the (row, tree) pairs whose path tests ``var``.

    Returns the per-row sum and count over allowed trees, plus for every
    allowed pair that reaches a split on ``var``: the row, the tree's base
    offset, the first such node, and the original leaf value. Only these
    pairs can change when column ``var`` is permuted.
    """
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    total = np.zeros(n)
    used = np.zeros(n, dtype=np.int64)
    cap = 1024
    p_row = np.empty(cap, dtype=np.int64)
    p_base = np.empty(cap, dtype=np.int64)
    p_entry = np.empty(cap, dtype=np.int64)
    p_val = np.empty(cap)
    m = 0
    # tree-major order keeps each tree's nodes in cache during re-walks
    for b in range(n_trees):
        for i in range(n):
            if not tree_mask[i, b]:
                continue
            base = offsets[b]
            node = base
            entry = -1
            while feature[node] >= 0:
                f = feature[node]
                if f == var and entry < 0:
                    entry = node
                if X[i, f] < threshold[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            total[i] += value[node]
            used[i] += 1
            if entry >= 0:
                if m == cap:
                    cap *= 2
                    p_row = _grow_i(p_row, cap)
                    p_base = _grow_i(p_base, cap)
                    p_entry = _grow_i(p_entry, cap)
                    p_val = _grow_f(p_val, cap)
                p_row[m] = i
                p_base[m] = base
                p_entry[m] = entry
                p_val[m] = value[node]
                m += 1
    return total, used, p_row[:m].copy(), p_base[:m].copy(), p_entry[:m].copy(), p_val[:m].copy()


@njit(cache=True, nogil=True)
def _grow_i(a, cap):
    out = np.empty(cap, dtype=a.dtype)
    out[:a.shape[0]] = a
    return out


@njit(cache=True, nogil=True)
def _grow_f(a, cap):
    out = np.empty(cap)
    out[:a.shape[0]] = a
    return out


@njit(cache=True, nogil=True)
def permuted_total(feature, threshold, left, right, value, X, var, column, total,
                   p_row, p_base, p_entry, p_val):
    """Row sums after replacing column ``var`` by ``column``, using cached paths."""
    out = total.copy()
    for q in range(p_row.shape[0]):
        i = p_row[q]
        base = p_base[q]
        node = p_entry[q]
        while feature[node] >= 0:
            f = feature[node]
            v = column[i] if f == var else X[i, f]
            if v < threshold[node]:
                node = base + left[node]
            else:
                node = base + right[node]
        out[i] += value[node] - p_val[q]
    return out
