"""NumPy fallback for the compiled kernels in ``_ckernels.pyx``.

Same signatures, same impurity formulas, same tie rule. Used when the
extension is not built or ``DDX_PURE_PYTHON=1`` is set.
"""
import numpy as np

TIE_EPS = 1e-12


def _impurity_rows(counts, n, criterion):
    """Row-wise impurity of a (m, k) count matrix with row totals ``n``."""
    counts = counts.astype(np.float64)
    n = n.astype(np.float64)
    if criterion == 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(counts > 0, counts * np.log2(np.where(counts > 0, counts, 1.0)), 0.0)
            acc = np.zeros(len(n))
            for j in range(counts.shape[1]):
                acc = acc + terms[:, j]
            out = np.log2(np.where(n > 0, n, 1.0)) - acc / np.where(n > 0, n, 1.0)
    else:
        acc = np.zeros(len(n))
        for j in range(counts.shape[1]):
            acc = acc + counts[:, j] * counts[:, j]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = 1.0 - acc / np.where(n > 0, n * n, 1.0)
    return np.where(n > 0, out, 0.0)


def impurity(counts, criterion):
    counts = np.asarray(counts, dtype=np.int64)
    return float(_impurity_rows(counts[None, :], np.array([counts.sum()]), criterion)[0])


def best_split(X, y, n_classes, criterion, min_leaf):
    n, n_feat = X.shape
    if n < 2:
        return -1, float("nan"), 0.0
    total = np.bincount(y, minlength=n_classes).astype(np.int64)
    parent = impurity(total, criterion)
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    best = -np.inf
    near = []
    nl = np.arange(1, n)
    nr = n - nl
    size_ok = (nl >= min_leaf) & (nr >= min_leaf)
    for f in range(n_feat):
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        onehot[:] = 0
        onehot[np.arange(n), y[order]] = 1
        left = np.cumsum(onehot, axis=0)[:-1]
        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        pos = np.flatnonzero(valid)
        lc = left[pos]
        il = _impurity_rows(lc, nl[pos], criterion)
        ir = _impurity_rows(total[None, :] - lc, nr[pos], criterion)
        gains = parent - (nl[pos] * il + nr[pos] * ir) / n
        a, b = xs[pos], xs[pos + 1]
        thr = a / 2.0 + b / 2.0
        thr = np.where(thr >= b, a, thr)
        feat_best = gains.max()
        if feat_best < best - TIE_EPS:
            continue
        if feat_best > best:
            best = feat_best
            near = [c for c in near if c[0] >= best - TIE_EPS]
        for g, t in zip(gains[gains >= best - TIE_EPS], thr[gains >= best - TIE_EPS]):
            near.append((float(g), f, float(t)))
    if not near:
        return -1, float("nan"), 0.0
    g, f, t = near[0]
    return f, t, g


def apply_tree(X, feature, threshold, left, right):
    n = X.shape[0]
    node = np.zeros(n, dtype=np.intp)
    active = np.flatnonzero(feature[node] >= 0)
    while active.size:
        cur = node[active]
        go_left = X[active, feature[cur]] <= threshold[cur]
        node[active] = np.where(go_left, left[cur], right[cur])
        active = active[feature[node[active]] >= 0]
    return node
