# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled split search and tree traversal.

Must stay numerically interchangeable with ``ddx._pykernels``: the impurity
formulas and the tie rule are written in the same order in both.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport log2, INFINITY, NAN

cnp.import_array()

DEF TIE_EPS = 1e-12


cdef inline double _impurity(const cnp.int64_t* counts, Py_ssize_t k, double n, int criterion) noexcept nogil:
    cdef Py_ssize_t j
    cdef double acc = 0.0, c
    if n <= 0.0:
        return 0.0
    if criterion == 0:
        for j in range(k):
            c = <double>counts[j]
            if c > 0.0:
                acc += c * log2(c)
        return log2(n) - acc / n
    for j in range(k):
        c = <double>counts[j]
        acc += c * c
    return 1.0 - acc / (n * n)


def impurity(cnp.int64_t[::1] counts, int criterion):
    cdef double n = 0.0
    cdef Py_ssize_t j
    for j in range(counts.shape[0]):
        n += counts[j]
    return _impurity(&counts[0], counts.shape[0], n, criterion)


def best_split(const double[:, ::1] X, const cnp.intp_t[::1] y, Py_ssize_t n_classes,
               int criterion, Py_ssize_t min_leaf):
    cdef Py_ssize_t n = X.shape[0], n_feat = X.shape[1]
    cdef Py_ssize_t f, i, j, pos, nl, nr
    cdef double parent, gain, best = -INFINITY, feat_best, il, ir, a, b, thr
    cdef cnp.int64_t[::1] total = np.zeros(n_classes, dtype=np.int64)
    cdef cnp.int64_t[::1] left = np.zeros(n_classes, dtype=np.int64)
    cdef cnp.int64_t[::1] right = np.zeros(n_classes, dtype=np.int64)
    cdef double[::1] gains = np.empty(max(n - 1, 1))
    cdef double[::1] thresholds = np.empty(max(n - 1, 1))
    cdef cnp.intp_t[::1] order
    cdef double[::1] col
    # (gain, feature, threshold) within TIE_EPS of the running maximum, in scan order
    cdef list near = []

    if n < 2:
        return -1, NAN, 0.0
    for i in range(n):
        total[y[i]] += 1
    parent = _impurity(&total[0], n_classes, <double>n, criterion)

    for f in range(n_feat):
        col = np.ascontiguousarray(X[:, f])
        order = np.argsort(col, kind="stable")
        for j in range(n_classes):
            left[j] = 0
        feat_best = -INFINITY
        with nogil:
            for pos in range(n - 1):
                gains[pos] = -INFINITY
                left[y[order[pos]]] += 1
                a = col[order[pos]]
                b = col[order[pos + 1]]
                if not a < b:
                    continue
                nl = pos + 1
                nr = n - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                for j in range(n_classes):
                    right[j] = total[j] - left[j]
                il = _impurity(&left[0], n_classes, <double>nl, criterion)
                ir = _impurity(&right[0], n_classes, <double>nr, criterion)
                gain = parent - (nl * il + nr * ir) / n
                thr = a / 2.0 + b / 2.0
                if thr >= b:
                    thr = a
                gains[pos] = gain
                thresholds[pos] = thr
                if gain > feat_best:
                    feat_best = gain
        if feat_best == -INFINITY or feat_best < best - TIE_EPS:
            continue
        if feat_best > best:
            best = feat_best
            near = [c for c in near if c[0] >= best - TIE_EPS]
        for pos in range(n - 1):
            if gains[pos] >= best - TIE_EPS:
                near.append((gains[pos], f, thresholds[pos]))

    if not near:
        return -1, NAN, 0.0
    gain, f, thr = near[0]
    return f, thr, gain


def apply_tree(const double[:, ::1] X, const cnp.intp_t[::1] feature, const double[::1] threshold,
               const cnp.intp_t[::1] left, const cnp.intp_t[::1] right):
    cdef Py_ssize_t n = X.shape[0], i, node
    out = np.empty(n, dtype=np.intp)
    cdef cnp.intp_t[::1] leaves = out
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            leaves[i] = node
    return out
