# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: CTC forward-backward and the Levenshtein table."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


cdef inline double _lae(double a, double b) nogil:
    # log(exp(a) + exp(b)) without overflow; -inf safe
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def ctc_forward_backward(double[:, ::1] log_probs, long[::1] target):
    """Return (log-likelihood, per-frame label occupancy T x V)."""
    cdef Py_ssize_t T = log_probs.shape[0]
    cdef Py_ssize_t V = log_probs.shape[1]
    cdef Py_ssize_t L = target.shape[0]
    cdef Py_ssize_t S = 2 * L + 1
    cdef Py_ssize_t t, s
    cdef double a, ll, w
    occ_arr = np.zeros((T, V), dtype=np.float64)
    if T == 0:
        return (0.0 if L == 0 else -INFINITY), occ_arr
    ext_arr = np.zeros(S, dtype=np.int64)
    alpha_arr = np.full((T, S), -INFINITY, dtype=np.float64)
    beta_arr = np.full((T, S), -INFINITY, dtype=np.float64)
    cdef long[::1] ext = ext_arr
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] occ = occ_arr
    for s in range(L):
        ext[2 * s + 1] = target[s]

    with nogil:
        alpha[0, 0] = log_probs[0, 0]
        if S > 1:
            alpha[0, 1] = log_probs[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                a = alpha[t - 1, s]
                if s >= 1:
                    a = _lae(a, alpha[t - 1, s - 1])
                if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                    a = _lae(a, alpha[t - 1, s - 2])
                if a != -INFINITY:
                    alpha[t, s] = a + log_probs[t, ext[s]]

        beta[T - 1, S - 1] = log_probs[T - 1, ext[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = log_probs[T - 1, ext[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S):
                a = beta[t + 1, s]
                if s + 1 < S:
                    a = _lae(a, beta[t + 1, s + 1])
                if s + 2 < S and ext[s] != 0 and ext[s] != ext[s + 2]:
                    a = _lae(a, beta[t + 1, s + 2])
                if a != -INFINITY:
                    beta[t, s] = a + log_probs[t, ext[s]]

        ll = alpha[T - 1, S - 1]
        if S > 1:
            ll = _lae(ll, alpha[T - 1, S - 2])
        if ll != -INFINITY:
            for t in range(T):
                for s in range(S):
                    w = alpha[t, s] + beta[t, s]
                    if w != -INFINITY:
                        occ[t, ext[s]] += exp(w - log_probs[t, ext[s]] - ll)
    return ll, occ_arr


def edit_table(long[::1] ref, long[::1] hyp):
    """Full Levenshtein DP table of shape (len(ref)+1, len(hyp)+1)."""
    cdef Py_ssize_t n = ref.shape[0]
    cdef Py_ssize_t m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long best, c
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    cdef long[:, ::1] d = table
    with nogil:
        for i in range(n + 1):
            d[i, 0] = i
        for j in range(m + 1):
            d[0, j] = j
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                best = d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
                c = d[i - 1, j] + 1
                if c < best:
                    best = c
                c = d[i, j - 1] + 1
                if c < best:
                    best = c
                d[i, j] = best
    return table
