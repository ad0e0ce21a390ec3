"""Pure-NumPy versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same two functions with the same return types so the
selection in :mod:`sessalign.kernels` is invisible to callers.
"""
import numpy as np

NEG_INF = -np.inf


def ctc_forward_backward(log_probs, target):
    """Return (log-likelihood, per-frame label occupancy T x V)."""
    log_probs = np.ascontiguousarray(log_probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T, V = log_probs.shape
    L = target.shape[0]
    S = 2 * L + 1
    occ = np.zeros((T, V))
    if T == 0:
        return (0.0 if L == 0 else NEG_INF), occ
    ext = np.zeros(S, dtype=np.int64)
    ext[1::2] = target
    # skip transition s-2 -> s allowed only onto a label that differs from ext[s-2]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    emit = log_probs[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            a = prev.copy()
            a[1:] = np.logaddexp(a[1:], prev[:-1])
            a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
            alpha[t] = a + emit[t]

        beta = np.full((T, S), NEG_INF)
        beta[T - 1, S - 1] = emit[T - 1, S - 1]
        if S > 1:
            beta[T - 1, S - 2] = emit[T - 1, S - 2]
        skip_fwd = np.zeros(S, dtype=bool)
        skip_fwd[:-2] = skip[2:]
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1]
            b = nxt.copy()
            b[:-1] = np.logaddexp(b[:-1], nxt[1:])
            b[:-2] = np.where(skip_fwd[:-2], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
            beta[t] = b + emit[t]

    ll = alpha[T - 1, S - 1]
    if S > 1:
        ll = np.logaddexp(ll, alpha[T - 1, S - 2])
    ll = float(ll)
    if ll == NEG_INF:
        return ll, occ
    post = np.exp(alpha + beta - emit - ll)
    for s in range(S):
        occ[:, ext[s]] += post[:, s]
    return ll, occ


def edit_table(ref, hyp):
    """Full Levenshtein DP table of shape (len(ref)+1, len(hyp)+1)."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        r = ref[i - 1]
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j - 1] + (r != hyp[j - 1]),
                d[i - 1, j] + 1,
                d[i, j - 1] + 1,
            )
    return d
