"""Independent reference implementations used as test oracles.

None of these import from ``sessalign``; they are deliberately naive.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def collapse(path, blank=0):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def ctc_brute_logprob(log_probs, target) -> float:
    """log sum over all frame paths collapsing to ``target`` (rows need not be normalized)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    terms = [sum(lp[t, k] for t, k in enumerate(path))
             for path in itertools.product(range(V), repeat=T)
             if collapse(path) == list(target)]
    if not terms:
        return -math.inf
    m = max(terms)
    return m + math.log(sum(math.exp(x - m) for x in terms))


def edit_distance_exhaustive(a, b) -> int:
    """Minimum cost over every alignment path, enumerated without a DP table."""
    a, b = list(a), list(b)
    best = [math.inf]

    def walk(i, j, cost):
        if cost >= best[0]:
            return
        if i == len(a) and j == len(b):
            best[0] = cost
            return
        if i < len(a) and j < len(b):
            walk(i + 1, j + 1, cost + (a[i] != b[j]))
        if i < len(a):
            walk(i + 1, j, cost + 1)
        if j < len(b):
            walk(i, j + 1, cost + 1)

    walk(0, 0, 0)
    return int(best[0])


def w1_sorted_pairing(a, b) -> float:
    """W1 by replicating both samples to a common size and pairing in sorted order."""
    a, b = np.sort(np.ravel(a)), np.sort(np.ravel(b))
    n, m = a.size, b.size
    L = n * m // math.gcd(n, m)
    return float(np.mean(np.abs(np.repeat(a, L // n) - np.repeat(b, L // m))))


def linear_resample(x, r):
    """Explicit loop version of end-aligned linear interpolation to floor(r*T) rows."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    Tn = int(math.floor(r * T))
    out = np.empty((Tn,) + x.shape[1:])
    for j in range(Tn):
        pos = j * (T - 1) / (Tn - 1)
        i = min(int(math.floor(pos)), T - 2)
        w = pos - i
        out[j] = (1 - w) * x[i] + w * x[i + 1]
    return out


def beam_exhaustive(log_probs, lexicon: dict, lm_sentence_logprob, acoustic_scale, blank_penalty,
                    max_words=3):
    """Best (score, words) over every word sequence of 1..max_words lexicon words."""
    lp = np.array(log_probs, dtype=np.float64)
    lp[:, 0] -= blank_penalty
    best = (-math.inf, None)
    results = []
    for n in range(1, max_words + 1):
        for ws in itertools.product(sorted(lexicon), repeat=n):
            phon = [k for w in ws for k in lexicon[w]]
            ac = ctc_brute_logprob(lp, phon)
            if ac == -math.inf:
                continue
            s = acoustic_scale * ac + lm_sentence_logprob(list(ws))
            results.append((s, list(ws)))
            if s > best[0]:
                best = (s, list(ws))
    return best, results


def central_fd(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences (x is restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        v = x[i]
        x[i] = v + eps
        fp = f()
        x[i] = v - eps
        fm = f()
        x[i] = v
        g[i] = (fp - fm) / (2 * eps)
    return g
