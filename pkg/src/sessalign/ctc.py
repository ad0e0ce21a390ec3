"""Connectionist temporal classification: loss, oracle and greedy decoding.

Label 0 is the blank throughout.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffcore import Tensor, _node, _acc

BLANK = 0
NORM_TOL = 1e-9


def logsumexp_rows(z):
    m = z.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def repeat_count(labels) -> int:
    """Number of adjacent equal pairs; each needs a separating blank."""
    return sum(1 for a, b in zip(labels[:-1], labels[1:]) if a == b)


def min_frames(labels) -> int:
    return len(labels) + repeat_count(labels)


@dataclass
class CtcInstance:
    log_probs: np.ndarray
    target: list

    def validate(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 2:
            raise ValueError(f"log_probs must be T x V, got shape {lp.shape}")
        V = lp.shape[1]
        for k in self.target:
            if not 1 <= int(k) < V:
                raise ValueError(f"label {k} out of range 1..{V - 1}")
        if lp.shape[0]:
            dev = np.abs(logsumexp_rows(lp)).max()
            if dev > NORM_TOL:
                raise ValueError(f"log_probs rows not normalized (max |logsumexp| = {dev:.3g})")
        return lp


def ctc_loss(log_probs, target) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. logits.

    ``log_probs`` must be row-normalized.  The gradient is taken through the
    log-softmax, i.e. ``softmax - occupancy``, so it applies directly to the
    unnormalized logits that produced ``log_probs``.  Infeasible targets give
    ``(inf, zeros)``.
    """
    lp = CtcInstance(log_probs, list(target)).validate()
    ll, occ = kernels.ctc_forward_backward(np.ascontiguousarray(lp),
                                           np.asarray(target, dtype=np.int64))
    if ll == -math.inf:
        return math.inf, np.zeros_like(lp)
    return -ll, np.exp(lp) - occ


def ctc_log_likelihood(log_probs, target) -> float:
    """Forward-recursion log P(target) for arbitrary (unnormalized) log scores."""
    lp = np.ascontiguousarray(log_probs, dtype=np.float64)
    ll, _ = kernels.ctc_forward_backward(lp, np.asarray(target, dtype=np.int64))
    return float(ll)


def collapse(path) -> list:
    """Merge adjacent duplicates, then drop blanks."""
    out = []
    prev = None
    for k in path:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def ctc_brute_force(probs, target, max_paths: int = 10 ** 7) -> float:
    """-log of the summed probability of every frame path collapsing to ``target``."""
    probs = np.asarray(probs, dtype=np.float64)
    T, V = probs.shape
    if V ** T > max_paths:
        raise ValueError(f"instance too large for enumeration: {V}^{T} paths")
    target = [int(k) for k in target]
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            total += math.prod(probs[t, k] for t, k in enumerate(path))
    return math.inf if total == 0.0 else -math.log(total)


def greedy_decode(log_probs) -> list:
    # np.argmax returns the first maximum, so ties go to the lowest id
    return collapse(np.argmax(np.asarray(log_probs), axis=1))


def ctc_batch_loss(logits: Tensor, targets, lengths) -> tuple[Tensor, int]:
    """Mean CTC loss over a padded batch of logits (B, P, V).

    Trials whose target cannot be aligned within their valid length are left
    out of the mean; their count is returned alongside the loss tensor.
    """
    B, P, V = logits.shape
    data = logits.data
    grad = np.zeros_like(data)
    losses = []
    for b in range(B):
        n = int(lengths[b])
        z = data[b, :n]
        lp = z - logsumexp_rows(z)
        ll, occ = kernels.ctc_forward_backward(np.ascontiguousarray(lp),
                                               np.asarray(targets[b], dtype=np.int64))
        if ll == -math.inf:
            continue
        losses.append(-ll)
        grad[b, :n] = np.exp(lp) - occ
    kept = len(losses)
    skipped = B - kept
    if kept == 0:
        return Tensor(0.0), skipped
    grad /= kept
    value = math.fsum(losses) / kept

    def fn(g):
        _acc(logits, g * grad)

    return _node(value, (logits,), fn), skipped
