"""Error rates and distribution diagnostics.

PER/WER are pooled over the corpus: total edit operations divided by total
reference length.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass(frozen=True)
class EditCounts:
    insertions: int
    deletions: int
    substitutions: int
    ref_length: int

    @property
    def distance(self) -> int:
        return self.insertions + self.deletions + self.substitutions


def _encode(ref, hyp):
    vocab = {}
    a = np.array([vocab.setdefault(x, len(vocab)) for x in ref], dtype=np.int64)
    b = np.array([vocab.setdefault(x, len(vocab)) for x in hyp], dtype=np.int64)
    return a, b


def edit_distance(ref, hyp) -> EditCounts:
    """Minimal Levenshtein alignment counts.

    When several optimal alignments exist, the backtrace takes the diagonal
    (match or substitution) first, then deletion, then insertion.
    """
    a, b = _encode(list(ref), list(hyp))
    d = kernels.edit_table(a, b)
    i, j = len(a), len(b)
    ins = dels = subs = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (a[i - 1] != b[j - 1]):
            subs += int(a[i - 1] != b[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(ins, dels, subs, len(a))


def error_rate(refs, hyps) -> float:
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("total reference length is zero")
    return sum(edit_distance(r, h).distance for r, h in zip(refs, hyps)) / total


def per(refs, hyps) -> float:
    """Phoneme error rate over parallel lists of phoneme sequences."""
    return error_rate(refs, hyps)


def words(transcript) -> list[str]:
    if isinstance(transcript, str):
        return transcript.casefold().split()
    return [w.casefold() for w in transcript]


def wer(refs, hyps) -> float:
    """Word error rate; transcripts may be strings or word lists."""
    return error_rate([words(r) for r in refs], [words(h) for h in hyps])


# ------------------------------------------------------------------ Wasserstein

def wasserstein_1d(a, b) -> float:
    """W1 between two empirical distributions via their quantile functions."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("wasserstein_1d needs two nonempty samples")
    if n == m:
        return float(np.abs(a - b).mean())
    # integrate |Qa(u) - Qb(u)| over the merged breakpoints of both step functions
    u = np.union1d(np.arange(1, n) / n, np.arange(1, m) / m)
    edges = np.concatenate([[0.0], u, [1.0]])
    mid = 0.5 * (edges[:-1] + edges[1:])
    qa = a[np.minimum((mid * n).astype(np.int64), n - 1)]
    qb = b[np.minimum((mid * m).astype(np.int64), m - 1)]
    return float(np.sum(np.diff(edges) * np.abs(qa - qb)))


@dataclass
class WdReport:
    distances: np.ndarray
    ranking: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(self.distances.mean())

    def top(self, k: int = 10) -> np.ndarray:
        return self.distances[self.ranking[:k]]


def wd_per_dimension(src, tgt) -> WdReport:
    """Per-column W1 between two (N, D) samples, ranked largest first."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[1] != tgt.shape[1]:
        raise ValueError(f"expected (N, D) and (M, D), got {src.shape} and {tgt.shape}")
    dist = np.array([wasserstein_1d(src[:, j], tgt[:, j]) for j in range(src.shape[1])])
    ranking = np.argsort(-dist, kind="stable")
    return WdReport(dist, ranking)


def collect_latent_frames(model, trials, layer: int, max_frames: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Valid-position latent vectors of ``trials`` at encoder block ``layer``."""
    if not 0 <= layer < model.cfg.depth:
        raise ValueError(f"layer {layer} out of range 0..{model.cfg.depth - 1}")
    frames = []
    for start in range(0, len(trials), 32):
        chunk = trials[start:start + 32]
        enc = model.encode([t.features for t in chunk], session_ids=[t.session_id for t in chunk])
        z = enc.layers[layer].data
        for b, n in enumerate(enc.lengths):
            frames.append(z[b, :n])
    frames = np.concatenate(frames, axis=0)
    if frames.shape[0] > max_frames:
        idx = np.sort(rng.choice(frames.shape[0], size=max_frames, replace=False))
        frames = frames[idx]
    return frames


def embedding_wd_report(model, source_trials, target_trials, layer: int,
                        max_frames: int = 5000, rng: np.random.Generator | None = None) -> WdReport:
    """Per-dimension source-vs-target W1 of a frozen model's latents."""
    rng = np.random.default_rng(0) if rng is None else rng
    src = collect_latent_frames(model, source_trials, layer, max_frames, rng)
    tgt = collect_latent_frames(model, target_trials, layer, max_frames, rng)
    report = wd_per_dimension(src, tgt)
    report.meta = {"layer": layer, "max_frames": max_frames,
                   "n_source_frames": int(src.shape[0]), "n_target_frames": int(tgt.shape[0])}
    return report
