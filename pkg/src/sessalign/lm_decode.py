"""Word-level decoding with a lexicon-constrained CTC prefix beam search.

A hypothesis is scored as ``acoustic_scale * log P_enc + log P_lm``.  The
acoustic term is the CTC prefix probability of the hypothesis' phoneme
string under blank-penalized frame log-probs; the LM term is the n-gram
log-probability of its completed words (plus ``</s>`` for final
hypotheses).  The LM is applied when a word completes, with no look-ahead.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentPolicy, preprocess
from .ctc import BLANK
from .datagen import read_lexicon
from .metrics import wer

BOS, EOS = "<s>", "</s>"
LN10 = math.log(10.0)
ARPA_FLOOR = -99.0   # log10 "probability" conventionally written for <s>


# ------------------------------------------------------------------ n-gram LM

class NGramLM:
    """Backoff n-gram model with ARPA semantics (natural-log values internally).

    ``logp[(h..., w)]`` holds explicit entries; an absent entry backs off as
    ``bow[h] + logp(w | h[1:])`` with ``bow`` defaulting to 0.
    """

    def __init__(self, order: int, vocab: list[str], logp: dict, bow: dict, meta=None):
        self.order = order
        self.vocab = list(vocab)           # predictable tokens: words and </s>
        self.logp = logp
        self.bow = bow
        self.meta = meta or {}

    def log_prob(self, word: str, context=()) -> float:
        ctx = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        backoff = 0.0
        while True:
            key = ctx + (word,)
            if key in self.logp:
                return backoff + self.logp[key]
            if not ctx:
                return -math.inf
            backoff += self.bow.get(ctx, 0.0)
            ctx = ctx[1:]

    def sentence_log_prob(self, words, eos: bool = True) -> float:
        hist = [BOS]
        total = 0.0
        for w in list(words) + ([EOS] if eos else []):
            total += self.log_prob(w, hist)
            hist.append(w)
        return total

    def contexts(self) -> list[tuple]:
        return sorted({k[:-1] for k in self.logp if len(k) > 1} | set(self.bow))

    # ----------------------------------------------------------------- ARPA

    def write_arpa(self, path) -> None:
        by_order = defaultdict(list)
        for k, v in self.logp.items():
            by_order[len(k)].append((k, v))
        unigrams = dict(by_order[1])
        lines = ["\\data\\"]
        n_uni = len(unigrams) + (1 if (BOS,) not in unigrams else 0)
        for k in range(1, self.order + 1):
            lines.append(f"ngram {k}={n_uni if k == 1 else len(by_order[k])}")
        for k in range(1, self.order + 1):
            lines.append("")
            lines.append(f"\\{k}-grams:")
            entries = sorted(by_order[k])
            if k == 1 and (BOS,) not in unigrams:
                entries = [((BOS,), None)] + entries
            for key, v in entries:
                p10 = ARPA_FLOOR if v is None else v / LN10
                row = f"{p10!r}\t{' '.join(key)}"
                if k < self.order and key in self.bow:
                    row += f"\t{self.bow[key] / LN10!r}"
                lines.append(row)
        lines += ["", "\\end\\", ""]
        Path(path).write_text("\n".join(lines))

    @classmethod
    def read_arpa(cls, path) -> "NGramLM":
        logp, bow = {}, {}
        order = 0
        section = None
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line in ("\\data\\",):
                continue
            if line == "\\end\\":
                break
            if line.startswith("ngram "):
                order = max(order, int(line.split()[1].split("=")[0]))
                continue
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:line.index("-")])
                continue
            parts = line.split("\t")
            if section is None or len(parts) < 2:
                raise ValueError(f"{path}: malformed ARPA line {raw!r}")
            key = tuple(parts[1].split())
            if len(key) != section:
                raise ValueError(f"{path}: {section}-gram line has {len(key)} tokens")
            p10 = float(parts[0])
            if key != (BOS,):
                logp[key] = p10 * LN10
            elif p10 > ARPA_FLOOR:
                logp[key] = p10 * LN10
            if len(parts) > 2:
                bow[key] = float(parts[2]) * LN10
        vocab = sorted(k[0] for k in logp if len(k) == 1 and k[0] != BOS)
        return cls(order, vocab, logp, bow, {"source": str(path)})


def build_ngram(sentences, n: int = 3, discount: float = 0.4, vocab=None) -> NGramLM:
    """Absolute-discount backoff LM.

    Unigrams interpolate the discounted ML estimate with a uniform
    distribution over the vocabulary, so every word (seen or not) gets
    positive probability.  Higher orders discount each seen continuation by
    ``discount`` and hand the freed mass to the lower order, renormalised over
    the unseen continuations.
    """
    if n not in (2, 3):
        raise ValueError(f"order must be 2 or 3, got {n}")
    if not 0.0 < discount < 1.0:
        raise ValueError("discount must lie in (0, 1)")
    sentences = [list(s) for s in sentences]
    if not any(sentences):
        raise ValueError("empty LM corpus")
    words = set(w for s in sentences for w in s) | set(vocab or ())
    V = sorted(words) + [EOS]
    counts = [Counter() for _ in range(n + 1)]
    for s in sentences:
        toks = [BOS] + s + [EOS]
        for i in range(1, len(toks)):
            for k in range(1, n + 1):
                if i - k + 1 < 0:
                    break
                counts[k][tuple(toks[i - k + 1:i + 1])] += 1

    logp, bow = {}, {}
    N = sum(counts[1].values())
    uniform = discount * len(counts[1]) / N / len(V)
    for w in V:
        c = counts[1].get((w,), 0)
        logp[(w,)] = math.log(max(c - discount, 0.0) / N + uniform)

    def lower(w, ctx):
        return math.exp(_lookup(logp, bow, w, ctx))

    for k in range(2, n + 1):
        by_ctx = defaultdict(dict)
        for key, c in counts[k].items():
            by_ctx[key[:-1]][key[-1]] = c
        for ctx in sorted(by_ctx):
            seen = by_ctx[ctx]
            total = sum(seen.values())
            d = discount if len(seen) < len(V) else 0.0
            mass = d * len(seen) / total
            lower_seen = sum(lower(w, ctx[1:]) for w in seen)
            for w, c in seen.items():
                logp[ctx + (w,)] = math.log((c - d) / total)
            if mass > 0:
                bow[ctx] = math.log(mass / (1.0 - lower_seen))
    return NGramLM(n, V, logp, bow, {"discount": discount, "order": n, "smoothing": "absolute-discount backoff",
                                     "n_sentences": len(sentences)})


def _lookup(logp, bow, w, ctx):
    backoff = 0.0
    while True:
        if ctx + (w,) in logp:
            return backoff + logp[ctx + (w,)]
        if not ctx:
            return -math.inf
        backoff += bow.get(ctx, 0.0)
        ctx = ctx[1:]


# -------------------------------------------------------------------- lexicon

class Lexicon:
    """Word -> pronunciation map with a phoneme prefix tree."""

    def __init__(self, entries: dict):
        self.entries = {w: tuple(int(k) for k in p) for w, p in entries.items()}
        for w, p in self.entries.items():
            if not p:
                raise ValueError(f"empty pronunciation for {w!r}")
            if BLANK in p:
                raise ValueError(f"pronunciation of {w!r} contains the blank")
        # node 0 is the root; children[node][phoneme] -> node
        self.children: list[dict] = [{}]
        self.phoneme: list[int | None] = [None]
        self.ends: list[list[str]] = [[]]
        for w in sorted(self.entries):
            node = 0
            for k in self.entries[w]:
                nxt = self.children[node].get(k)
                if nxt is None:
                    nxt = len(self.children)
                    self.children[node][k] = nxt
                    self.children.append({})
                    self.phoneme.append(k)
                    self.ends.append([])
                node = nxt
            self.ends[node].append(w)

    @classmethod
    def from_file(cls, path) -> "Lexicon":
        return cls(read_lexicon(path))

    def write(self, path) -> None:
        with open(path, "w") as f:
            for w in sorted(self.entries):
                f.write(f"{w}\t{' '.join(map(str, self.entries[w]))}\n")

    def __contains__(self, w):
        return w in self.entries

    def __len__(self):
        return len(self.entries)

    def pronounce(self, words) -> list[int]:
        out = []
        for w in words:
            if w not in self.entries:
                raise KeyError(f"word {w!r} not in lexicon")
            out.extend(self.entries[w])
        return out


# ---------------------------------------------------------------- beam search

def penalize_blank(log_probs, penalty: float) -> np.ndarray:
    """Subtract ``penalty`` from the blank column; rows are not renormalised."""
    if penalty < 0:
        raise ValueError("blank penalty must be >= 0")
    out = np.array(log_probs, dtype=np.float64, copy=True)
    out[:, BLANK] -= penalty
    return out


@dataclass
class BeamHyp:
    words: tuple
    node: int
    log_pb: float
    log_pnb: float
    lm: float

    @property
    def acoustic(self) -> float:
        return float(np.logaddexp(self.log_pb, self.log_pnb))

    def score(self, acoustic_scale: float) -> float:
        return acoustic_scale * self.acoustic + self.lm


@dataclass
class BeamResult:
    words: list
    score: float
    acoustic: float
    lm: float
    empty: bool
    beam: list = field(default_factory=list)


def _sort_key(h: BeamHyp, scale: float):
    return (-h.score(scale), h.words, h.node)


def beam_search(log_probs, lm: NGramLM, lexicon: Lexicon, beam_width: int = 18,
                acoustic_scale: float = 0.8, blank_penalty: float = math.log(2.0),
                on_frame=None) -> BeamResult:
    """Lexicon-constrained CTC prefix beam search.

    States are keyed by (completed words, trie node).  Appending a phoneme
    that finishes a word also feeds the closed state (words + w, root), so
    both carry the same prefix probability from then on.  ``on_frame`` is
    called with the surviving hypotheses after each frame.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    lp = penalize_blank(log_probs, blank_penalty)
    T, V = lp.shape
    lex = lexicon
    ninf = -math.inf
    lm_cache = {}

    def lm_score(words):
        if words not in lm_cache:
            lm_cache[words] = lm.sentence_log_prob(words, eos=False)
        return lm_cache[words]

    def last_phoneme(words, node):
        if node:
            return lex.phoneme[node]
        return lex.entries[words[-1]][-1] if words else None

    beam = {((), 0): BeamHyp((), 0, 0.0, ninf, 0.0)}
    for t in range(T):
        row = lp[t]
        nxt: dict = {}

        def get(words, node):
            key = (words, node)
            h = nxt.get(key)
            if h is None:
                h = nxt[key] = BeamHyp(words, node, ninf, ninf, lm_score(words))
            return h

        for (words, node), h in beam.items():
            total = np.logaddexp(h.log_pb, h.log_pnb)
            # blank keeps the prefix
            s = get(words, node)
            s.log_pb = np.logaddexp(s.log_pb, total + row[BLANK])
            last = last_phoneme(words, node)
            if last is not None:
                # repeated phoneme without a blank collapses onto the same prefix
                s.log_pnb = np.logaddexp(s.log_pnb, h.log_pnb + row[last])
            for k, child in lex.children[node].items():
                inc = (h.log_pb if k == last else total) + row[k]
                targets = [(words, child)] + [(words + (w,), 0) for w in lex.ends[child]]
                for tw, tn in targets:
                    e = get(tw, tn)
                    e.log_pnb = np.logaddexp(e.log_pnb, inc)
        live = [h for h in nxt.values() if h.acoustic > ninf]
        hyps = sorted(live, key=lambda h: _sort_key(h, acoustic_scale))[:beam_width]
        beam = {(h.words, h.node): h for h in hyps}
        if on_frame is not None:
            on_frame(t, hyps)

    finals = []
    for h in beam.values():
        if h.node == 0 and h.words:
            finals.append(BeamHyp(h.words, 0, h.log_pb, h.log_pnb,
                                  h.lm + lm.log_prob(EOS, (BOS,) + h.words)))
    if not finals:
        return BeamResult([], ninf, ninf, ninf, True, list(beam.values()))
    finals.sort(key=lambda h: _sort_key(h, acoustic_scale))
    best = finals[0]
    return BeamResult(list(best.words), best.score(acoustic_scale), best.acoustic, best.lm, False, finals)


# --------------------------------------------------------------- corpus level

@dataclass
class LmConfig:
    order: int = 3
    discount: float = 0.4
    beam_width: int = 18
    acoustic_scale: float = 0.8
    blank_penalty: float = math.log(2.0)
    penalty_stage: str = "before_scale"     # penalty applied to raw log-probs, then scaled

    def validate(self):
        if self.order not in (2, 3):
            raise ValueError("lm order must be 2 or 3")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.acoustic_scale <= 0:
            raise ValueError("acoustic_scale must be positive")
        if self.blank_penalty < 0:
            raise ValueError("blank_penalty must be >= 0")
        return self

    def echo(self) -> dict:
        return {"beam_width": self.beam_width, "acoustic_scale": self.acoustic_scale,
                "blank_penalty": self.blank_penalty, "penalty_stage": self.penalty_stage,
                "order": self.order, "discount": self.discount}


PRESETS = {
    "t12": LmConfig(beam_width=18, acoustic_scale=0.8, blank_penalty=math.log(2.0)),
    "t15": LmConfig(beam_width=17, acoustic_scale=0.5, blank_penalty=math.log(9.0)),
}


@dataclass
class DecodeResult:
    transcripts: list
    references: list
    wer: float
    empty_flags: list
    scores: list
    meta: dict


def decode_log_probs(log_probs_list, lm, lexicon, cfg: LmConfig) -> list[BeamResult]:
    return [beam_search(lp, lm, lexicon, cfg.beam_width, cfg.acoustic_scale, cfg.blank_penalty)
            for lp in log_probs_list]


def decode_corpus(model, trials, lm: NGramLM, lexicon: Lexicon, cfg: LmConfig,
                  policy: AugmentPolicy | None = None) -> DecodeResult:
    """Beam-search every trial with a frozen model and score WER."""
    cfg.validate()
    policy = policy or AugmentPolicy()
    feats = [preprocess(t.features, policy) for t in trials]
    lps = model.log_probs(feats, [t.session_id for t in trials])
    res = decode_log_probs(lps, lm, lexicon, cfg)
    refs = [list(t.transcript) for t in trials]
    hyps = [r.words for r in res]
    return DecodeResult(hyps, refs, wer(refs, hyps), [r.empty for r in res], [r.score for r in res],
                        {"lm": cfg.echo(), "lm_meta": lm.meta})
