"""Frozen vs adapted WER on drifted streams, across drift strengths.

Trains one model per seed from configs/tta.toml, then streams synthetic
sessions with growing drift and reports the final-session WER with and
without TTA. Purely descriptive: no threshold is applied.

    python3 benchmarks/tta_crossover.py [--seeds 0 1] [--drifts 0 3 6 12] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from sessalign.align_train import fit
from sessalign.config import RunConfig
from sessalign.datagen import generate_corpus, shifted_sessions
from sessalign.lm_decode import Lexicon, build_ngram
from sessalign.tta import clone_model, frozen_session_wer, tta_stream

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "tta.toml"


def run(seeds, drifts, n_sessions):
    rows = []
    for seed in seeds:
        base = RunConfig.load(CONFIG, env_seed=False)
        cfg = RunConfig.from_dict({**base.to_dict(), "seed": seed}, env_seed=False)
        corpus = generate_corpus(cfg.datagen)
        model = fit(corpus.training_view(), cfg.model, cfg.train, cfg.augment).model
        lm = build_ngram(corpus.lm_sentences, cfg.lm.order, cfg.lm.discount, vocab=sorted(corpus.lexicon))
        lex = Lexicon(corpus.lexicon)
        for drift in drifts:
            sessions = [(s.index, s.trials) for s in shifted_sessions(corpus, n_sessions, drift)]
            last = sessions[-1][0]
            frozen = frozen_session_wer(model, sessions, lm, lex, cfg.lm, cfg.augment)
            trace = tta_stream(clone_model(model), sessions, cfg.tta, lm, lex, cfg.lm, cfg.augment)
            rows.append({"seed": seed, "drift": drift, "frozen_wer": frozen[last],
                         "tta_wer": trace.session_wer[last]})
            print(f"seed {seed} drift {drift:5.1f}: frozen {frozen[last]:.4f} tta {trace.session_wer[last]:.4f}",
                  flush=True)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--drifts", type=float, nargs="+", default=[0.0, 3.0, 6.0, 12.0])
    ap.add_argument("--sessions", type=int, default=4)
    ap.add_argument("--json", type=Path)
    args = ap.parse_args(argv)
    rows = run(args.seeds, args.drifts, args.sessions)
    print("\n drift   frozen      tta   improvement")
    for d in args.drifts:
        sel = [r for r in rows if r["drift"] == d]
        f, t = np.mean([r["frozen_wer"] for r in sel]), np.mean([r["tta_wer"] for r in sel])
        print(f"{d:6.1f}  {f:7.4f}  {t:7.4f}  {f - t:+8.4f}")
    if args.json:
        args.json.write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
