"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .align_train import evaluate_per, fit, model_from_checkpoint
from .augment import AugmentPolicy, preprocess
from .config import ConfigError, RunConfig
from .ctc import greedy_decode
from .datagen import generate_corpus, read_corpus, substream, write_corpus
from .lm_decode import Lexicon, LmConfig, NGramLM, beam_search, build_ngram
from .metrics import collect_latent_frames, edit_distance, embedding_wd_report, per, wer
from .tta import frozen_session_wer, stream_sessions, tta_stream, write_summary

log = logging.getLogger("sessalign")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
VARIANTS = {
    "align": ("ALIGN", dict()),
    "no_adversarial": ("w/o adversarial loss", dict(no_adversarial=True)),
    "no_tsa": ("w/o temporal stretch augmentation", dict(no_tsa=True)),
}


class DataError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def _load_corpus(path):
    try:
        return read_corpus(path)
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_config(run_dir: Path) -> RunConfig:
    echo = run_dir / "config_echo"
    if not echo.exists():
        raise DataError(f"{run_dir} has no config_echo")
    return RunConfig.load(echo, env_seed=False)


def _load_model(run_dir: Path):
    ckpt = run_dir / "model.ckpt"
    if not ckpt.exists():
        raise DataError(f"{run_dir} has no model.ckpt")
    model, _ = model_from_checkpoint(ckpt)
    return model


def _lm_and_lexicon(corpus, lmcfg: LmConfig, cache_dir: Path | None = None):
    lexicon = Lexicon(corpus.lexicon)
    lm = build_ngram(corpus.lm_sentences, lmcfg.order, lmcfg.discount, vocab=sorted(corpus.lexicon))
    if cache_dir is not None:
        lm.write_arpa(cache_dir / "lm.arpa")
        lexicon.write(cache_dir / "lexicon.txt")
    return lm, lexicon


def _apply_flags(cfg: RunConfig, no_adversarial=False, no_tsa=False) -> RunConfig:
    if no_adversarial:
        cfg.train = dataclasses.replace(cfg.train, no_adversarial=True)
    if no_tsa:
        cfg.augment = dataclasses.replace(cfg.augment, tsa=False)
    return cfg


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out or f"runs/{cfg.name}/corpus")
    corpus = generate_corpus(cfg.datagen)
    write_corpus(corpus, out)
    files = sorted(p for p in out.iterdir() if p.name != "manifest.json")
    manifest = {"seed": cfg.seed, "partition": corpus.partition,
                "files": {p.name: _sha256(p) for p in files}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"corpus written to {out}")
    for role, ids in corpus.partition.items():
        print(f"  {role}: sessions {ids}")
    return EXIT_OK


def train_run(cfg: RunConfig, corpus, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(run_dir / "config_echo")
    view = corpus.training_view()
    return fit(view, cfg.model, cfg.train, cfg.augment, run_dir=run_dir,
               save_every_eval=True, config_echo=cfg.to_dict())


def cmd_train(args) -> int:
    cfg = _apply_flags(RunConfig.load(args.config), args.no_adversarial, args.no_tsa)
    corpus = _load_corpus(args.corpus)
    run_dir = Path(args.out or f"runs/{args.name or cfg.name}")
    try:
        res = train_run(cfg, corpus, run_dir)
    except ValueError as e:
        raise DataError(str(e)) from e
    print(f"best validation PER {res.best_val_per:.4f} at step {res.best_step}; run in {run_dir}")
    return EXIT_OK


def eval_rows(model, corpus, split: str, policy: AugmentPolicy, lm=None, lexicon=None,
              lmcfg: LmConfig | None = None):
    """Per-session rows plus a per-sentence dump."""
    trials = corpus.trials(split)
    if not trials:
        raise DataError(f"split {split!r} has no trials")
    by_session = {}
    for t in trials:
        by_session.setdefault(t.session_id, []).append(t)
    rows, sentences = [], []
    for sid in sorted(by_session):
        ts = by_session[sid]
        lps = model.log_probs([preprocess(t.features, policy) for t in ts], [sid] * len(ts))
        hyps = [greedy_decode(lp) for lp in lps]
        row = {"session": sid, "n_trials": len(ts), "per": per([t.labels for t in ts], hyps)}
        words = None
        if lm is not None:
            words = [beam_search(lp, lm, lexicon, lmcfg.beam_width, lmcfg.acoustic_scale,
                                 lmcfg.blank_penalty).words for lp in lps]
            row["wer"] = wer([t.transcript for t in ts], words)
        rows.append(row)
        for i, (t, h) in enumerate(zip(ts, hyps)):
            e = edit_distance(t.labels, h)
            rec = {"session": sid, "index": i, "ref_len": e.ref_length, "edits": e.distance,
                   "hyp": " ".join(map(str, h))}
            if words is not None:
                rec["words"] = " ".join(words[i])
            sentences.append(rec)
    return rows, sentences


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg = _run_config(run_dir)
    model = _load_model(run_dir)
    corpus = _load_corpus(args.corpus)
    lm = lexicon = None
    if args.lm:
        lm, lexicon = _lm_and_lexicon(corpus, cfg.lm, run_dir)
    rows, sentences = eval_rows(model, corpus, args.split, cfg.augment, lm, lexicon, cfg.lm)
    total_len = sum(s["ref_len"] for s in sentences)
    pooled = {"session": "pooled", "n_trials": len(sentences),
              "per": sum(s["edits"] for s in sentences) / total_len}
    if args.lm:
        all_t = corpus.trials(args.split)
        pooled["wer"] = wer([t.transcript for t in all_t], [s["words"].split() for s in sentences])
    out = run_dir / f"eval_{args.split}.csv"
    fields = ["session", "n_trials", "per"] + (["wer"] if args.lm else [])
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows + [pooled])
    with open(run_dir / f"eval_{args.split}_sentences.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(sentences[0]))
        w.writeheader()
        w.writerows(sentences)
    for r in rows + [pooled]:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


def cmd_tta(args) -> int:
    run_dir = Path(args.run)
    cfg = _run_config(run_dir)
    corpus = _load_corpus(args.corpus)
    lm, lexicon = _lm_and_lexicon(corpus, cfg.lm)
    modes = [args.init_mode] if args.init_mode != "both" else ["from_first_target", "from_first_test"]
    summary = []
    for mode in modes:
        tcfg = dataclasses.replace(cfg.tta, init_mode=mode)
        sessions = stream_sessions(corpus, mode)
        frozen = frozen_session_wer(_load_model(run_dir), sessions, lm, lexicon, cfg.lm, cfg.augment)
        trace = tta_stream(_load_model(run_dir), sessions, tcfg, lm, lexicon, cfg.lm, cfg.augment)
        trace.write_jsonl(run_dir / f"tta_{mode}.jsonl")
        for sid, _ in sessions:
            summary.append({"session": sid, "init_mode": mode, "frozen_wer": frozen[sid],
                            "tta_wer": trace.session_wer[sid]})
            print(f"{mode} session {sid}: frozen WER {frozen[sid]:.4f}  TTA WER {trace.session_wer[sid]:.4f}")
    write_summary(run_dir / "tta_summary.csv", summary)
    return EXIT_OK


def variant_label(cfg: RunConfig) -> str:
    if cfg.train.no_adversarial and not cfg.augment.tsa:
        return "w/o adversarial loss, w/o temporal stretch augmentation"
    if cfg.train.no_adversarial:
        return VARIANTS["no_adversarial"][0]
    if not cfg.augment.tsa:
        return VARIANTS["no_tsa"][0]
    return VARIANTS["align"][0]


def cmd_report(args) -> int:
    corpus = _load_corpus(args.corpus)
    out = Path(args.out or "runs/report")
    out.mkdir(parents=True, exist_ok=True)
    columns = []
    wd_cols = {}
    dumps = {}
    for rd in map(Path, args.runs):
        cfg = _run_config(rd)
        model = _load_model(rd)
        rng = substream(cfg.seed, "report")
        val = corpus.trials("validation")
        test = corpus.trials("test")
        src = corpus.trials("source")
        tgt = corpus.trials("target") + val
        col = {"run": rd.name, "variant": variant_label(cfg),
               "source_per": evaluate_per(model, src, cfg.augment),
               "heldout_per": evaluate_per(model, val, cfg.augment),
               "test_per": evaluate_per(model, test, cfg.augment)}
        if args.lm:
            lm, lexicon = _lm_and_lexicon(corpus, cfg.lm)
            lps = model.log_probs([preprocess(t.features, cfg.augment) for t in val],
                                  [t.session_id for t in val])
            col["heldout_wer"] = wer([t.transcript for t in val],
                                     [beam_search(lp, lm, lexicon, cfg.lm.beam_width, cfg.lm.acoustic_scale,
                                                  cfg.lm.blank_penalty).words for lp in lps])
        layer = model.cfg.rep_layer_index
        prep = lambda ts: [dataclasses.replace(t, features=preprocess(t.features, cfg.augment)) for t in ts]
        rep = embedding_wd_report(model, prep(src), prep(tgt), layer, cfg.report.wd_max_frames, rng)
        col["wd_mean"] = rep.mean
        columns.append(col)
        wd_cols[rd.name] = rep.distances
        n = cfg.report.embedding_dump_frames
        dumps[f"{rd.name}__source"] = collect_latent_frames(model, prep(src), layer, n, rng)
        dumps[f"{rd.name}__target"] = collect_latent_frames(model, prep(tgt), layer, n, rng)

    keys = list(dict.fromkeys(k for c in columns for k in c))
    with open(out / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric"] + [c["run"] for c in columns])
        for k in keys[1:]:
            w.writerow([k] + [c.get(k, "") for c in columns])
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "heldout_per", "test_per"])
        for c in columns:
            w.writerow([c["variant"], c["heldout_per"], c["test_per"]])
    with open(out / "wd_per_dimension.csv", "w", newline="") as f:
        w = csv.writer(f)
        names = list(wd_cols)
        w.writerow(["dim"] + names)
        D = len(next(iter(wd_cols.values())))
        for j in range(D):
            w.writerow([j] + [repr(float(wd_cols[n][j])) for n in names])
    np.savez(out / "embeddings.npz", **dumps)
    for c in columns:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in c.items()))
    print(f"report written to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = RunConfig.load(args.config)
    corpus = _load_corpus(args.corpus)
    root = Path(args.out or f"runs/{base.name}_ablation")
    for key, (label, flags) in VARIANTS.items():
        cfg = _apply_flags(RunConfig.load(args.config), **flags)
        res = train_run(cfg, corpus, root / key)
        print(f"{label}: best validation PER {res.best_val_per:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sessalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic multi-session corpus")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a decoder")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--name")
    t.add_argument("--out")
    t.add_argument("--no-adversarial", action="store_true")
    t.add_argument("--no-tsa", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-session PER (and WER with --lm)")
    e.add_argument("run")
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="validation", choices=["source", "target", "validation", "test"])
    e.add_argument("--lm", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("tta", help="test-time adaptation over a session stream")
    a.add_argument("run")
    a.add_argument("--corpus", required=True)
    a.add_argument("--init-mode", default="from_first_test",
                   choices=["from_first_target", "from_first_test", "both"])
    a.set_defaults(func=cmd_tta)

    r = sub.add_parser("report", help="compare runs: PER/WER, WD, embeddings")
    r.add_argument("runs", nargs="+")
    r.add_argument("--corpus", required=True)
    r.add_argument("--out")
    r.add_argument("--lm", action="store_true")
    r.set_defaults(func=cmd_report)

    b = sub.add_parser("ablate", help="train ALIGN and its ablations on one corpus")
    b.add_argument("--config", required=True)
    b.add_argument("--corpus", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except dc.NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
