"""Online test-time adaptation from LM pseudo-labels.

Each incoming trial is decoded with the current weights; its beam-search
transcript is mapped back to phonemes and used as a CTC target for one
optimizer step on ``n_aug`` noisy copies of the trial.  Weights (and the
optimizer moments) carry forward to the next trial.  Trial WER is scored on
the transcript produced before that trial's update.
"""
from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .augment import AugmentPolicy, add_baseline_shift, add_white_noise, preprocess
from .ctc import ctc_batch_loss, greedy_decode, min_frames
from .datagen import substream
from .lm_decode import LmConfig, Lexicon, NGramLM, beam_search
from .metrics import per, wer

INIT_MODES = ("from_first_target", "from_first_test")


@dataclass
class TtaConfig:
    n_aug: int = 64
    white_noise_sd: float = 0.2
    baseline_shift_sd: float = 0.05
    tta_lr: float = 3e-3
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    init_mode: str = "from_first_test"
    update_domain_heads: bool = False
    seed: int = 0

    def validate(self):
        if self.n_aug < 1:
            raise ValueError("n_aug must be >= 1")
        if self.tta_lr < 0:
            raise ValueError("tta_lr must be >= 0")
        if self.white_noise_sd < 0 or self.baseline_shift_sd < 0:
            raise ValueError("augmentation sds must be >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        return self


PRESETS = {
    "t12": TtaConfig(n_aug=64, tta_lr=3e-3, white_noise_sd=0.2, baseline_shift_sd=0.05),
    "t15": TtaConfig(n_aug=64, tta_lr=5e-4, white_noise_sd=1.0, baseline_shift_sd=0.2),
}


@dataclass
class TrialRecord:
    session_id: int
    index: int
    pseudo_words: list
    pseudo_phonemes: list
    reference_words: list
    loss: float | None
    stepped: bool
    skip_reason: str | None
    post_step_per: float | None


@dataclass
class TtaTrace:
    records: list = field(default_factory=list)
    session_wer: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def n_skipped(self) -> int:
        return sum(1 for r in self.records if not r.stepped)

    def write_jsonl(self, path):
        with open(path, "w") as f:
            f.write(json.dumps({"meta": self.meta}) + "\n")
            for r in self.records:
                f.write(json.dumps(asdict(r)) + "\n")


def pseudo_label(trial, model, lm: NGramLM, lexicon: Lexicon, lmcfg: LmConfig,
                 policy: AugmentPolicy) -> tuple[list[int], list[str], float]:
    """Phoneme pseudo-labels from the beam-search transcript of ``trial``."""
    lp = model.log_probs([preprocess(trial.features, policy)], [trial.session_id])[0]
    res = beam_search(lp, lm, lexicon, lmcfg.beam_width, lmcfg.acoustic_scale, lmcfg.blank_penalty)
    if res.empty:
        return [], [], res.score
    for w in res.words:
        assert w in lexicon, f"decoder produced out-of-lexicon word {w!r}"
    return lexicon.pronounce(res.words), res.words, res.score


def make_optimizer(model, cfg: TtaConfig):
    params = [t for n, t in model.store.params.items()
              if cfg.update_domain_heads or not n.startswith("dom.")]
    if cfg.optimizer == "sgd":
        return dc.SGD(params, cfg.tta_lr)
    return dc.AdamW(params, cfg.tta_lr, weight_decay=cfg.weight_decay)


@dataclass
class StepOutcome:
    stepped: bool
    loss: float | None
    reason: str | None = None


def tta_step(model, opt, trial, phonemes, cfg: TtaConfig, rng: np.random.Generator,
             policy: AugmentPolicy) -> StepOutcome:
    """One update on ``n_aug`` noisy copies of ``trial`` against ``phonemes``."""
    if not phonemes:
        return StepOutcome(False, None, "empty_pseudo_label")
    n_patches = -(-trial.features.shape[0] // model.cfg.patch_len)
    if min_frames(phonemes) > n_patches:
        return StepOutcome(False, None, "infeasible")
    copies = []
    for _ in range(cfg.n_aug):
        x = add_white_noise(trial.features, cfg.white_noise_sd, rng)
        x = add_baseline_shift(x, cfg.baseline_shift_sd, rng)
        copies.append(preprocess(x, policy))
    saved = model.store.state()
    model.store.zero_grad()
    try:
        lat = model.encode(copies, [trial.session_id] * cfg.n_aug, train=False)
        loss, skipped = ctc_batch_loss(model.phoneme_logits(lat), [list(phonemes)] * cfg.n_aug,
                                       lat.lengths)
        if skipped == cfg.n_aug:
            return StepOutcome(False, None, "infeasible")
        dc.backward(loss)
        opt.step(cfg.tta_lr)
    except dc.NumericalError:
        model.store.load_state(saved)
        return StepOutcome(False, None, "numerical")
    if not np.isfinite(loss.item()) or any(not np.all(np.isfinite(t.data)) for t in model.store):
        model.store.load_state(saved)
        return StepOutcome(False, None, "numerical")
    return StepOutcome(True, loss.item())


def stream_sessions(corpus, init_mode: str) -> list[tuple[int, list]]:
    """Sessions in time order for an init mode, each with its trials in order."""
    if init_mode not in INIT_MODES:
        raise ValueError(f"unknown init_mode {init_mode!r}")
    ids = list(corpus.partition["test"])
    if init_mode == "from_first_target":
        ids = list(corpus.partition["target"]) + ids
    return [(i, list(corpus.session(i).trials)) for i in sorted(ids)]


def tta_stream(model, sessions, cfg: TtaConfig, lm: NGramLM, lexicon: Lexicon, lmcfg: LmConfig,
               policy: AugmentPolicy | None = None, optimizer=None) -> TtaTrace:
    """Adapt ``model`` in place over ``sessions`` = [(session_id, trials), ...]."""
    cfg.validate()
    policy = policy or AugmentPolicy()
    opt = optimizer or make_optimizer(model, cfg)
    rng = substream(cfg.seed, "tta", cfg.init_mode)
    trace = TtaTrace(meta={"init_mode": cfg.init_mode, "wer_scored": "pre-step transcript",
                           "config": asdict(cfg), "lm": lmcfg.echo(),
                           "updated_groups": "all" if cfg.update_domain_heads else "enc.+pho.",
                           "dropout_during_adaptation": False})
    for sid, trials in sessions:
        hyps, refs = [], []
        for i, trial in enumerate(trials):
            phon, words, _ = pseudo_label(trial, model, lm, lexicon, lmcfg, policy)
            out = tta_step(model, opt, trial, phon, cfg, rng, policy)
            post = None
            if trial.labels:
                lp = model.log_probs([preprocess(trial.features, policy)], [sid])[0]
                post = per([trial.labels], [greedy_decode(lp)])
            trace.records.append(TrialRecord(sid, i, list(words), list(phon), list(trial.transcript),
                                             out.loss, out.stepped, out.reason, post))
            hyps.append(words)
            refs.append(list(trial.transcript))
        trace.session_wer[sid] = wer(refs, hyps)
    return trace


def frozen_session_wer(model, sessions, lm, lexicon, lmcfg: LmConfig, policy=None) -> dict:
    policy = policy or AugmentPolicy()
    out = {}
    for sid, trials in sessions:
        lps = model.log_probs([preprocess(t.features, policy) for t in trials], [sid] * len(trials))
        hyps = [beam_search(lp, lm, lexicon, lmcfg.beam_width, lmcfg.acoustic_scale,
                            lmcfg.blank_penalty).words for lp in lps]
        out[sid] = wer([list(t.transcript) for t in trials], hyps)
    return out


def clone_model(model):
    return copy.deepcopy(model)


def write_summary(path, rows):
    """rows: dicts with session, init_mode, frozen_wer, tta_wer."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["session", "init_mode", "frozen_wer", "tta_wer"])
        w.writeheader()
        for r in rows:
            w.writerow(r)
