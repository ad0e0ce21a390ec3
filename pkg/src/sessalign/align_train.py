"""Adversarial session-invariant training.

One optimizer step realises the three update rules

    encoder      <- dCTC/d(enc) - alpha*lam * dDomain/d(enc)
    phoneme head <- dCTC/d(pho)
    domain heads <- lam * dDomain/d(dom)

with a single backward pass over ``CTC + Domain``: the gradient reversal node
in front of the domain heads supplies the ``-alpha*lam`` factor on the
encoder side, and the domain-head gradients are multiplied by ``lam``
afterwards.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .augment import AugmentPolicy, expand_with_tsa, preprocess, train_transform, PIPELINE_ORDER
from .ctc import ctc_batch_loss, greedy_decode
from .datagen import Trial, TrainingView, substream
from .metrics import per
from .model import AlignModel, EncoderConfig, route

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "alpha", "lambda", "ctc", "domain", "total", "val_per", "lr")
SOURCE_LABEL, TARGET_LABEL = 1.0, 0.0


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 0          # 0: one pass over the source trials
    batch_size: int = 16
    target_batch_size: int = 0        # 0: same as batch_size
    lr: float = 1e-3
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    milestones: tuple = (300,)
    gamma: float = 0.1
    lambda_dann: float = 0.6
    lambda_src: float = 1.0
    lambda_tgt: float = 1.0
    omega: float = 16.0
    alpha_warmup: int = 0
    disc_lr_multiplier: float = 0.6
    target_loss: bool = True
    tsa_on_target: bool = True
    no_adversarial: bool = False
    eval_interval: int = 50
    pathway_check_interval: int = 0
    seed: int = 0

    @property
    def lam(self) -> float:
        return 0.0 if self.no_adversarial else self.lambda_dann

    def to_dict(self):
        return dataclasses.asdict(self)


# ------------------------------------------------------------------ schedule

def alpha_schedule(s: float, s_total: float, omega: float) -> float:
    """1/2 + 1/2 sin(omega*pi*kappa - pi/2), kappa = min(s/s_total, 1)."""
    if s_total <= 0 or omega <= 0:
        raise ValueError("s_total and omega must be positive")
    kappa = min(s / s_total, 1.0)
    a = 0.5 + 0.5 * math.sin(omega * math.pi * kappa - math.pi / 2.0)
    return min(max(a, 0.0), 1.0)


@dataclass
class ScheduleState:
    step: int
    total_steps: int
    omega: float
    lam: float
    warmup: int = 0

    @property
    def kappa(self) -> float:
        return min(self.step / self.total_steps, 1.0)

    @property
    def alpha(self) -> float:
        if self.step < self.warmup:
            return 0.0
        return alpha_schedule(self.step, self.total_steps, self.omega)


@dataclass
class LossReport:
    ctc: float
    domain: float | None
    per_head: list
    total: float
    alpha: float
    lam: float
    skipped: int
    domain_acc: float | None = None


def total_loss(ctc: float, domain: float, alpha: float, lam: float) -> float:
    return ctc + alpha * lam * domain


# --------------------------------------------------------------------- batches

@dataclass
class Batch:
    features: list
    labels: list
    session_ids: list
    splits: list

    def __len__(self):
        return len(self.features)


def make_batch(trials: list[Trial], policy: AugmentPolicy, rng: np.random.Generator,
               tsa: bool = True) -> Batch:
    """Apply TSA expansion and the stochastic train pipeline to ``trials``."""
    feats, labels, sids, splits = [], [], [], []
    pol = policy if tsa else dataclasses.replace(policy, tsa=False)
    for t in trials:
        for v in expand_with_tsa(t, pol, rng):
            feats.append(train_transform(v.features, policy, rng))
            labels.append(list(v.labels))
            sids.append(v.session_id)
            splits.append(v.split)
    return Batch(feats, labels, sids, splits)


# ---------------------------------------------------------------- objectives

@dataclass
class Forward:
    ctc: dc.Tensor
    skipped: int
    domain: dc.Tensor | None = None
    per_head: list = field(default_factory=list)
    domain_acc: float | None = None


def _masked_bce(logits: dc.Tensor, mask: np.ndarray, label: float) -> dc.Tensor:
    """BCE over trial logits (R,) or over the valid timesteps of (R, P) logits."""
    if logits.ndim == 2:
        flat = dc.reshape(logits, (logits.shape[0] * logits.shape[1],))
        logits = dc.take(flat, np.flatnonzero(mask.ravel()))
    return dc.bce_with_logits(logits, np.full(logits.shape, label))


def domain_loss(model: AlignModel, z_src: dc.Tensor, mask_src, src_sids, z_tgt: dc.Tensor | None,
                mask_tgt, source_sessions, lambda_src=1.0, lambda_tgt=1.0, target_loss=True,
                train=False, rng=None):
    """Mean over heads of the per-head, per-side-mean weighted BCE.

    ``z_src``/``z_tgt`` are latents that have already passed the reversal
    node (or not, for plain-gradient checks).  Returns (loss, per-head list,
    accuracy of the head decisions).
    """
    n_src = z_src.shape[0] if z_src is not None else 0
    n_tgt = z_tgt.shape[0] if z_tgt is not None else 0
    routes = route(list(src_sids) + [None] * n_tgt,
                   ["source"] * n_src + ["target"] * n_tgt, source_sessions)
    if not model.cfg.binary_loss:
        return _multiclass_domain_loss(model, z_src, mask_src, src_sids, z_tgt, mask_tgt,
                                       source_sessions, lambda_src, lambda_tgt, target_loss,
                                       train, rng)
    terms = []
    correct = total = 0
    for i, (src_rows, tgt_rows) in enumerate(routes):
        parts = []
        if src_rows:
            z = dc.take(z_src, src_rows)
            lg = model.domain_logit(z, mask_src[src_rows], i, train, rng)
            parts.append(dc.scale(_masked_bce(lg, mask_src[src_rows], SOURCE_LABEL), lambda_src))
            correct += int((lg.data > 0).sum()) if lg.ndim == 1 else 0
            total += len(src_rows) if lg.ndim == 1 else 0
        if tgt_rows and target_loss:
            tgt_local = [r - n_src for r in tgt_rows]
            z = dc.take(z_tgt, tgt_local)
            lg = model.domain_logit(z, mask_tgt[tgt_local], i, train, rng)
            parts.append(dc.scale(_masked_bce(lg, mask_tgt[tgt_local], TARGET_LABEL), lambda_tgt))
            correct += int((lg.data <= 0).sum()) if lg.ndim == 1 else 0
            total += len(tgt_local) if lg.ndim == 1 else 0
        if parts:
            head = parts[0] if len(parts) == 1 else dc.add(parts[0], parts[1])
            terms.append(head)
    if not terms:
        raise ValueError("domain_loss: every head is empty for this batch")
    loss = terms[0]
    for t in terms[1:]:
        loss = dc.add(loss, t)
    loss = dc.scale(loss, 1.0 / len(routes))
    acc = correct / total if total else None
    return loss, [t.item() for t in terms], acc


def _multiclass_domain_loss(model, z_src, mask_src, src_sids, z_tgt, mask_tgt, source_sessions,
                            lambda_src, lambda_tgt, target_loss, train, rng):
    m = len(source_sessions)
    head_of = {s: i for i, s in enumerate(source_sessions)}
    parts = []
    for z, mask, classes, w in (
            (z_src, mask_src, [head_of[s] for s in src_sids], lambda_src),
            (z_tgt, mask_tgt, [m] * (0 if z_tgt is None else z_tgt.shape[0]), lambda_tgt)):
        if z is None or not classes or (w is lambda_tgt and not target_loss):
            continue
        out = model.domain_head(z, 0, train, rng)
        pooled = dc.mean_pool(out, mask)
        lp = dc.log_softmax(pooled, axis=-1)
        onehot = np.zeros(lp.shape)
        onehot[np.arange(len(classes)), classes] = 1.0
        nll = dc.scale(dc.sum_all(dc.mul(lp, dc.const(onehot))), -w / len(classes))
        parts.append(nll)
    loss = parts[0] if len(parts) == 1 else dc.add(parts[0], parts[1])
    return loss, [loss.item()], None


def forward_losses(model: AlignModel, src: Batch, tgt: Batch | None, alpha: float, lam: float,
                   tcfg: TrainConfig, source_sessions, *, reverse: bool = True,
                   with_domain: bool = True, train: bool = True, rngs: dict | None = None) -> Forward:
    """Build the CTC graph and, when requested, the domain graph.

    With ``reverse`` the domain heads see ``grl(z, alpha, lam)``; without it
    they see ``z`` directly, which gives the plain gradient of the domain loss.
    """
    rngs = rngs or {}
    lat_s = model.encode(src.features, src.session_ids, train, rngs.get("dropout"))
    logits = model.phoneme_logits(lat_s)
    ctc, skipped = ctc_batch_loss(logits, src.labels, lat_s.lengths)
    fw = Forward(ctc, skipped)
    if not with_domain or not model.cfg.n_domain_heads:
        return fw
    lat_t = None
    if tgt is not None and len(tgt):
        lat_t = model.encode(tgt.features, tgt.session_ids, train, rngs.get("dropout_target"))
    z_s = model.rep(lat_s)
    z_t = model.rep(lat_t) if lat_t is not None else None
    if reverse:
        z_s = dc.grl(z_s, alpha, lam)
        z_t = dc.grl(z_t, alpha, lam) if z_t is not None else None
    dom, heads, acc = domain_loss(
        model, z_s, lat_s.mask, src.session_ids, z_t,
        lat_t.mask if lat_t is not None else None, source_sessions,
        tcfg.lambda_src, tcfg.lambda_tgt, tcfg.target_loss, train, rngs.get("dropout_domain"))
    fw.domain, fw.per_head, fw.domain_acc = dom, heads, acc
    return fw


def domain_active(model: AlignModel, lam: float) -> bool:
    return bool(model.cfg.n_domain_heads) and lam != 0.0


def compute_step_gradients(model: AlignModel, src: Batch, tgt: Batch | None,
                           state: ScheduleState, tcfg: TrainConfig, source_sessions,
                           train: bool = True, rngs: dict | None = None) -> LossReport:
    """Fill the parameter gradient buffers for one ALIGN step; no update."""
    alpha, lam = state.alpha, state.lam
    active = domain_active(model, lam)
    model.store.zero_grad()
    fw = forward_losses(model, src, tgt if active else None, alpha, lam, tcfg, source_sessions,
                        reverse=True, with_domain=active, train=train, rngs=rngs)
    if fw.domain is None:
        dc.backward(fw.ctc)
        dom = None
        total = fw.ctc.item()
    else:
        dc.backward(dc.add(fw.ctc, fw.domain))
        for t in model.group("dom."):
            t.grad *= lam
        dom = fw.domain.item()
        total = total_loss(fw.ctc.item(), dom, alpha, lam)
    if not math.isfinite(total):
        raise dc.NumericalError(f"non-finite loss at step {state.step}: ctc={fw.ctc.item()} domain={dom}")
    # log the weight actually applied: zero when there is no domain path
    return LossReport(fw.ctc.item(), dom, fw.per_head, total, alpha, lam if active else 0.0,
                      fw.skipped, fw.domain_acc)


class Optimizers:
    """AdamW over encoder+phoneme parameters and a separate one for the domain heads."""

    def __init__(self, model: AlignModel, tcfg: TrainConfig):
        main = model.group("enc.") + model.group("pho.")
        self.main = dc.AdamW(main, tcfg.lr, tcfg.betas, tcfg.eps, tcfg.weight_decay)
        dom = model.group("dom.")
        self.domain = dc.AdamW(dom, tcfg.lr * tcfg.disc_lr_multiplier, tcfg.betas, tcfg.eps,
                               tcfg.weight_decay) if dom else None
        self.disc_mult = tcfg.disc_lr_multiplier

    def step(self, lr: float, domain: bool = True):
        self.main.step(lr)
        if self.domain is not None and domain:
            self.domain.step(lr * self.disc_mult)


def train_step(model: AlignModel, opt: Optimizers, src: Batch, tgt: Batch | None,
               state: ScheduleState, tcfg: TrainConfig, source_sessions, lr: float,
               rngs: dict | None = None) -> LossReport:
    report = compute_step_gradients(model, src, tgt, state, tcfg, source_sessions, True, rngs)
    opt.step(lr, domain=report.domain is not None)
    return report


def pathway_decomposition_error(model: AlignModel, src: Batch, tgt: Batch, state: ScheduleState,
                                tcfg: TrainConfig, source_sessions) -> dict[str, float]:
    """Max relative deviation of the combined step gradient from the separate-pass recombination.

    Dropout is disabled so that the three backward passes see the same graph.
    """
    alpha, lam = state.alpha, state.lam
    store = model.store
    store.zero_grad()
    fw = forward_losses(model, src, tgt, alpha, lam, tcfg, source_sessions, with_domain=False, train=False)
    dc.backward(fw.ctc)
    g_ctc = store.grads()
    store.zero_grad()
    fw = forward_losses(model, src, tgt, alpha, lam, tcfg, source_sessions, reverse=False, train=False)
    dc.backward(fw.domain)
    g_dom = store.grads()
    compute_step_gradients(model, src, tgt, state, tcfg, source_sessions, train=False)
    g_step = store.grads()
    # normalised per group: some tensors (attention key bias) have an exactly
    # zero true gradient, so a per-tensor ratio would only measure rounding noise
    errs = {}
    for prefix in ("enc.", "pho.", "dom."):
        diff = ref = 0.0
        for n in store.names(prefix):
            if prefix == "enc.":
                expect = g_ctc[n] - alpha * lam * g_dom[n]
            elif prefix == "pho.":
                expect = g_ctc[n]
            else:
                expect = lam * g_dom[n]
            diff = max(diff, float(np.abs(g_step[n] - expect).max()))
            ref = max(ref, float(np.abs(expect).max()), float(np.abs(g_step[n]).max()))
        errs[prefix] = diff / max(ref, 1e-12)
    return errs


# ----------------------------------------------------------------- evaluation

def evaluate_per(model: AlignModel, trials: list[Trial], policy: AugmentPolicy) -> float:
    if not trials:
        raise ValueError("no trials to evaluate")
    feats = [preprocess(t.features, policy) for t in trials]
    lps = model.log_probs(feats, [t.session_id for t in trials])
    hyps = [greedy_decode(lp) for lp in lps]
    return per([t.labels for t in trials], hyps)


# ------------------------------------------------------------------------ fit

@dataclass
class FitResult:
    best_state: dict
    best_step: int
    best_val_per: float
    log_rows: list
    evaluations: list
    skipped_total: int
    pathway_errors: list
    model: AlignModel
    metadata: dict


def build_model(view: TrainingView, ecfg: EncoderConfig, tcfg: TrainConfig,
                with_domain: bool = True) -> AlignModel:
    cfg = dataclasses.replace(ecfg, n_channels=view.channels, vocab_size=view.vocab_size,
                              n_domain_heads=len(view.source_sessions) if with_domain else 0)
    return AlignModel(cfg, seed=tcfg.seed)


def fit(view: TrainingView, ecfg: EncoderConfig, tcfg: TrainConfig, policy: AugmentPolicy,
        run_dir=None, with_domain: bool = True, save_every_eval: bool = False,
        config_echo: dict | None = None) -> FitResult:
    """Train on labeled source and unlabeled target trials; select by validation PER."""
    if not view.source or not view.validation:
        raise ValueError("fit needs nonempty source and validation partitions")
    if with_domain and not tcfg.no_adversarial and not view.target:
        raise ValueError("adversarial training needs unlabeled target trials")
    policy.validate()
    model = build_model(view, ecfg, tcfg, with_domain)
    opt = Optimizers(model, tcfg)
    seed = tcfg.seed
    order_rng = substream(seed, "train", "order")
    aug_rng = substream(seed, "augment", "source")
    tgt_pick_rng = substream(seed, "train", "target")
    tgt_aug_rng = substream(seed, "augment", "target")
    rngs = {"dropout": substream(seed, "train", "dropout"),
            "dropout_target": substream(seed, "train", "dropout_target"),
            "dropout_domain": substream(seed, "train", "dropout_domain")}

    n_src = len(view.source)
    bs = tcfg.batch_size
    bt = tcfg.target_batch_size or bs
    spe = tcfg.steps_per_epoch or max(1, n_src // bs)
    total_steps = tcfg.epochs * spe
    state = ScheduleState(0, total_steps, tcfg.omega, tcfg.lam, tcfg.alpha_warmup)
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    rows, evals, path_errs = [], [], []
    best = (math.inf, -1, None)
    skipped_total = 0
    active = domain_active(model, state.lam)
    perm = np.array([], dtype=np.int64)
    for epoch in range(tcfg.epochs):
        lr = dc.multistep_lr(tcfg.lr, epoch, tcfg.milestones, tcfg.gamma)
        for _ in range(spe):
            if perm.size < bs:
                perm = np.concatenate([perm, order_rng.permutation(n_src)])
            idx, perm = perm[:bs], perm[bs:]
            src = make_batch([view.source[i] for i in idx], policy, aug_rng)
            tgt = None
            if active:
                pick = tgt_pick_rng.choice(len(view.target), size=min(bt, len(view.target)),
                                           replace=False)
                tgt = make_batch([view.target[i] for i in pick], policy, tgt_aug_rng,
                                 tsa=tcfg.tsa_on_target)
            if active and tcfg.pathway_check_interval and state.step % tcfg.pathway_check_interval == 0:
                saved = model.store.state()
                path_errs.append((state.step, pathway_decomposition_error(
                    model, src, tgt, state, tcfg, view.source_sessions)))
                model.store.load_state(saved)
            rep = train_step(model, opt, src, tgt, state, tcfg, view.source_sessions, lr, rngs)
            skipped_total += rep.skipped
            state.step += 1
            row = {"step": state.step, "epoch": epoch, "alpha": rep.alpha, "lambda": rep.lam,
                   "ctc": rep.ctc, "domain": "n/a" if rep.domain is None else rep.domain,
                   "total": rep.total, "val_per": "", "lr": lr}
            if state.step % tcfg.eval_interval == 0 or state.step == total_steps:
                vp = evaluate_per(model, view.validation, policy)
                row["val_per"] = vp
                evals.append((state.step, vp))
                log.info("step %d val_per %.4f ctc %.4f", state.step, vp, rep.ctc)
                if vp < best[0]:
                    best = (vp, state.step, model.store.state())
                if run_dir and save_every_eval:
                    dc.save_checkpoint(run_dir / "checkpoints" / f"step_{state.step}.ckpt",
                                       model.store, config=config_echo, step=state.step,
                                       meta={"architecture": model.describe()})
            rows.append(row)

    meta = {"augment_order": list(PIPELINE_ORDER), "total_steps": total_steps,
            "steps_per_epoch": spe, "skipped_infeasible": skipped_total,
            "architecture": model.describe(), "batch_reduction": "mean over feasible trials",
            "validation_decoding": "greedy"}
    result = FitResult(best[2], best[1], best[0], rows, evals, skipped_total, path_errs, model, meta)
    if run_dir:
        write_log(run_dir / "log.csv", rows)
        dc.save_checkpoint(run_dir / "model.ckpt", _with_state(model, best[2]).store,
                           config=config_echo, step=best[1],
                           meta={"architecture": model.describe(), "val_per": best[0], **meta})
        (run_dir / "train_meta.json").write_text(json.dumps(meta, indent=2, default=str))
    model.store.load_state(best[2])
    return result


def _with_state(model: AlignModel, state: dict) -> AlignModel:
    model.store.load_state(state)
    return model


def write_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def model_from_checkpoint(path) -> tuple[AlignModel, dict]:
    doc = dc.load_checkpoint(path)
    arch = doc["meta"]["architecture"]["encoder"]
    ecfg = EncoderConfig(**arch)
    model = AlignModel(ecfg, seed=0)
    model.store.load_state(doc["state"])
    return model, doc
