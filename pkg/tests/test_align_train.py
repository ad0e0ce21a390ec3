import csv
import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest

from sessalign import align_train, diffcore as dc
from sessalign.align_train import (LOG_COLUMNS, ScheduleState, TrainConfig, alpha_schedule,
                                   compute_step_gradients, domain_loss, evaluate_per, fit,
                                   forward_losses, make_batch, model_from_checkpoint,
                                   pathway_decomposition_error, total_loss)
from sessalign.config import RunConfig
from sessalign.datagen import generate_corpus

from conftest import small_policy, tiny_encoder
from grad_cases import align_objective_case

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_alpha_starts_at_zero_and_peaks_at_first_half_period():
    assert alpha_schedule(0, 100, 16) == 0.0
    assert alpha_schedule(1, 16, 16) == 1.0
    assert alpha_schedule(100, 1600, 16) == 1.0


def test_alpha_stays_in_unit_interval_on_a_fine_grid():
    s = np.linspace(0, 2.0, 10 ** 4)
    for omega in (1.0, 16.0, 24.0):
        vals = np.array([alpha_schedule(x, 1.0, omega) for x in s])
        assert vals.min() >= 0.0 and vals.max() <= 1.0


def test_kappa_clamps_past_the_last_step():
    assert alpha_schedule(500, 100, 3) == alpha_schedule(100, 100, 3)
    st = ScheduleState(250, 100, 3.0, 0.6)
    assert st.kappa == 1.0
    with pytest.raises(ValueError):
        alpha_schedule(1, 0, 16)


def test_warmup_holds_alpha_at_zero():
    st = ScheduleState(4, 100, 16.0, 0.6, warmup=5)
    assert st.alpha == 0.0
    st.step = 5
    assert st.alpha == alpha_schedule(5, 100, 16.0)


def test_total_loss_and_lambda():
    assert total_loss(2.0, 0.5, 0.5, 0.6) == pytest.approx(2.15, abs=1e-15)
    assert TrainConfig(no_adversarial=True).lam == 0.0
    assert TrainConfig().lam == 0.6


@pytest.mark.parametrize("alpha_step", [1, 3])
def test_single_pass_gradient_matches_separate_pathways(alpha_step):
    model, src, tgt, tcfg, view, _ = align_objective_case(seed=1)
    state = ScheduleState(alpha_step, 40, tcfg.omega, tcfg.lam)
    assert 0 < state.alpha
    errs = pathway_decomposition_error(model, src, tgt, state, tcfg, view.source_sessions)
    assert set(errs) == {"enc.", "pho.", "dom."}
    assert max(errs.values()) <= 1e-6


def test_zero_lambda_skips_the_domain_path():
    model, src, tgt, tcfg, view, _ = align_objective_case()
    state = ScheduleState(3, 40, tcfg.omega, 0.0)
    rep = compute_step_gradients(model, src, tgt, state, tcfg, view.source_sessions, train=False)
    assert rep.domain is None and rep.total == rep.ctc
    assert all(not t.grad.any() for t in model.group("dom."))


def test_make_batch_duplicates_each_trial_under_tsa(tiny_corpus):
    view = tiny_corpus.training_view()
    b = make_batch(view.source[:3], small_policy(), np.random.default_rng(0))
    assert len(b) == 6 and b.labels[0] == b.labels[1]
    b = make_batch(view.source[:3], small_policy(), np.random.default_rng(0), tsa=False)
    assert len(b) == 3


def _fit(view, with_domain, **tkw):
    tcfg = TrainConfig(epochs=3, batch_size=4, eval_interval=2, lr=3e-3, **tkw)
    return fit(view, tiny_encoder(), tcfg, small_policy(tsa=False), with_domain=with_domain)


def test_zero_lambda_and_no_tsa_recovers_the_plain_ctc_baseline(tiny_corpus):
    view = tiny_corpus.training_view()
    a = _fit(view, with_domain=True, no_adversarial=True)
    b = _fit(view, with_domain=False)
    assert a.log_rows == b.log_rows
    assert all(r["domain"] == "n/a" for r in a.log_rows)
    for n in b.model.store.names():
        assert np.array_equal(a.model.store[n].data, b.model.store[n].data)


def test_fit_writes_log_and_reloadable_checkpoint(tmp_path, tiny_corpus):
    view = tiny_corpus.training_view()
    tcfg = TrainConfig(epochs=2, batch_size=4, eval_interval=1, pathway_check_interval=2)
    res = fit(view, tiny_encoder(), tcfg, small_policy(), run_dir=tmp_path, config_echo={"x": 1})
    with open(tmp_path / "log.csv") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0].keys()) == LOG_COLUMNS
    assert len(rows) == res.metadata["total_steps"] == len(res.log_rows)
    assert float(rows[0]["alpha"]) == alpha_schedule(0, res.metadata["total_steps"], tcfg.omega)
    assert res.best_val_per == min(v for _, v in res.evaluations)
    assert all(max(e.values()) <= 1e-6 for _, e in res.pathway_errors)
    model, doc = model_from_checkpoint(tmp_path / "model.ckpt")
    assert doc["schedule_step"] == res.best_step
    assert doc["config_hash"] == dc.config_hash({"x": 1})
    feats = [t.features for t in view.validation]
    sids = [t.session_id for t in view.validation]
    for x, y in zip(model.log_probs(feats, sids), res.model.log_probs(feats, sids)):
        assert np.array_equal(x, y)


def test_fit_is_reproducible(tiny_corpus):
    view = tiny_corpus.training_view()
    a = _fit(view, with_domain=True)
    b = _fit(view, with_domain=True)
    assert a.log_rows == b.log_rows
    assert any(isinstance(r["domain"], float) for r in a.log_rows)


def test_fit_requires_target_trials_for_adversarial_training(tiny_corpus):
    view = tiny_corpus.training_view()
    view.target = []
    with pytest.raises(ValueError, match="target"):
        _fit(view, with_domain=True)


def test_zero_logits_give_two_ln2_domain_loss():
    model, src, tgt, tcfg, view, _ = align_objective_case()
    for n in model.store.names("dom."):
        if n.endswith(("W3", "b3")):
            model.store[n].data[...] = 0.0
    # every head needs both sides populated: take trials from each source session
    picks = [next(t for t in view.source if t.session_id == s) for s in view.source_sessions]
    src = make_batch(picks, small_policy(), np.random.default_rng(0), tsa=False)
    fw = forward_losses(model, src, tgt, 0.5, tcfg.lam, tcfg, view.source_sessions, train=False)
    assert fw.domain.item() == pytest.approx((tcfg.lambda_src + tcfg.lambda_tgt) * math.log(2), abs=1e-14)
    # one source session: the mean over heads is that head's loss
    z = model.rep(model.encode(src.features))
    one, heads, _ = domain_loss(model, z, model.encode(src.features).mask, [0] * len(src), None, None, [0])
    assert one.item() == pytest.approx(heads[0], abs=0) and one.item() == pytest.approx(math.log(2), abs=1e-14)


def test_total_loss_documented_value():
    assert total_loss(2.0, 0.5, 1.0, 0.6) == pytest.approx(2.3, abs=1e-15)
    assert total_loss(2.0, 0.5, 0.0, 0.6) == 2.0 == total_loss(2.0, 0.5, 1.0, 0.0)


def test_vanishing_reversal_factor_gives_the_ctc_only_encoder_gradient():
    model, src, tgt, tcfg, view, _ = align_objective_case()
    state = ScheduleState(0, 40, tcfg.omega, tcfg.lam)          # alpha = 0
    compute_step_gradients(model, src, tgt, state, tcfg, view.source_sessions, train=False)
    joint = model.store.grads()
    model.store.zero_grad()
    dc.backward(forward_losses(model, src, tgt, 0.0, 0.0, tcfg, view.source_sessions,
                               with_domain=False, train=False).ctc)
    ctc_only = model.store.grads()
    for n in model.store.names("enc.") + model.store.names("pho."):
        np.testing.assert_allclose(joint[n], ctc_only[n], rtol=0, atol=1e-15)
    # the phoneme head never sees the domain term, whatever alpha is
    compute_step_gradients(model, src, tgt, ScheduleState(3, 40, tcfg.omega, tcfg.lam), tcfg,
                           view.source_sessions, train=False)
    for n in model.store.names("pho."):
        np.testing.assert_allclose(model.store[n].grad, ctc_only[n], rtol=0, atol=1e-15)


def test_logged_total_matches_the_formula_and_eval_count(tiny_corpus):
    res = _fit(tiny_corpus.training_view(), with_domain=True)
    for r in res.log_rows:
        assert r["total"] == pytest.approx(total_loss(r["ctc"], r["domain"], r["alpha"], r["lambda"]),
                                           rel=0, abs=1e-12)
    steps = res.metadata["total_steps"]
    assert len(res.evaluations) == steps // 2 + (steps % 2 != 0)


def test_no_source_row_reaches_a_foreign_head(tiny_corpus, monkeypatch):
    seen = []

    def spy(session_ids, splits, source_sessions):
        out = real(session_ids, splits, source_sessions)
        for i, (rows, _) in enumerate(out):
            seen.extend((source_sessions[i], session_ids[r]) for r in rows)
        return out

    real = align_train.route
    monkeypatch.setattr(align_train, "route", spy)
    view = tiny_corpus.training_view()
    tcfg = TrainConfig(epochs=1, batch_size=2)
    fit(view, tiny_encoder(), tcfg, small_policy())
    assert seen and sum(head != sid for head, sid in seen) == 0
    assert {sid for _, sid in seen} == set(view.source_sessions)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_zero_drift_validation_per_tracks_training_per(seed):
    cfg = RunConfig.load(CONFIGS / "benchmark.toml", env_seed=False)
    cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed}, env_seed=False)
    corpus = generate_corpus(dataclasses.replace(cfg.datagen, drift_strength=0.0))
    view = corpus.training_view()
    res = fit(view, cfg.model, dataclasses.replace(cfg.train, no_adversarial=True), cfg.augment)
    assert abs(res.best_val_per - evaluate_per(res.model, view.source, cfg.augment)) <= 0.05
