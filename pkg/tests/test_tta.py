import json

import numpy as np
import pytest

from sessalign.align_train import TrainConfig, fit
from sessalign.datagen import Trial
from sessalign.lm_decode import PRESETS as LM_PRESETS, Lexicon, LmConfig, build_ngram
from sessalign.tta import (PRESETS, TtaConfig, clone_model, frozen_session_wer, make_optimizer,
                           stream_sessions, tta_step, tta_stream)

from conftest import small_policy, tiny_encoder

LMCFG = LmConfig(beam_width=6)


@pytest.fixture(scope="module")
def setup(tiny_corpus):
    view = tiny_corpus.training_view()
    tcfg = TrainConfig(epochs=6, batch_size=4, eval_interval=3, lr=3e-3)
    res = fit(view, tiny_encoder(), tcfg, small_policy())
    lex = Lexicon(tiny_corpus.lexicon)
    lm = build_ngram(tiny_corpus.lm_sentences, 3, vocab=sorted(tiny_corpus.lexicon))
    return res.model, lm, lex


def test_zero_learning_rate_reproduces_frozen_decoding(setup, tiny_corpus):
    model, lm, lex = setup
    sessions = stream_sessions(tiny_corpus, "from_first_target")
    frozen = frozen_session_wer(model, sessions, lm, lex, LMCFG, small_policy())
    m = clone_model(model)
    before = m.store.state()
    trace = tta_stream(m, sessions, TtaConfig(n_aug=4, tta_lr=0.0, init_mode="from_first_target"),
                       lm, lex, LMCFG, small_policy())
    assert trace.session_wer == frozen
    assert trace.n_skipped < len(trace)
    for n, v in before.items():
        assert np.array_equal(m.store[n].data, v)


def test_domain_heads_are_left_untouched(setup, tiny_corpus):
    model, lm, lex = setup
    m = clone_model(model)
    assert m.store.names("dom.")
    before = {n: m.store[n].data.copy() for n in m.store.names()}
    sessions = stream_sessions(tiny_corpus, "from_first_test")
    tta_stream(m, sessions, TtaConfig(n_aug=4, tta_lr=1e-3), lm, lex, LMCFG, small_policy())
    assert all(np.array_equal(m.store[n].data, before[n]) for n in m.store.names("dom."))
    assert any(not np.array_equal(m.store[n].data, before[n]) for n in m.store.names("enc."))
    opt = make_optimizer(m, TtaConfig(update_domain_heads=True))
    assert len(opt.params) == len(m.store.names())


def test_skip_reasons(setup):
    model, *_ = setup
    m = clone_model(model)
    opt = make_optimizer(m, TtaConfig())
    t = Trial(np.zeros((4, 6)), [], 3, "test")
    rng = np.random.default_rng(0)
    cfg = TtaConfig(n_aug=2)
    assert tta_step(m, opt, t, [], cfg, rng, small_policy()).reason == "empty_pseudo_label"
    # 4 frames, patch 2 -> 2 patches cannot carry three labels
    assert tta_step(m, opt, t, [1, 2, 3], cfg, rng, small_policy()).reason == "infeasible"


def test_trace_records_pre_step_transcripts(tmp_path, setup, tiny_corpus):
    model, lm, lex = setup
    sessions = stream_sessions(tiny_corpus, "from_first_test")
    trace = tta_stream(clone_model(model), sessions, TtaConfig(n_aug=2, tta_lr=1e-3), lm, lex,
                       LMCFG, small_policy())
    assert trace.meta["wer_scored"] == "pre-step transcript"
    assert len(trace) == sum(len(t) for _, t in sessions)
    trace.write_jsonl(tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["meta"]["init_mode"] == "from_first_test"
    assert len(lines) == len(trace) + 1


def test_stream_sessions_modes(tiny_corpus):
    assert [s for s, _ in stream_sessions(tiny_corpus, "from_first_test")] == [3]
    assert [s for s, _ in stream_sessions(tiny_corpus, "from_first_target")] == [2, 3]
    with pytest.raises(ValueError):
        stream_sessions(tiny_corpus, "random")


def test_presets_and_validation():
    assert (PRESETS["t12"].n_aug, PRESETS["t12"].tta_lr) == (64, 3e-3)
    assert (PRESETS["t12"].white_noise_sd, PRESETS["t12"].baseline_shift_sd) == (0.2, 0.05)
    assert (PRESETS["t15"].tta_lr, PRESETS["t15"].white_noise_sd) == (5e-4, 1.0)
    assert LM_PRESETS["t12"].beam_width == 18
    with pytest.raises(ValueError):
        TtaConfig(n_aug=0).validate()
    with pytest.raises(ValueError):
        TtaConfig(optimizer="rmsprop").validate()


def _records(trace, sid):
    return [r for r in trace.records if r.session_id == sid]


def test_adaptation_is_sequential(setup, tiny_corpus):
    model, lm, lex = setup
    cfg = TtaConfig(n_aug=2, tta_lr=1e-3)
    (sid, trials), = stream_sessions(tiny_corpus, "from_first_test")
    fwd = tta_stream(clone_model(model), [(sid, trials)], cfg, lm, lex, LMCFG, small_policy())
    rev = tta_stream(clone_model(model), [(sid, trials[::-1])], cfg, lm, lex, LMCFG, small_policy())
    n = len(trials)
    # the same trial sees different weights depending on what came before it
    losses_f = [r.loss for r in _records(fwd, sid)]
    losses_r = [r.loss for r in _records(rev, sid)][::-1]
    assert fwd.n_skipped < n and losses_f != losses_r


def test_all_skipped_stream_leaves_weights_bitwise_unchanged(setup, tiny_corpus):
    model, _, _ = setup
    # a single word far too long for any trial: every pseudo-label is empty
    lex = Lexicon({"long": tuple([1, 2] * 200)})
    lm = build_ngram([["long"]], 2)
    m = clone_model(model)
    before = m.store.state()
    trace = tta_stream(m, stream_sessions(tiny_corpus, "from_first_target"),
                       TtaConfig(n_aug=2, tta_lr=1e-2), lm, lex, LMCFG, small_policy())
    assert trace.n_skipped == len(trace) > 0
    assert {r.skip_reason for r in trace.records} == {"empty_pseudo_label"}
    assert all(np.array_equal(m.store[n].data, v) for n, v in before.items())


def test_direct_skipped_steps_change_nothing(setup):
    model, *_ = setup
    m = clone_model(model)
    opt = make_optimizer(m, TtaConfig())
    before = m.store.state()
    rng = np.random.default_rng(1)
    t = Trial(np.zeros((4, 6)), [], 3, "test")
    for k in range(100):
        labels = [] if k % 2 else [1, 2, 3, 4]
        assert not tta_step(m, opt, t, labels, TtaConfig(n_aug=2, tta_lr=1.0), rng, small_policy()).stepped
    assert all(np.array_equal(m.store[n].data, v) for n, v in before.items())


def test_init_modes_give_different_test_session_traces(setup, tiny_corpus):
    model, lm, lex = setup
    out = {}
    for mode in ("from_first_target", "from_first_test"):
        cfg = TtaConfig(n_aug=2, tta_lr=1e-3, init_mode=mode)
        tr = tta_stream(clone_model(model), stream_sessions(tiny_corpus, mode), cfg, lm, lex, LMCFG,
                        small_policy())
        out[mode] = [r.loss for r in _records(tr, 3)]
    assert len(out["from_first_target"]) == len(out["from_first_test"])
    assert out["from_first_target"] != out["from_first_test"]


def test_identical_copies_match_a_single_copy(setup, tiny_corpus):
    model, *_ = setup
    trial = tiny_corpus.session(3).trials[0]
    after = []
    for n_aug in (1, 4):
        m = clone_model(model)
        cfg = TtaConfig(n_aug=n_aug, tta_lr=0.0, white_noise_sd=0.0, baseline_shift_sd=0.0)
        out = tta_step(m, make_optimizer(m, cfg), trial, list(trial.labels), cfg,
                       np.random.default_rng(0), small_policy())
        assert out.stepped
        after.append((out.loss, {n: m.store[n].grad.copy() for n in m.store.names("enc.")}))
    assert after[0][0] == pytest.approx(after[1][0], abs=1e-12)
    for n, g in after[0][1].items():
        np.testing.assert_allclose(after[1][1][n], g, rtol=1e-9, atol=1e-14)
