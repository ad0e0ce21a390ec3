import dataclasses

import numpy as np
import pytest

from sessalign.augment import AugmentPolicy
from sessalign.datagen import GenConfig, generate_corpus
from sessalign.model import EncoderConfig


def tiny_gen(**kw) -> GenConfig:
    base = dict(n_phonemes=5, channels=6, n_words=8, n_source=2, n_target=1, n_test=1,
                trials_per_session=6, drift_strength=0.3, lm_sentences=200, seed=0)
    base.update(kw)
    return GenConfig(**base)


def tiny_encoder(**kw) -> EncoderConfig:
    base = dict(patch_len=2, embed_dim=8, depth=2, heads=2, rep_layer_index=0,
                disc_hidden_dim=6, dropout=0.0, input_dropout=0.0)
    base.update(kw)
    return EncoderConfig(**base)


def small_policy(**kw) -> AugmentPolicy:
    base = dict(stretch_range=(1.0, 1.5), masks=False)
    base.update(kw)
    return AugmentPolicy(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(tiny_gen())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def replace(obj, **kw):
    return dataclasses.replace(obj, **kw)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        parts = RESULTS[n]
        ok = all(p for p, _ in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: "
                                    + "; ".join(d for _, d in parts))
