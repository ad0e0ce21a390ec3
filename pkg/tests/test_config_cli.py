import csv
import json
from pathlib import Path

import numpy as np
import pytest

from sessalign import diffcore as dc
from sessalign.align_train import LOG_COLUMNS
from sessalign.cli import main
from sessalign.config import ConfigError, RunConfig

TINY = """\
seed = 5
name = "tiny"

[datagen]
n_phonemes = 5
channels = 6
n_words = 8
n_source = 2
n_target = 1
n_test = 1
trials_per_session = 6
lm_sentences = 200

[augment]
stretch_range = [1.0, 1.5]
masks = false

[model]
patch_len = 2
embed_dim = 8
depth = 2
heads = 2
rep_layer_index = 0
disc_hidden_dim = 6

[train]
epochs = 2
batch_size = 4
eval_interval = 2

[lm]
beam_width = 4

[tta]
n_aug = 2

[report]
wd_max_frames = 200
embedding_dump_frames = 50
"""


@pytest.fixture
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.delenv("RUN_SEED", raising=False)
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    corpus = root / "corpus"
    assert main(["generate", "--config", str(cfg), "--out", str(corpus)]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus), "--out", str(root / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus), "--out", str(root / "b"),
                 "--no-adversarial", "--no-tsa"]) == 0
    return root, cfg, corpus


def test_config_roundtrip_and_seed_propagation(cfg_path):
    cfg = RunConfig.load(cfg_path)
    assert cfg.seed == 5 and cfg.datagen.seed == cfg.train.seed == cfg.tta.seed == 5
    assert cfg.augment.stretch_range == (1.0, 1.5)
    back = RunConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()


def test_run_seed_environment_override(cfg_path, monkeypatch):
    monkeypatch.setenv("RUN_SEED", "11")
    assert RunConfig.load(cfg_path).train.seed == 11
    assert RunConfig.load(cfg_path, env_seed=False).seed == 5


def test_config_errors_name_the_offender(tmp_path, monkeypatch):
    monkeypatch.delenv("RUN_SEED", raising=False)
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict({"name": "x"})
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"seed": 0, "train": {"bogus": 1}})
    with pytest.raises(ConfigError, match="extra"):
        RunConfig.from_dict({"seed": 0, "extra": {}})
    with pytest.raises(ConfigError, match=r"\[model\]"):
        RunConfig.from_dict({"seed": 0, "model": {"rep_layer_index": 9}})
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict({"seed": 0, "train": {"seed": 3}})


@pytest.mark.parametrize("name", ["default.toml", "benchmark.toml", "tta.toml"])
def test_shipped_configs_load(name, monkeypatch):
    monkeypatch.delenv("RUN_SEED", raising=False)
    RunConfig.load(Path(__file__).parent.parent / "configs" / name)


def test_exit_codes(tmp_path, cfg_path, capsys):
    (tmp_path / "bad.toml").write_text("name = 'x'\n")
    assert main(["generate", "--config", str(tmp_path / "bad.toml")]) == 2
    assert main(["generate", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["train", "--config", str(cfg_path), "--corpus", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "r")]) == 3
    assert main(["eval", str(tmp_path), "--corpus", str(tmp_path)]) == 3
    err = capsys.readouterr().err
    assert "config error" in err and "data error" in err


def test_generate_writes_a_manifest(pipeline):
    _, _, corpus = pipeline
    man = json.loads((corpus / "manifest.json").read_text())
    assert man["seed"] == 5 and man["partition"]["test"] == [3]
    assert all(len(h) == 64 for h in man["files"].values())


def test_train_outputs(pipeline):
    root, _, _ = pipeline
    run = root / "a"
    assert (run / "config_echo").exists() and (run / "train_meta.json").exists()
    with open(run / "log.csv") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert list((run / "checkpoints").glob("step_*.ckpt"))
    with open(root / "b" / "log.csv") as f:
        assert all(r["domain"] == "n/a" for r in csv.DictReader(f))


def test_training_is_reproducible(pipeline, tmp_path):
    root, cfg, corpus = pipeline
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus), "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "log.csv").read_bytes() == (root / "a" / "log.csv").read_bytes()
    x = dc.load_checkpoint(tmp_path / "a" / "model.ckpt")["state"]
    y = dc.load_checkpoint(root / "a" / "model.ckpt")["state"]
    assert all(np.array_equal(x[k], y[k]) for k in y)


def test_eval_with_lm(pipeline, capsys):
    root, _, corpus = pipeline
    assert main(["eval", str(root / "a"), "--corpus", str(corpus), "--split", "test", "--lm"]) == 0
    with open(root / "a" / "eval_test.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["session", "n_trials", "per", "wer"]
    assert rows[-1]["session"] == "pooled"
    assert (root / "a" / "lm.arpa").exists() and (root / "a" / "lexicon.txt").exists()


def test_tta_command(pipeline):
    root, _, corpus = pipeline
    assert main(["tta", str(root / "a"), "--corpus", str(corpus), "--init-mode", "both"]) == 0
    with open(root / "a" / "tta_summary.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["session", "init_mode", "frozen_wer", "tta_wer"]
    assert {r["init_mode"] for r in rows} == {"from_first_target", "from_first_test"}
    assert (root / "a" / "tta_from_first_test.jsonl").exists()


def test_report_command(pipeline, tmp_path):
    root, _, corpus = pipeline
    out = tmp_path / "rep"
    assert main(["report", str(root / "a"), str(root / "b"), "--corpus", str(corpus),
                 "--out", str(out)]) == 0
    with open(out / "ablation.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["variant"] for r in rows] == [
        "ALIGN", "w/o adversarial loss, w/o temporal stretch augmentation"]
    with open(out / "wd_per_dimension.csv") as f:
        assert len(list(csv.reader(f))) == 1 + 8
    emb = np.load(out / "embeddings.npz")
    assert emb["a__source"].shape[1] == 8


def test_ablate_command(pipeline, tmp_path):
    _, cfg, corpus = pipeline
    assert main(["ablate", "--config", str(cfg), "--corpus", str(corpus), "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["align", "no_adversarial", "no_tsa"]
    for p in tmp_path.iterdir():
        assert (p / "model.ckpt").exists()
