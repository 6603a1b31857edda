import json

import pytest

from stcfusion.cli import main
from stcfusion.config import load_config
from stcfusion.errors import ConfigError

TINY = """
seed = 1
[corpus]
train_videos = 2
test_videos = 2
frames_per_video = 16
height = 48
width = 64
normal_count = [2, 3]
triangle_size = [14, 18]
span_length = [4, 6]
[ingest]
train_n = 3
test_n = 4
patch_size = 16
hs_iterations = 10
[model]
latent_dim = 8
memory_size = 5
channels = [4, 4, 4, 4]
[train.spatial]
epochs = 1
batch_size = 4
[train.temporal]
epochs = 1
batch_size = 4
"""


@pytest.fixture
def tiny_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("STCFUSION_CACHE_ROOT", raising=False)
    path = tmp_path / "run.toml"
    path.write_text(TINY)
    return path


def test_defaults_match_published_settings():
    cfg = load_config()
    assert (cfg.ingest.train_threshold, cfg.ingest.test_threshold) == (0.5, 0.4)
    assert (cfg.ingest.train_n, cfg.ingest.test_n) == (18, 24)
    assert (cfg.train.spatial.learning_rate, cfg.train.temporal.learning_rate) == (1e-3, 1e-4)
    assert cfg.train.spatial.batch_size == 64
    assert (cfg.train.spatial.lambda_recon, cfg.train.spatial.lambda_ent) == (1.0, 0.0002)
    assert cfg.eval.window == 10
    assert cfg.model.threshold() == pytest.approx(0.01)


def test_nested_override_keeps_other_defaults():
    cfg = load_config(overrides=["train.temporal.epochs=3"])
    assert cfg.train.temporal.epochs == 3
    assert cfg.train.temporal.learning_rate == 1e-4


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[train.spatial]\nlearning_rat = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rat"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(overrides=["model.size=3"])
    with pytest.raises(ConfigError, match="colour"):
        load_config(overrides=["corpus.colour=1"])


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError):
        load_config(overrides=['eval.window="ten"'])


def test_cache_root_env(monkeypatch):
    monkeypatch.setenv("STCFUSION_CACHE_ROOT", "/tmp/elsewhere")
    assert load_config().paths.cache_root == "/tmp/elsewhere"


def test_cli_unknown_key_exit_code(tiny_config, capsys):
    assert main(["synth", "-c", str(tiny_config), "--set", "corpus.colour=1"]) == 2
    assert main(["synth", "-c", str(tiny_config), "--set", "bogus=1"]) == 2
    assert "bogus" in capsys.readouterr().err


def test_cli_missing_prerequisite(tiny_config, capsys):
    assert main(["train", "--stream", "spatial", "-c", str(tiny_config)]) == 3
    assert "preprocess" in capsys.readouterr().err
    assert main(["score", "-c", str(tiny_config), "--set", "corpus.colour=1"]) == 2
    assert main(["score", "-c", str(tiny_config)]) == 3
    assert main(["eval", "-c", str(tiny_config)]) == 3


@pytest.mark.slow
def test_cli_full_chain_with_ablation(tiny_config, tmp_path, capsys):
    assert main(["all", "--ablation", "-c", str(tiny_config)]) == 0
    out = capsys.readouterr().out
    assert "frame AUC" in out
    reports = tmp_path / "reports"
    rows = (reports / "ablation.csv").read_text().splitlines()
    assert rows[0] == "network,context_memory,auc" and len(rows) == 7
    assert {tuple(r.split(",")[:2]) for r in rows[1:]} == {
        (n, m) for n in ("spatial", "temporal", "dual") for m in ("0", "1")}
    report = json.loads((reports / "report.json").read_text())
    assert report["config"]["seed"] == 1
    assert len(report["ablation"]) == 6
    assert (reports / "ablation.png").exists()
    assert list((reports / "curves").glob("*.png"))
    for manifest in (tmp_path / "data/manifest.json", tmp_path / "cache/preprocess_manifest.json",
                     reports / "score_manifest.json"):
        assert json.loads(manifest.read_text())["config"]["seed"] == 1
    before = (reports / "scores.csv").read_bytes()
    # stages are idempotent: re-scoring gives the same bytes
    assert main(["score", "-c", str(tiny_config)]) == 0
    assert (reports / "scores.csv").read_bytes() == before
    assert main(["plot", "-c", str(tiny_config)]) == 0
    assert main(["train", "--stream", "temporal", "--no-memory", "-c", str(tiny_config)]) == 0

