import json

import pytest

from dualqe.cli import main
from dualqe.config import RunConfig, load_config

TINY = [
    "n_parallel=120", "n_qe=60", "lexicon_words=10", "bpe_merges=20", "max_len=6",
    "d_model=16", "heads=2", "layers=1", "ff_dim=32", "nmt_steps=20", "nmt_batch=8", "warmup=2",
    "xlm_layers=1", "xlm_steps=10", "xlm_batch=8",
    "hidden=8", "head_hidden=8", "est_epochs=2", "est_batch=16",
]


def run(out, *cmd, extra=()):
    argv = [*cmd, "--out", str(out)]
    for item in [*TINY, *extra]:
        argv += ["--set", item]
    return main(argv)


# -- config ------------------------------------------------------------------

def test_defaults_documented():
    cfg = load_config()
    assert cfg == RunConfig()
    assert (cfg.experts, cfg.d_model, cfg.drop_fraction) == (3, 64, 0.2)


def test_override_precedence(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"d_model": 32, "experts": 2}))
    cfg = load_config(f, ["d_model=48", "use_xlm=false", "filter_seeds=[4, 5]", "w_nmt=1.0", "w_xlm=0"])
    assert cfg.d_model == 48 and cfg.experts == 2
    assert cfg.use_xlm is False and cfg.filter_seeds == [4, 5]
    assert cfg.w_xlm == 0.0


def test_unknown_keys_rejected(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"d_modle": 32}))
    with pytest.raises(ValueError, match="d_modle"):
        load_config(f)
    with pytest.raises(ValueError):
        load_config(None, ["nope=1"])
    with pytest.raises(ValueError):
        load_config(None, ["d_model"])


def test_cli_error_exit(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "bogus=1"]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["filter", "--out", str(tmp_path), "--input", str(tmp_path / "nowhere")] +
                sum((["--set", t] for t in TINY), [])) == 2


# -- end-to-end smoke ----------------------------------------------------------

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert run(out, "gen-data") == 0
    assert run(out, "train-nmt") == 0
    assert run(out, "predict", "--split", "dev") == 0
    return out


def test_smoke_artifacts(workspace):
    for rel in ("config.json", "data/lexicon.json", "bpe/tokenizer.json", "nmt/manifest.json", "xlm/manifest.json",
                "features/train/manifest.json", "estimator/sentence/manifest.json", "estimator/gap/manifest.json",
                "predictions/dev.sentence.tsv", "predictions/dev.word.tsv", "provenance/predict.json"):
        assert (workspace / rel).exists(), rel
    assert not list(workspace.rglob("*.partial"))
    prov = json.loads((workspace / "provenance" / "predict.json").read_text())
    assert prov["config"]["nmt_steps"] == 20 and "wall_time_s" in prov
    assert json.loads((workspace / "config.json").read_text())["d_model"] == 16


def test_evaluate_writes_metrics(workspace):
    assert run(workspace, "evaluate", "--split", "dev") == 0
    metrics = json.loads((workspace / "metrics.dev.json").read_text())
    assert {"pearson", "combined_mcc", "word_mcc", "gap_mcc"} <= set(metrics)


def test_repeat_runs_byte_identical(workspace, tmp_path):
    assert run(tmp_path, "evaluate", "--split", "dev") == 0
    assert (tmp_path / "metrics.dev.json").read_bytes() == (workspace / "metrics.dev.json").read_bytes()


def test_filter_command_with_input(workspace, tmp_path):
    d = tmp_path / "in"
    d.mkdir()
    data = json.loads((workspace / "data" / "lexicon.json").read_text())
    words_src = data["source_words"][:3]
    words_tgt = data["target_words"][:3]
    (d / "src.txt").write_text(" ".join(words_src) + "\n\n" + " ".join(words_src[:2]) + "\n")
    (d / "tgt.txt").write_text(" ".join(words_tgt) + "\n" + " ".join(words_tgt) + "\n" + words_tgt[0] + "\n")
    assert run(workspace, "filter", "--input", str(d), extra=["drop_fraction=0.34"]) == 0
    report = json.loads((workspace / "filter" / "report.json").read_text())
    assert report["n_removed"] == 1 and report["unscoreable"] == [1]
    assert (workspace / "filter" / "removed" / "tgt.txt").read_text().count("\n") == 1
