import json

import pytest

from figa.cli import main
from figa.pipeline import read_meta, read_spa
from figa.train import read_weighted


@pytest.fixture
def work(tmp_path):
    assert main(["synth-pool", "--n", "60", "--seed", "2", "--out", str(tmp_path / "pool.jsonl")]) == 0
    return tmp_path


def build(work, *extra, out="spa.jsonl"):
    return main(
        ["build-spa", "--pool", str(work / "pool.jsonl"), "--out", str(work / out), "--stub-services", "--seed", "2", *extra]
    )


def test_build_stats_hist(work, capsys):
    assert build(work) == 0
    counts = json.loads(capsys.readouterr().out)
    assert counts["kept"] == len(read_spa(work / "spa.jsonl")) > 0
    meta = read_meta(work / "spa.jsonl")
    assert meta["seed"] == 2 and len(meta["config_hash"]) == 16

    assert main(["stats", "--spa", str(work / "spa.jsonl")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_records"] == counts["kept"]
    assert report["config_hash"] == meta["config_hash"]

    assert main(["hist", "--spa", str(work / "spa.jsonl"), "--field", "r_initial", "--bins", "4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("# config_hash")
    assert sum(int(l.split("\t")[2]) for l in lines[2:]) == counts["kept"]


def test_build_is_reproducible(work):
    assert build(work, out="a.jsonl") == 0
    assert build(work, "--workers", "1", out="b.jsonl") == 0
    assert (work / "a.jsonl").read_bytes() == (work / "b.jsonl").read_bytes()


def test_build_threshold_flags_change_hash(work):
    assert build(work, out="a.jsonl") == 0
    assert build(work, "--eta1", "2", out="b.jsonl") == 0
    assert read_meta(work / "a.jsonl")["config_hash"] != read_meta(work / "b.jsonl")["config_hash"]
    assert read_meta(work / "b.jsonl")["thresholds"]["eta1"] == 2.0


def test_skip_flags(work):
    assert build(work, "--skip-filter", "--skip-revision") == 0
    records = read_spa(work / "spa.jsonl")
    assert len(records) == 60
    assert all(r.revised_response == r.instance.reference for r in records)


def pipeline_to_checkpoint(work, name="m.ckpt", seed="0"):
    assert build(work) == 0
    assert main(["annotate", "--spa", str(work / "spa.jsonl"), "--out", str(work / "w.jsonl"), "--nll-mode", "none"]) == 0
    return main(
        ["train", "--data", str(work / "w.jsonl"), "--out", str(work / name), "--epochs", "3", "--seed", seed, "--lr", "0.05"]
    )


def test_train_twice_is_bitwise_identical(work):
    assert pipeline_to_checkpoint(work, "a.ckpt") == 0
    assert pipeline_to_checkpoint(work, "b.ckpt") == 0
    assert (work / "a.ckpt").read_bytes() == (work / "b.ckpt").read_bytes()
    manifest = (work / "a.ckpt.manifest").read_text()
    assert "seed: 0" in manifest and "config_hash: " in manifest
    assert (work / "a.ckpt.vocab").read_bytes() == (work / "b.ckpt.vocab").read_bytes()


def test_annotate_then_eval(work, capsys):
    assert pipeline_to_checkpoint(work) == 0
    records = read_weighted(work / "w.jsonl")
    assert records and all(len(r.weights.revised_weights) == len(r.revised_tokens) for r in records)
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(work / "m.ckpt"), "--pool", str(work / "pool.jsonl"), "--stub-scorer"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert len(report["scores"]) == 60 and report["excluded"] == 0
    assert report["checkpoint_config_hash"]


def test_annotate_with_frozen_nll_model(work):
    assert pipeline_to_checkpoint(work) == 0
    args = ["annotate", "--spa", str(work / "spa.jsonl"), "--out", str(work / "f.jsonl"), "--nll-ckpt", str(work / "m.ckpt")]
    assert main(args) == 0
    assert len(read_weighted(work / "f.jsonl")) == len(read_weighted(work / "w.jsonl"))


@pytest.mark.parametrize(
    "preset, beta", [("beta-zero", 0.0), ("bag-of-words", 0.0), ("external-weighted", 0.0), ("reward-scaled", None), ("alpha-reward-beta-zero", 0.0)]
)
def test_annotate_strategies(work, preset, beta):
    assert build(work) == 0
    out = work / "w.jsonl"
    extra = ["--stub-services"] if preset.startswith("external") else []
    assert main(["annotate", "--spa", str(work / "spa.jsonl"), "--out", str(out), "--preset", preset, "--nll-mode", "none", *extra]) == 0
    records = read_weighted(out)
    assert records
    if beta == 0.0:
        assert all(not any(r.weights.initial_weights) for r in records)


def test_annotate_requires_nll_source(work, capsys):
    assert build(work) == 0
    assert main(["annotate", "--spa", str(work / "spa.jsonl"), "--out", str(work / "w.jsonl")]) == 2
    assert "nll" in capsys.readouterr().err.lower()


def test_exit_codes(work, tmp_path, capsys):
    # configuration: unknown key in config file
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"alhpa": 1}))
    assert build(work, "--config", str(bad)) == 2
    assert "alhpa" in capsys.readouterr().err
    # configuration: argparse rejects a bad flag value
    with pytest.raises(SystemExit) as info:
        main(["hist", "--spa", "x", "--bins", "many"])
    assert info.value.code == 2
    # ingestion
    (tmp_path / "broken.jsonl").write_text('{"id": "1", "query": "q", "reference": "r"}\n{oops\n')
    assert main(["build-spa", "--pool", str(tmp_path / "broken.jsonl"), "--out", str(tmp_path / "o"), "--stub-services"]) == 3
    assert "line 2" in capsys.readouterr().err
    # remote service: no endpoint configured is a config error, unreachable endpoint is a service error
    assert main(["build-spa", "--pool", str(work / "pool.jsonl"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "one.jsonl").write_text('{"id": "1", "query": "q", "reference": "r"}\n')
    cfg = tmp_path / "remote.json"
    cfg.write_text(json.dumps({"completion_endpoint": "http://127.0.0.1:9/none", "reward_endpoint": "http://127.0.0.1:9/rm"}))
    assert main(["build-spa", "--pool", str(tmp_path / "one.jsonl"), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 4


def test_training_divergence_exit_code(work):
    assert build(work) == 0
    assert main(["annotate", "--spa", str(work / "spa.jsonl"), "--out", str(work / "w.jsonl"), "--nll-mode", "none"]) == 0
    code = main(["train", "--data", str(work / "w.jsonl"), "--out", str(work / "x.ckpt"), "--lr", "1e308", "--clip", "1e308", "--epochs", "2"])
    assert code == 5
