import json

import numpy as np
import pytest

from knowledge_exposure.cli import main
from knowledge_exposure.errors import InitializationError
from knowledge_exposure.pipeline import load_config, run_pipeline, validate_config

TINY = {
    "seed": 4,
    "dataset": {"loader": "procedural", "classes": ["car", "fruit"], "n_train": 50, "n_test": 12},
    "train": {"epochs": 1, "feature_dim": 16, "batch_size": 16, "K": 2},
    "transport": {"n_projections": 64},
}


def fields(diags):
    return {d.field for d in diags}


def test_default_config_is_valid():
    assert validate_config({}) == []
    assert validate_config(TINY) == []


def test_validation_reports_every_problem_with_a_field():
    bad = {"train": {"K": 7, "temperature": 0}, "protocol": {"setups": ["SPA", "XYZ"]},
           "encoder": {"backend": "nope"}, "bogus": 1}
    diags = validate_config(bad)
    assert {"train.K", "train.temperature", "protocol.setups", "encoder.backend", "bogus"} <= fields(diags)
    k = [d for d in diags if d.field == "train.K"][0]
    assert "2K exceeds transform bank size" in k.message


def test_missing_dataset_path_names_the_environment_variable(monkeypatch):
    monkeypatch.delenv("KE_DATA_ROOT", raising=False)
    diags = validate_config({"dataset": {"loader": "cifar10"}})
    assert [d.field for d in diags] == ["dataset.path"]
    assert "KE_DATA_ROOT" in diags[0].hint


def test_missing_weights_fail_before_any_stage_and_mark_the_run(tmp_path):
    cfg = {**TINY, "encoder": {"backend": f"torchvision:resnet18@{tmp_path / 'none.pth'}"}}
    with pytest.raises(InitializationError):
        run_pipeline(cfg, tmp_path / "run")
    status = json.loads((tmp_path / "run" / "status.json").read_text())
    assert status["status"] == "failed"
    assert not list((tmp_path / "run").glob("ranking_*.json"))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = {**TINY, "cache_dir": str(out / "cache")}
    run_pipeline(cfg, out / "a")
    return out / "a"


def test_run_writes_every_artifact(tiny_run):
    for c in ("car", "fruit"):
        assert (tiny_run / f"ranking_{c}.json").exists()
        assert (tiny_run / f"semantic_map_{c}.json").exists()
        assert (tiny_run / "checkpoints" / f"model_{c}.pt").exists()
        assert (tiny_run / "plots" / c / "histograms.png").exists()
        for s in ("SAD", "SPA", "SSA"):
            assert (tiny_run / f"manifest_{s}_{c}.json").exists()
            assert (tiny_run / f"scores_{s}_{c}.csv").exists()
    assert json.loads((tiny_run / "status.json").read_text())["status"] == "complete"
    doc = json.loads((tiny_run / "report.json").read_text())
    assert [r["setup"] for r in doc["reports"]] == ["SAD", "SPA", "SSA"]
    for r in doc["reports"]:
        assert r["class_order"] == ["car", "fruit"]
        assert 0 <= r["mean_auroc"] <= 1
    assert set(doc["policies"]) == {"car", "fruit"}


def test_rerun_from_resolved_config_is_byte_identical(tiny_run, tmp_path):
    resolved = load_config(tiny_run / "config.resolved.json")
    run_pipeline(resolved, tmp_path / "b")
    assert (tmp_path / "b" / "report.json").read_bytes() == (tiny_run / "report.json").read_bytes()
    assert (tmp_path / "b" / "manifest_SSA_car.json").read_bytes() == \
        (tiny_run / "manifest_SSA_car.json").read_bytes()


def test_cli_validate_and_report(tiny_run, tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(TINY))
    assert main(["validate", "--config", str(good)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"K": 7}}))
    assert main(["validate", "--config", str(bad)]) == 1
    assert "train.K" in capsys.readouterr().out
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["validate", "--config", str(broken)]) == 2
    assert main(["report", str(tiny_run)]) == 0
    assert "mean" in capsys.readouterr().out


def test_cli_stage_by_stage(tmp_path, capsys):
    data = ["--dataset", "procedural:car,fruit", "--train-per-class", "40", "--test-per-class", "12"]
    assert main(["transforms", "list"]) == 0
    assert "rot90" in capsys.readouterr().out
    emb = tmp_path / "car.npz"
    assert main(["--cache-dir", str(tmp_path / "c"), "embed", *data, "--class", "car", "--out", str(emb)]) == 0
    with np.load(emb) as z:
        assert len(set(z.files) - {"sample_ids", "meta"}) == 11
    rank = tmp_path / "rank.json"
    assert main(["rank", "--embeddings", str(emb), "--method", "exact", "--k", "2", "--out", str(rank)]) == 0
    doc = json.loads(rank.read_text())
    assert len(doc["entries"]) == 10 and doc["policy"]["K"] == 2
    man = tmp_path / "ssa.json"
    assert main(["build-protocol", *data, "--setup", "SSA", "--class", "car", "--semantic-map", str(rank),
                 "--out", str(man)]) == 0
    model = tmp_path / "m.pt"
    assert main(["train", *data, "--policy", str(rank), "--epochs", "1", "--feature-dim", "16",
                 "--batch-size", "16", "--out", str(model)]) == 0
    scores = tmp_path / "s.csv"
    assert main(["score", *data, "--model", str(model), "--manifest", str(man), "--out", str(scores)]) == 0
    out = tmp_path / "eval"
    assert main(["eval", "--setup", "SSA", "--scores", f"car={scores}", "--out", str(out)]) == 0
    assert (out / "report.json").exists() and (out / "report.csv").exists()


def test_cli_errors_exit_with_code_two(tmp_path, capsys):
    assert main(["rank", "--embeddings", str(tmp_path / "missing.npz"), "--out", str(tmp_path / "r.json")]) == 2
    assert "error" in capsys.readouterr().err
