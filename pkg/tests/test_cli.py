import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from lorl.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def tiny_data(runner, workdir):
    out = workdir / "data"
    result = runner.invoke(main, [
        "generate", "--family", "household", "--scenes", "6",
        "--image-size", "32", "--out", str(out), "--seed", "5",
    ])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def micro_config(workdir):
    path = workdir / "micro.cfg"
    path.write_text(
        "model_tag = slot-attention\n"
        "family = household\n"
        "image_size = 32\n"
        "num_slots = 4\n"
        "latent_dim = 16\n"
        "concept_dim = 16\n"
        "batch_size = 8\n"
        "n1 = 1\nn2 = 1\nn3 = 1\n"
        "seed = 0\n"
    )
    return path


@pytest.fixture(scope="module")
def trained(runner, workdir, tiny_data, micro_config):
    ckpt = workdir / "ckpt"
    result = runner.invoke(main, [
        "train", "--data", str(tiny_data), "--config", str(micro_config),
        "--out", str(ckpt), "--deterministic",
    ])
    assert result.exit_code == 0, result.output
    return ckpt


def test_generate_writes_layout(tiny_data):
    assert (tiny_data / "scenes.json").exists()
    assert (tiny_data / "questions.json").exists()
    assert (tiny_data / "spec.json").exists()
    assert len(list((tiny_data / "images").glob("*.png"))) == 6


def test_generate_requires_out_or_cache(runner, monkeypatch):
    monkeypatch.delenv("LORL_CACHE", raising=False)
    result = runner.invoke(main, ["generate", "--family", "household", "--scenes", "1"])
    assert result.exit_code == 2


def test_train_writes_checkpoint(trained):
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["stage"] == 3
    assert manifest["model_tag"] == "slot-attention"
    assert (trained / "optim.pt").exists()
    assert (trained / "metrics.jsonl").exists()
    params = manifest["parameters"]
    assert any(p.startswith("model.") for p in params)
    assert any(p.startswith("space.") for p in params)
    for p in params:
        assert (trained / "params" / f"{p}.npy").exists()


def test_train_without_preset_or_config_fails(runner, tiny_data, workdir):
    result = runner.invoke(main, [
        "train", "--data", str(tiny_data), "--out", str(workdir / "x"),
    ])
    assert result.exit_code == 2


def test_train_missing_data_fails(runner, workdir, micro_config):
    result = runner.invoke(main, [
        "train", "--data", str(workdir / "nope"), "--config", str(micro_config),
        "--out", str(workdir / "y"),
    ])
    assert result.exit_code == 2  # click validates the path


def test_eval_reports_metrics(runner, trained, tiny_data, workdir):
    report = workdir / "report.json"
    result = runner.invoke(main, [
        "eval", "--checkpoint", str(trained), "--data", str(tiny_data),
        "--report", str(report), "--concepts",
    ])
    assert result.exit_code == 0, result.output
    out = json.loads(report.read_text())
    assert -0.5 <= out["ari"]["mean"] <= 1.0
    assert 0.0 <= out["qa_accuracy"]["mean"] <= 1.0
    assert "concepts" in out and "concepts_no_objectness" in out
    assert "@0.5" in out["concepts"]


def test_refexp_command(runner, trained, tiny_data):
    result = runner.invoke(main, [
        "refexp", "--checkpoint", str(trained), "--data", str(tiny_data),
    ])
    assert result.exit_code == 0, result.output
    assert "refexp recall@0.5:" in result.output


def test_visualize_writes_pngs(runner, trained, tiny_data, workdir):
    out = workdir / "viz"
    result = runner.invoke(main, [
        "visualize", "--checkpoint", str(trained), "--data", str(tiny_data),
        "--out", str(out), "--scenes", "2",
    ])
    assert result.exit_code == 0, result.output
    assert len(list(out.glob("*.png"))) == 2


def test_inspect_prints_manifest(runner, trained):
    result = runner.invoke(main, ["inspect", "--checkpoint", str(trained)])
    assert result.exit_code == 0
    assert '"stage": 3' in result.output


def test_resume_is_a_noop_when_finished(runner, trained, tiny_data, micro_config):
    before = (trained / "manifest.json").read_text()
    result = runner.invoke(main, [
        "train", "--data", str(tiny_data), "--config", str(micro_config),
        "--out", str(trained), "--resume",
    ])
    assert result.exit_code == 0, result.output
    assert (trained / "manifest.json").read_text() == before
