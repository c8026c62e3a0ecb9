import json
from pathlib import Path

import numpy as np
import pytest

from conftest import TINY
from pgla import experiment
from pgla.cli import main
from pgla.config import ConfigError, config_schema, load_config, validate_config
from pgla.formats import GradientFile

FIXTURES = Path(__file__).parent / "fixtures"


def _write(tmp_path, cfg: dict) -> str:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_config_defaults_and_digest():
    cfg = load_config()
    assert cfg.trials == 32 and cfg.attack.probes == 2000 and cfg.training.steps == 10000
    assert cfg.model.input_shape == (1, 16, 16)
    # output location does not change the digest; anything else does
    assert cfg.replace(output_dir="elsewhere").digest == cfg.digest
    assert cfg.replace(**{"attack.c": 0.5}).digest != cfg.digest


def test_invalid_config_lists_fields():
    with pytest.raises(ConfigError) as info:
        validate_config({"trials": 0, "perturbation": {"epsilon": -1}, "unknown": 1})
    fields = {f for f, _ in info.value.issues}
    assert {"trials", "perturbation.epsilon", "unknown"} <= fields


def test_schema_published_in_docs_is_current():
    doc = Path(__file__).parents[1] / "docs" / "config.schema.json"
    assert json.loads(doc.read_text()) == config_schema()


def test_cli_invalid_config_exit_2(tmp_path, capsys):
    code = main(["simulate", "--config", _write(tmp_path, {"trials": -3})])
    assert code == 2
    record = json.loads(capsys.readouterr().err)
    assert record["error"] == "ConfigError" and record["fields"][0]["field"] == "trials"


def test_cli_missing_artifact_exit_3(tmp_path, capsys):
    code = main(["harvest", "--config", _write(tmp_path, TINY), "--out", str(tmp_path / "empty")])
    assert code == 3
    assert json.loads(capsys.readouterr().err)["exit_code"] == 3


def test_cli_stages_chain_and_refuse_foreign_artifacts(tmp_path, capsys):
    cfg = _write(tmp_path, TINY)
    out = str(tmp_path / "run")
    for stage in ("simulate", "harvest", "train-diffusion", "denoise", "invert", "eval"):
        assert main([stage, "--config", cfg, "--out", out]) == 0, stage
    for name in ("shared", "recovered", "metrics", "baseline", "report"):
        assert (Path(out) / experiment.FILES[name]).exists()
    capsys.readouterr()
    assert main(["denoise", "--config", cfg, "--out", out, "--seed", "99"]) == 4
    assert main(["denoise", "--config", cfg, "--out", out, "--seed", "99", "--force"]) == 0


def test_no_noise_pipeline_shares_clean_gradient(tmp_path):
    cfg = validate_config({**TINY, "perturbation": {"sigma_override": 0.0}})
    experiment.run_pipeline(cfg, tmp_path)
    rows = experiment.read_csv(tmp_path / "baseline.csv")
    assert all(abs(float(r["cos_g"]) - 1.0) < 1e-12 for r in rows)
    rec = GradientFile.load(tmp_path / "recovered.pgrd").values
    assert np.array_equal(rec, GradientFile.load(tmp_path / "shared.pgrd").values)


def test_every_artifact_carries_digest_and_seed(tmp_path, tiny_config):
    experiment.run_pipeline(tiny_config, tmp_path)
    for name in ("global", "victims", "clean", "shared", "surrogate", "recovered", "inverted"):
        gf = GradientFile.load(tmp_path / experiment.FILES[name])
        assert gf.digest == tiny_config.digest and gf.seed == tiny_config.seed
    rows = experiment.read_csv(tmp_path / "metrics.csv")
    assert len(rows) == tiny_config.trials
    assert {r["config_digest"] for r in rows} == {tiny_config.digest_hex}
    assert b"\r\n" not in (tmp_path / "metrics.csv").read_bytes()


def test_eval_golden_fixture(capsys):
    code = main(["eval", "--recovered", str(FIXTURES / "golden_recovered.pgrd"),
                 "--clean", str(FIXTURES / "golden_clean.pgrd")])
    assert code == 0
    result = json.loads(capsys.readouterr().out)["results"][0]
    expected = json.loads((FIXTURES / "golden.json").read_text())["cos_g"]
    assert abs(result["cos_g"] - expected) < 1e-9


def test_eval_refuses_mixed_digests(tmp_path, capsys):
    gf = GradientFile.load(FIXTURES / "golden_clean.pgrd")
    gf.digest = bytes(32)
    gf.save(tmp_path / "other.pgrd")
    args = ["eval", "--recovered", str(FIXTURES / "golden_recovered.pgrd"), "--clean", str(tmp_path / "other.pgrd")]
    assert main(args) == 4
    assert main(args + ["--force"]) == 0


def test_selftest_subcommand(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.parametrize("condition", ["perturbed-surrogate", "intercepted"])
def test_conditional_pipeline_both_pairings(tmp_path, condition):
    cfg = validate_config({**TINY, "training": {**TINY["training"], "conditional": True, "condition": condition}})
    experiment.run_pipeline(cfg, tmp_path)
    rows = experiment.read_csv(tmp_path / "metrics.csv")
    assert len(rows) == cfg.trials and all(np.isfinite(float(r["cos_g"])) for r in rows)
