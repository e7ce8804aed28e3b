"""End-to-end command-line runs, exit codes, and artifact determinism.

All commands run in-process through main(argv) so coverage and tracebacks
work; nothing here shells out.
"""

import json
import os

import numpy as np
import pytest

from metacate import BoundInputs, theorem1_bound
from metacate.cli import main


def write_cfg(path, out_dir, **overrides):
    raw = {
        "seed": 11,
        "out_dir": str(out_dir),
        "dgp": {"d": 4, "e": 3, "n_interventions": 8, "m_per_task": 30,
                "n_controls": 200, "noise_sd": 0.3},
        "split": {"frac_val": 0.1, "frac_test": 0.2},
        "pseudo": {"kind": "knn", "knn_k": 5},
        "model": {"hidden_dim": 16, "n_residual_blocks": 1},
        "train": {"iterations": 80, "adapt_steps": 2, "batch_size": 16,
                  "inner_lr": 0.05, "meta_lr": 0.5},
        "eval": {"us": [0.9, 0.8]},
    }
    raw.update(overrides)
    with open(path, "w") as fh:
        json.dump(raw, fh)
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One generated dataset with a trained caml checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    out = root / "run"
    cfg = write_cfg(root / "cfg.json", out)
    assert main(["generate", "--config", cfg]) == 0
    assert main(["train", "--config", cfg, "--model", "caml"]) == 0
    return cfg, out, str(out / "checkpoint_caml.ckpt")


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert out.startswith("metacate ") and "schema" in out


def test_generate_writes_expected_files(pipeline):
    _, out, _ = pipeline
    for name in ("dataset.csv", "tasks.csv", "ground_truth.json",
                 "manifest.json", "split.json"):
        assert (out / name).exists()


def test_generate_is_deterministic(tmp_path):
    cfg_a = write_cfg(tmp_path / "a.json", tmp_path / "a")
    cfg_b = write_cfg(tmp_path / "b.json", tmp_path / "b")
    assert main(["generate", "--config", cfg_a]) == 0
    assert main(["generate", "--config", cfg_b]) == 0
    assert (tmp_path / "a" / "dataset.csv").read_bytes() == \
           (tmp_path / "b" / "dataset.csv").read_bytes()


def test_seed_override_changes_data(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", tmp_path / "r1")
    assert main(["generate", "--config", cfg]) == 0
    assert main(["generate", "--config", cfg, "--seed", "12",
                 "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r1" / "dataset.csv").read_bytes() != \
           (tmp_path / "r2" / "dataset.csv").read_bytes()


def test_missing_config_exits_3(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "absent.json")]) == 3


def test_invalid_config_exits_2(tmp_path):
    cfg = write_cfg(tmp_path / "bad.json", tmp_path / "r")
    raw = json.loads(open(cfg).read())
    raw["dgp"]["n_interventions"] = 1
    with open(cfg, "w") as fh:
        json.dump(raw, fh)
    assert main(["generate", "--config", cfg]) == 2


def test_train_writes_checkpoint_and_record(pipeline):
    _, out, ckpt = pipeline
    assert os.path.exists(ckpt)
    record = json.load(open(out / "runrecord_caml.json"))
    assert record["model_kind"] == "caml"
    assert len(record["losses"]) == 80


def test_train_on_drifted_config_exits_4(pipeline, tmp_path):
    _, out, _ = pipeline
    drifted = write_cfg(tmp_path / "drift.json", out, seed=999)
    assert main(["train", "--config", drifted, "--model", "caml"]) == 4


def test_evaluate_checkpoint(pipeline, capsys):
    cfg, out, ckpt = pipeline
    assert main(["evaluate", "--config", cfg, "--checkpoint", ckpt]) == 0
    assert "pehe_mean:" in capsys.readouterr().out
    report = json.load(open(out / "report_caml_test.json"))
    assert np.isfinite(report["aggregates"]["pehe_mean"])
    assert (out / "report_caml_test.csv").exists()


def test_evaluate_zero_predictor(pipeline):
    cfg, out, _ = pipeline
    assert main(["evaluate", "--config", cfg, "--zero-predictor"]) == 0
    assert (out / "report_zero_test.json").exists()


def test_evaluate_oracle_predictor_is_exact(pipeline):
    cfg, out, _ = pipeline
    assert main(["evaluate", "--config", cfg, "--oracle-predictor",
                 "--oracle-gamma"]) == 0
    report = json.load(open(out / "report_oracle_test.json"))
    assert report["aggregates"]["pehe_mean"] <= 1e-12


def test_evaluate_without_model_exits_2(pipeline):
    cfg, _, _ = pipeline
    assert main(["evaluate", "--config", cfg]) == 2


def test_evaluate_conflicting_flags_exit_2(pipeline):
    cfg, _, ckpt = pipeline
    assert main(["evaluate", "--config", cfg, "--checkpoint", ckpt,
                 "--zero-predictor"]) == 2


def test_evaluate_on_training_split_exits_4(pipeline):
    cfg, _, ckpt = pipeline
    assert main(["evaluate", "--config", cfg, "--checkpoint", ckpt,
                 "--split", "train"]) == 4


def test_bad_model_choice_is_a_usage_error(pipeline):
    cfg, _, _ = pipeline
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", cfg, "--model", "gradient_boost"])
    assert exc.value.code == 2


# ------------------------------------------------------ theory commands

def test_theory_bound_matches_library(capsys):
    assert main(["theory", "bound", "--n", "100", "--m", "10",
                 "--beta", "1.0", "--rademacher", "0.05"]) == 0
    payload = json.loads(capsys.readouterr().out)
    want = theorem1_bound(BoundInputs(n=100, m=10, epsilon=0.0, delta=0.1,
                                      beta_smooth=1.0, poincare_C=1.0,
                                      rademacher=0.05))
    assert payload["total"] == pytest.approx(want, rel=1e-15)
    assert sum(payload["terms"].values()) == pytest.approx(want, rel=1e-12)


def test_theory_bound_writes_file(tmp_path):
    out = tmp_path / "bound.json"
    assert main(["theory", "bound", "--n", "50", "--m", "5",
                 "--out", str(out)]) == 0
    assert "total" in json.load(open(out))


def test_theory_rademacher_shrinks_with_scale(capsys):
    assert main(["theory", "rademacher", "--n", "2", "--m", "2",
                 "--replicates", "300", "--seed", "1"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["estimate"] <= payload["closed_form_bound"] + 3 * payload["stderr"]
    assert payload["estimate"] > 0


def test_theory_rademacher_rejects_unknown_family():
    assert main(["theory", "rademacher", "--family", "quadratic",
                 "--n", "2", "--m", "2"]) == 2


def test_theory_poincare(tmp_path):
    out = tmp_path / "poincare.json"
    assert main(["theory", "poincare", "--dim", "3", "--fns", "1",
                 "--draws", "4000", "--seed", "3", "--out", str(out)]) == 0
    payload = json.load(open(out))
    assert payload["all_hold"] is True
    assert len(payload["checks"]) == 2  # one linear probe plus one smooth fn
