"""Serialization round trips and the config loader.

Every writer is deterministic and every reader inverts its writer exactly:
floats are rendered with repr, so write -> read -> write is byte-stable.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacate import (
    ConfigError,
    DataError,
    GroundTruth,
    MissingInputError,
    Sample,
    config_from_dict,
    load_config,
)
from metacate.io import (
    config_hash,
    read_dataset_csv,
    read_ground_truth,
    read_manifest,
    read_split_manifest,
    read_tasks_csv,
    write_dataset_csv,
    write_ground_truth,
    write_manifest,
    write_report_csv,
    write_split_manifest,
    write_tasks_csv,
)
from metacate.synthgen import DGPConfig, generate_population


def make_samples(with_pseudo):
    rng = np.random.default_rng(0)
    out = []
    for i in range(6):
        treated = i % 2 == 0
        out.append(
            Sample(
                sample_id=f"s{i}",
                x=rng.standard_normal(3),
                y=float(rng.standard_normal()),
                treated=treated,
                task_id=i // 2 if treated else None,
                tau_true=float(rng.standard_normal()) if treated else None,
                tau_pseudo=float(rng.standard_normal()) if with_pseudo and treated else None,
            )
        )
    return out


# --------------------------------------------------------- dataset csv

@pytest.mark.parametrize("with_pseudo", [False, True])
def test_dataset_round_trip(tmp_path, with_pseudo):
    path = tmp_path / "dataset.csv"
    samples = make_samples(with_pseudo)
    write_dataset_csv(path, samples, d=3)
    back = read_dataset_csv(path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert a.sample_id == b.sample_id
        assert a.treated == b.treated
        assert a.task_id == b.task_id
        assert a.y == b.y  # repr round trip is exact, not approximate
        assert a.tau_true == b.tau_true
        assert a.tau_pseudo == b.tau_pseudo
        np.testing.assert_array_equal(a.x, b.x)


def test_dataset_pseudo_column_only_when_present(tmp_path):
    path = tmp_path / "d.csv"
    write_dataset_csv(path, make_samples(False), d=3)
    header = path.read_text().splitlines()[0].split(",")
    assert "tau_pseudo" not in header
    write_dataset_csv(path, make_samples(True), d=3)
    header = path.read_text().splitlines()[0].split(",")
    assert header[5] == "tau_pseudo"


def test_dataset_write_is_byte_stable(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_dataset_csv(a, make_samples(True), d=3)
    write_dataset_csv(b, read_dataset_csv(a), d=3)
    assert a.read_bytes() == b.read_bytes()


@settings(max_examples=60, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False, width=64))
def test_float_values_survive_exactly(tmp_path_factory, y):
    path = tmp_path_factory.mktemp("csv") / "one.csv"
    s = Sample(sample_id="a", x=np.array([y, 0.0]), y=y, treated=False)
    write_dataset_csv(path, [s], d=2)
    back = read_dataset_csv(path)[0]
    assert back.y == y and back.x[0] == y


def test_dataset_errors(tmp_path):
    with pytest.raises(MissingInputError):
        read_dataset_csv(tmp_path / "absent.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("nope,nope\n1,2\n")
    with pytest.raises(DataError):
        read_dataset_csv(bad)
    empty = tmp_path / "empty.csv"
    write_dataset_csv(empty, make_samples(False), d=3)
    empty.write_text(empty.read_text().splitlines()[0] + "\n")
    with pytest.raises(DataError, match="no samples"):
        read_dataset_csv(empty)
    with pytest.raises(DataError, match="shape"):
        write_dataset_csv(tmp_path / "x.csv", make_samples(False), d=5)


# ----------------------------------------------------------- tasks csv

def test_tasks_round_trip(tmp_path, rng):
    path = tmp_path / "tasks.csv"
    W = rng.standard_normal((4, 6))
    write_tasks_csv(path, W)
    np.testing.assert_array_equal(read_tasks_csv(path), W)


def test_tasks_errors(tmp_path):
    with pytest.raises(DataError):
        write_tasks_csv(tmp_path / "t.csv", np.zeros(3))
    with pytest.raises(MissingInputError):
        read_tasks_csv(tmp_path / "absent.csv")
    scrambled = tmp_path / "s.csv"
    scrambled.write_text("task_id,w_0\n1,0.5\n")
    with pytest.raises(DataError, match="consecutive"):
        read_tasks_csv(scrambled)


# ------------------------------------------- ground truth and manifests

def test_ground_truth_file_round_trip(tmp_path):
    cfg = DGPConfig(d=3, e=2, n_interventions=4, m_per_task=5, n_controls=10,
                    noise_sd=0.1, seed=1)
    _, gt = generate_population(cfg)
    path = tmp_path / "gt.json"
    write_ground_truth(path, gt)
    back = read_ground_truth(path)
    assert isinstance(back, GroundTruth)
    np.testing.assert_array_equal(back.interventions, gt.interventions)
    np.testing.assert_array_equal(back.effect_matrix, gt.effect_matrix)
    assert back.effect_kind == gt.effect_kind
    with pytest.raises(MissingInputError):
        read_ground_truth(tmp_path / "absent.json")


def test_split_manifest_round_trip(tmp_path):
    path = tmp_path / "split.json"
    split_of = {0: "train", 3: "val", 7: "test"}
    write_split_manifest(path, split_of)
    assert read_split_manifest(path) == split_of  # keys back as ints
    with pytest.raises(DataError):
        write_split_manifest(path, {0: "holdout"})
    with pytest.raises(MissingInputError):
        read_split_manifest(tmp_path / "absent.json")


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "manifest.json"
    cfg = {"seed": 3, "out_dir": "here", "dgp": {"d": 2}}
    write_manifest(path, cfg, files=["b.csv", "a.csv"])
    m = read_manifest(path)
    assert m["schema"] == 1
    assert m["config"] == cfg
    assert m["config_hash"] == config_hash(cfg)
    assert m["files"] == ["a.csv", "b.csv"]
    with pytest.raises(MissingInputError):
        read_manifest(tmp_path / "absent.json")


def test_config_hash_ignores_out_dir():
    base = {"seed": 1, "dgp": {"d": 4}, "out_dir": "x"}
    assert config_hash(base) == config_hash({**base, "out_dir": "elsewhere"})
    assert config_hash(base) != config_hash({**base, "seed": 2})


def test_report_csv_format(tmp_path):
    path = tmp_path / "report.csv"
    write_report_csv(path, [(0, "pehe", "", 1.5), (-1, "rate", 0.99, 0.25)])
    lines = path.read_text().splitlines()
    assert lines[0] == "task_id,metric,u,value"
    assert lines[1] == "0,pehe,,1.5"
    assert lines[2] == "-1,rate,0.99,0.25"


# -------------------------------------------------------------- config

MINIMAL = {
    "dgp": {"d": 4, "e": 3, "n_interventions": 6, "m_per_task": 20,
            "n_controls": 100, "noise_sd": 0.2},
}


def test_config_defaults_and_seed_derivation():
    cfg = config_from_dict({**MINIMAL, "seed": 7})
    assert cfg.seed == 7
    assert cfg.dgp.seed == 7
    assert cfg.split_seed == 7 + 1000
    assert cfg.nuisance.seed == 7 + 2000
    assert cfg.train.seed == 7 + 3000
    assert cfg.eval_seed == 7 + 4000
    assert cfg.frac_val == 0.1 and cfg.frac_test == 0.2
    assert cfg.pseudo_mode == "treated_only"
    assert cfg.null_kind == "zero"
    assert cfg.gamma_source == "estimated"


def test_config_explicit_seeds_win():
    raw = {**MINIMAL, "seed": 7, "split": {"seed": 42},
           "dgp": {**MINIMAL["dgp"], "seed": 13}}
    cfg = config_from_dict(raw)
    assert cfg.dgp.seed == 13
    assert cfg.split_seed == 42
    assert cfg.train.seed == 7 + 3000


def test_config_overrides():
    cfg = config_from_dict({**MINIMAL, "seed": 1, "out_dir": "a"},
                           seed_override=9, out_override="b")
    assert cfg.seed == 9 and cfg.out_dir == "b"
    assert cfg.dgp.seed == 9


def test_config_round_trips_through_to_dict():
    cfg = config_from_dict({**MINIMAL, "seed": 5, "out_dir": "runs/x",
                            "train": {"iterations": 17},
                            "eval": {"us": [0.9, 0.99]}})
    again = config_from_dict(cfg.to_dict())
    assert again == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_dict({**MINIMAL, "dpg": {}})
    with pytest.raises(ConfigError, match="section 'train'"):
        config_from_dict({**MINIMAL, "train": {"iteratons": 5}})
    with pytest.raises(ConfigError, match="must be an object"):
        config_from_dict({**MINIMAL, "train": 5})


def test_config_requires_dgp():
    with pytest.raises(ConfigError, match="dgp"):
        config_from_dict({"seed": 1})


def test_config_validates_values():
    with pytest.raises(ConfigError):
        config_from_dict({**MINIMAL, "eval": {"us": [1.5]}})
    with pytest.raises(ConfigError):
        config_from_dict({**MINIMAL, "pseudo": {"mode": "nobody"}})


def test_load_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**MINIMAL, "seed": 3, "out_dir": "o"}))
    cfg = load_config(path)
    assert cfg.seed == 3
    with pytest.raises(MissingInputError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)
    lst = tmp_path / "list.json"
    lst.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="root"):
        load_config(lst)
