import json

from pathlib import Path

import pytest

from dynpred.dataset import STRICT
from dynpred_bench.config import (
    DataSource,
    default_threads,
    load_run_config,
    parse_run_config,
)
from dynpred_bench.const import THREADS_ENV

SAMPLE_DIR = Path(__file__).parents[2] / "sample-config"

MINIMAL = {
    "simulation": {"preset": "null", "n": 40, "Q": 1, "P": 1},
    "methods": [{"kind": "static_cox"}, {"kind": "locf_landmarking"}],
    "landmarks": [2, 1],
    "horizons": [3, 4],
    "out": "runs/test",
}

INVALID = [
    # unknown key
    {"unknown": 1},
    # both data sources
    {"data": {"baseline": "b.csv", "longitudinal": "l.csv"}},
    {"methods": []},
    {"methods": [{"kind": "static_cox"}, {"kind": "static_cox"}]},
    {"methods": [{"kind": "jointmodel"}]},
    {"landmarks": [0]},
    {"landmarks": []},
    {"landmarks": ["1"]},
    # horizons must exceed every landmark
    {"horizons": [2]},
    {"horizons": {"end": 5, "step": 0}},
    {"horizons": {"step": 1}},
    {"horizons": {"end": 5, "start": 1}},
    {"horizons": []},
    {"cv": {"k": "5"}},
    {"cv": {"folds": 5}},
    {"cv": {"stratify": 1}},
    {"seed": -1},
    {"seed": 1.5},
    {"threads": 0},
    {"landmark_mode": "loose"},
    {"export": "yes"},
    {"ablation": {"fractions": [0]}},
    {"ablation": {"fractions": [0.5], "axis": "visits"}},
    {"ablation": {"axis": "subjects"}},
    {"simulation": {"preset": "null", "subjects": 5}},
]


@pytest.fixture(autouse=True)
def no_thread_env(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)


def test_minimal_config(tmp_path):
    config = parse_run_config(MINIMAL, tmp_path)
    assert config.landmarks == (1.0, 2.0)
    assert [spec.name for spec in config.methods] == ["static_cox", "locf_landmarking"]
    assert config.resolved_horizons() == {1.0: (3.0, 4.0), 2.0: (3.0, 4.0)}
    assert config.out == tmp_path / "runs" / "test"
    assert config.threads == 1
    assert config.cv.k == 5 and config.cv.repetitions == 20
    assert config.simulation.n == 40
    data = config.load_data()
    assert data.n == 40


@pytest.mark.parametrize("change", INVALID)
def test_invalid_config(change):
    with pytest.raises(ValueError):
        parse_run_config({**MINIMAL, **change})


@pytest.mark.parametrize("key", ["methods", "landmarks", "horizons", "out"])
def test_required_keys(key):
    value = {k: v for k, v in MINIMAL.items() if k != key}
    with pytest.raises(ValueError):
        parse_run_config(value)


def test_needs_a_data_source():
    value = {k: v for k, v in MINIMAL.items() if k != "simulation"}
    with pytest.raises(ValueError):
        parse_run_config(value)


def test_horizon_grid_per_landmark():
    config = parse_run_config({**MINIMAL, "landmarks": [1.5, 3], "horizons": {"end": 5}})
    assert config.resolved_horizons() == {1.5: (2.0, 3.0, 4.0, 5.0), 3.0: (4.0, 5.0)}


def test_seed_precedence():
    value = {**MINIMAL, "seed": 9, "simulation": {**MINIMAL["simulation"], "seed": 5}}
    config = parse_run_config(value)
    assert config.cv.seed == 9
    assert config.simulation.seed == 5
    overridden = parse_run_config(value, overrides={"seed": 3})
    assert overridden.cv.seed == 3
    assert overridden.simulation.seed == 3
    # without its own seed the simulation follows the run seed
    assert parse_run_config({**MINIMAL, "seed": 4}).simulation.seed == 4


def test_threads(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "4")
    assert default_threads() == 4
    assert parse_run_config(MINIMAL).threads == 4
    assert parse_run_config(MINIMAL, overrides={"threads": 2}).threads == 2
    for bad in ("many", "0"):
        monkeypatch.setenv(THREADS_ENV, bad)
        with pytest.raises(ValueError):
            default_threads()


def test_hash_ignores_threads_and_output(tmp_path):
    config = parse_run_config(MINIMAL, tmp_path)
    moved = parse_run_config(MINIMAL, tmp_path, {"threads": 3, "out": str(tmp_path / "elsewhere")})
    assert moved.threads == 3
    assert config.config_hash() == moved.config_hash()
    reseeded = parse_run_config(MINIMAL, tmp_path, {"seed": 1})
    assert config.config_hash() != reseeded.config_hash()
    out = config.serialize()
    assert "threads" not in out and "out" not in out
    assert out["cv"] == {"k": 5, "repetitions": 20, "seed": 0, "stratify": True}


def test_data_paths_are_relative_to_config(tmp_path):
    value = {k: v for k, v in MINIMAL.items() if k != "simulation"}
    value["data"] = {
        "baseline": "data/b.csv",
        "longitudinal": "data/l.csv",
        "longitudinal_covariates": ["y1"],
    }
    config = parse_run_config(value, tmp_path)
    assert config.data == DataSource(
        tmp_path / "data" / "b.csv", tmp_path / "data" / "l.csv", None, ("y1",)
    )
    assert config.serialize()["data"]["longitudinal_covariates"] == ["y1"]


@pytest.mark.parametrize(
    "value",
    [
        "b.csv",
        {"baseline": "b.csv"},
        {"baseline": "", "longitudinal": "l.csv"},
        {"baseline": "b.csv", "longitudinal": "l.csv", "format": "csv"},
        {"baseline": "b.csv", "longitudinal": "l.csv", "baseline_covariates": "x1"},
    ],
)
def test_invalid_data_source(value, tmp_path):
    with pytest.raises(ValueError):
        DataSource.from_dict(value, tmp_path)


def test_load_run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(MINIMAL))
    config = load_run_config(path)
    assert config.out == tmp_path / "runs" / "test"
    path.write_text("{not json")
    with pytest.raises(ValueError):
        load_run_config(path)
    with pytest.raises(ValueError):
        load_run_config(tmp_path / "missing.json")


@pytest.mark.parametrize("name", ["simulation.json", "pbc2.json"])
def test_sample_configs_parse(name):
    config = load_run_config(SAMPLE_DIR / name)
    assert len(config.methods) == 6
    assert config.landmark_mode == STRICT


def test_pbc2_dynforest_node_events():
    config = load_run_config(SAMPLE_DIR / "pbc2.json")
    forest = {spec.kind: spec.forest for spec in config.methods}["dynforest"]
    assert forest.min_node_events == 4
    assert forest.min_node_subjects == (15, 30, 50)
