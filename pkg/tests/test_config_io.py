import glob
import os

import pytest
import yaml

from io_ops.config_io import EXPERIMENT_KINDS, config_from_dict, dump_config, load_config
from utils.errors import ValidationError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def test_shipped_configs_parse():
    paths = sorted(glob.glob(os.path.join(CONFIG_DIR, "*.yaml")))
    assert {os.path.splitext(os.path.basename(p))[0] for p in paths} == set(EXPERIMENT_KINDS)
    for path in paths:
        config = load_config(path)
        assert config.kind == os.path.splitext(os.path.basename(path))[0]


def test_shipped_estimator_config_uses_capped_quadratic_cost():
    config = load_config(os.path.join(CONFIG_DIR, "estimator_equivalence.yaml"))
    assert config.fixture == "tanh_drift"
    assert config.fixture_params["cost"] == "capped_quadratic"
    assert config.fixture_params["macro_steps"] == 4


def test_seed_is_required():
    with pytest.raises(ValidationError):
        config_from_dict({"kind": "martingale", "fixture": "identity"})
    with pytest.raises(ValidationError):
        config_from_dict({"kind": "martingale", "fixture": "identity", "seed": -1})
    with pytest.raises(ValidationError):
        config_from_dict({"kind": "martingale", "fixture": "identity", "seed": True})


def test_unknown_sections_and_keys_rejected():
    base = {"kind": "martingale", "fixture": "identity", "seed": 1}
    with pytest.raises(ValidationError):
        config_from_dict(dict(base, plots={}))
    with pytest.raises(ValidationError):
        config_from_dict(dict(base, sampling={"n_samples": 10}))
    with pytest.raises(ValidationError):
        config_from_dict(dict(base, grid={"dt": 0.1}))
    with pytest.raises(ValidationError):
        config_from_dict(dict(base, tolerances={"se_band": 0}))
    with pytest.raises(ValidationError):
        config_from_dict(dict(base, kind="plot"))


def test_grid_sections_merge_into_fixture_params():
    config = config_from_dict({
        "kind": "h_sweep", "seed": 3,
        "fixture": {"name": "tanh_drift", "params": {"x0": 0.5}},
        "grid": {"horizon": 2.0}, "grids": {"cells": 5},
    })
    assert config.fixture_params == {"x0": 0.5, "horizon": 2.0, "cells": 5}
    assert config.fixture == "tanh_drift"
    assert config_from_dict({"kind": "validate", "seed": 0, "fixture": "identity"}).fixture == "identity"


def test_dump_then_load(tmp_path):
    config = config_from_dict({
        "kind": "team_enum", "seed": 42, "fixture": {"name": "team_coupled", "params": {"x0": (0.5, -0.5)}},
        "sampling": {"n_paths": 100}, "tolerances": {"se_band": 4.0}, "options": {"challengers": 5},
    })
    path = str(tmp_path / "team_enum.yaml")
    dump_config(config, path)
    with open(path, encoding="utf-8") as f:
        assert yaml.safe_load(f)["fixture"]["params"]["x0"] == [0.5, -0.5]
    loaded = load_config(path)
    assert loaded.to_dict()["sampling"] == {"n_paths": 100}
    assert loaded.options == {"challengers": 5}
    assert loaded.seed == 42


def test_load_rejects_bad_files(tmp_path):
    with pytest.raises(ValidationError):
        load_config(str(tmp_path / "missing.yaml"))
    bad = tmp_path / "config.json"
    bad.write_text("{}", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_config(str(bad))
    broken = tmp_path / "broken.yaml"
    broken.write_text("kind: [unclosed", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_config(str(broken))
