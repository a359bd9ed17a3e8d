import json

import numpy as np
import pytest

from algorithms.policy import TeamPolicyTuple, open_loop_policy, perturb_policy
from io_ops.policy_io import load_policy, save_policy
from models.fixtures import build_pomdp_informative, build_tanh_drift, build_team_coupled, feedback_policy
from utils.errors import ValidationError


def _markov():
    return perturb_policy(feedback_policy(build_tanh_drift(macro_steps=2).templates()[0]), 0.1)


def _wide_sense():
    return perturb_policy(feedback_policy(build_pomdp_informative().templates()[0]), 1.0 / 3.0)


@pytest.mark.parametrize("make", [_markov, _wide_sense])
def test_table_policy_bit_exact(tmp_path, make):
    policy = make()
    loaded = load_policy(save_policy(policy, str(tmp_path / "policy.json")))
    assert loaded == policy
    assert all(np.array_equal(a, b) for a, b in zip(loaded.tables, policy.tables))


def test_relaxed_control(tmp_path):
    policy = open_loop_policy(build_pomdp_informative().action_grid, [1, 0])
    assert load_policy(save_policy(policy, str(tmp_path / "open.json"))) == policy


def test_team_tuple(tmp_path):
    team = build_team_coupled().reference_policies()[2]
    loaded = load_policy(save_policy(team, str(tmp_path / "team.json")))
    assert isinstance(loaded, TeamPolicyTuple)
    assert loaded.policies == team.policies


def test_malformed_policy_files(tmp_path):
    with pytest.raises(ValidationError):
        load_policy(str(tmp_path / "missing.json"))
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"information": "state", "tables": {}}), encoding="utf-8")
    with pytest.raises(ValidationError):
        load_policy(str(path))
