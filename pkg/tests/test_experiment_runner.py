import numpy as np
import pytest

from io_ops.config_io import config_from_dict
from services.experiment_runner import DYNKIN_TEST_FUNCTIONS
from services.result_workspace import ResultWorkspace
from utils.errors import ExperimentError
from utils.parallel import set_worker_count

SMALL_FULL = {"macro_steps": 2, "inner_refine": 4}


def _config(kind, fixture, params=None, sampling=None, options=None, tolerances=None, seed=5):
    return config_from_dict({
        "kind": kind, "seed": seed, "fixture": {"name": fixture, "params": dict(params or {})},
        "sampling": dict(sampling or {}), "options": dict(options or {}), "tolerances": dict(tolerances or {}),
    })


def test_validate_full_fixture(runner):
    record = runner.run(_config("validate", "tanh_drift", SMALL_FULL, {"n_paths": 2000}, {"probes": 128}))
    assert record.passed
    assert set(record.flags) == {"assumptions", "moment_bound", "cost_bounds"}
    assert record.inputs["effective"]["probes"] == 128
    assert record.inputs["effective"]["probe_radius"] == 3.0


def test_validate_coupled_team(runner):
    record = runner.run(_config("validate", "team_coupled", {"inner_refine": 4}))
    assert record.flags["coupling_bound"]
    assert record.flags["assumptions/agent0"] and record.flags["assumptions/agent1"]


def test_martingale_identity_is_exact(runner):
    record = runner.run(_config("martingale", "identity", SMALL_FULL, {"n_paths": 300}))
    assert record.passed
    for j in range(3):
        assert record.estimates[f"mean_weight/p{j}"]["mean"] == 1.0
        assert record.estimates[f"mean_weight/p{j}"]["standard_error"] == 0.0
    assert record.inputs["tolerances"]["se_band"] == 3.0


def test_unknown_fixture_is_an_experiment_error(runner):
    with pytest.raises(ExperimentError) as info:
        runner.run(_config("martingale", "no_such_fixture"))
    assert info.value.kind == "martingale"


def test_wrong_structure_is_an_experiment_error(runner):
    with pytest.raises(ExperimentError) as info:
        runner.run(_config("l1_continuity", "pomdp_informative"))
    assert info.value.fixture == "pomdp_informative"


def test_l1_continuity_zero_at_zero(runner):
    record = runner.run(_config("l1_continuity", "tanh_drift", SMALL_FULL, {"n_paths": 2000},
                                {"epsilons": [0.05, 0.2]}))
    assert record.flags["zero_at_zero"]
    assert record.flags["positive"]
    assert list(record.estimates) == ["l1/eps=0.2", "l1/eps=0.05", "l1/eps=0"]


def test_h_sweep_layout(runner):
    record = runner.run(_config("h_sweep", "tanh_drift", dict(SMALL_FULL, cells=5, levels=2),
                                {"n_kernel": 200, "n_eval": 2000},
                                {"macro_steps": [2, 4], "delta_divisor": 32}))
    assert [row["macro_steps"] for row in record.table] == [2, 4]
    assert record.table[0]["h"] == 0.5
    assert {"lift_consistency", "gaps_non_increasing", "finest_not_worse", "kernel_rows",
            "policy_rows"} <= set(record.flags)
    assert record.flags["kernel_rows"] and record.flags["policy_rows"]


def test_h_sweep_rejects_uneven_divisor(runner):
    with pytest.raises(ExperimentError):
        runner.run(_config("h_sweep", "tanh_drift", SMALL_FULL, {"n_kernel": 200, "n_eval": 100},
                           {"macro_steps": [3], "delta_divisor": 32}))


def test_team_enum_decoupled(runner):
    record = runner.run(_config("team_enum", "team_decoupled", {"inner_refine": 4, "n_paths": 300},
                                options={"challengers": 10, "centralized_bound": False},
                                tolerances={"se_band": 4.0}))
    assert record.flags["beats_challengers"]
    assert record.flags["separable_sum"]
    assert "solo_sum" in record.estimates
    assert sum(row["role"] == "challenger" for row in record.table) == 10
    assert record.flags["beats_challengers/holdout"]
    assert sum(row["role"] == "challenger_holdout" for row in record.table) == 10
    assert record.estimates["team_optimum/holdout"]["mean"] != record.estimates["team_optimum"]["mean"]


def test_team_enum_coupled_adds_centralized_row(runner):
    record = runner.run(_config("team_enum", "team_coupled", {"inner_refine": 4, "n_paths": 100},
                                sampling={"n_kernel": 200}, options={"challengers": 5}))
    assert record.flags["beats_challengers"]
    assert "separable_sum" not in record.flags
    assert [row for row in record.table if row["role"] == "centralized"]


def test_estimator_equivalence_worker_invariance(runner):
    config = _config("estimator_equivalence", "tanh_drift", SMALL_FULL, {"n_paths": 600})
    serial = runner.run(config)
    set_worker_count(3)
    parallel = runner.run(_config("estimator_equivalence", "tanh_drift", SMALL_FULL,
                                  {"n_paths": 600, "chunk_size": 100}))
    assert parallel.inputs["effective"]["workers"] == 3
    assert parallel.inputs["effective"]["chunk_size"] == 100
    assert parallel.stochastic_outputs() == serial.stochastic_outputs()


def test_self_normalized_is_diagnostic_only(runner):
    record = runner.run(_config("estimator_equivalence", "identity", SMALL_FULL, {"n_paths": 200},
                                {"self_normalize": True}))
    assert "self_normalized/p0" in record.estimates
    assert not any(name.startswith("self_normalized") for name in record.flags)
    assert len(record.warnings) == 3


def test_replay_is_bit_identical(runner, tmp_path):
    record = runner.run(_config("martingale", "tanh_drift", SMALL_FULL, {"n_paths": 400}))
    path, _ = ResultWorkspace(str(tmp_path)).save(record)
    replayed = runner.replay(path)
    assert replayed.flags["replay_identical"]
    assert replayed.inputs["replay"]["comparison"] is False
    compared = runner.replay(path, seed=record.seed + 1)
    assert "replay_identical" not in compared.flags
    assert compared.seed == record.seed + 1
    assert compared.warnings


def test_independence_audit_flags_anticipation(runner):
    record = runner.run(_config("independence_audit", "pomdp_informative", {"inner_refine": 4},
                                {"n_paths": 10_000}, {"anticipative": True}, {"se_band": 5.0}))
    assert all(record.flags[f"audit/p{j}"] for j in range(3))
    assert record.flags["anticipative_detected"]
    assert record.passed


@pytest.mark.slow
def test_pomdp_information_value(runner):
    record = runner.run(_config("pomdp_enum", "pomdp_informative", {"inner_refine": 8}, None,
                                {"baseline_fixture": "pomdp_uninformative"}, {"se_band": 4.0}))
    assert record.flags["primary/information_value"]
    assert record.flags["baseline/no_information_value"]
    assert record.estimates["primary/wide_sense"]["mean"] < record.estimates["primary/open_loop"]["mean"]


def test_dynkin_functions_have_compact_support():
    x = np.array([[0.3], [-1.2], [2.5], [9.0]])
    step = 1e-5
    for name, (f, grad_f, hess_f) in DYNKIN_TEST_FUNCTIONS.items():
        numeric_grad = (f(x + step) - f(x - step)) / (2 * step)
        assert grad_f(x)[:, 0] == pytest.approx(numeric_grad, rel=1e-5, abs=1e-7), name
        numeric_hess = (grad_f(x + step)[:, 0] - grad_f(x - step)[:, 0]) / (2 * step)
        assert hess_f(x)[:, 0, 0] == pytest.approx(numeric_hess, rel=1e-5, abs=1e-7), name
        assert f(x)[3] == 0.0 and grad_f(x)[3, 0] == 0.0 and hess_f(x)[3, 0, 0] == 0.0


def test_dynkin_shares_paths_across_refinements(runner):
    record = runner.run(_config("dynkin", "tanh_drift", SMALL_FULL, {"n_paths": 2000},
                                {"refinements": [1, 2, 4]}, {"se_band": 4.0}))
    assert all(record.flags[f"residual/{name}"] for name in DYNKIN_TEST_FUNCTIONS)
    assert len([row for row in record.table if row["function"] == "square"]) == 3
    with pytest.raises(ExperimentError):
        runner.run(_config("dynkin", "tanh_drift", SMALL_FULL, {"n_paths": 100}, {"refinements": [1, 3, 4]}))
