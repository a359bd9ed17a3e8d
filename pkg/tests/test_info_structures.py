from dataclasses import replace

import numpy as np
import pytest

from algorithms.info_structures import (
    independence_audit, simulate_pomdp_range, simulate_team_decoupled_range, simulate_team_local_meas_range,
    validate_coupled_team, validate_partially_observed, validate_team_local,
)
from algorithms.policy import StateGrid, uniform_markov
from algorithms.sde_core import NoiseBank, TimeGrid
from models.fixtures import (
    build_pomdp_informative, build_pomdp_uninformative, build_team_coupled, build_team_decoupled,
    build_team_local_meas,
)
from utils.errors import ValidationError


def test_reference_observations_do_not_depend_on_signal():
    informative = build_pomdp_informative(inner_refine=4)
    blind = build_pomdp_uninformative(inner_refine=4)
    policy = informative.reference_policies()[1]
    a = simulate_pomdp_range(informative.model, policy, informative.time_grid, 3, 0, 50, np.zeros(1))
    b = simulate_pomdp_range(blind.model, policy, blind.time_grid, 3, 0, 50, np.zeros(1))
    assert np.array_equal(a.y_samples, b.y_samples)
    assert np.all(a.y_samples[:, 0] == 0.0)
    assert a.action_indices.shape == (50, 2, 1)


def test_direct_observations_carry_signal():
    fx = build_pomdp_informative(inner_refine=4)
    policy = fx.reference_policies()[0]
    ref = simulate_pomdp_range(fx.model, policy, fx.time_grid, 3, 0, 20, np.zeros(1))
    direct = simulate_pomdp_range(fx.model, policy, fx.time_grid, 3, 0, 20, np.zeros(1), direct=True)
    g = fx.model.observation_at(direct.states[:, :-1].reshape(-1, 1)).reshape(20, -1, 1)
    assert np.allclose(direct.observation_increments - ref.observation_increments, g * fx.time_grid.delta)


def test_state_policy_rejected_under_partial_observation():
    fx = build_pomdp_informative(inner_refine=4)
    markov = uniform_markov(fx.action_grid, StateGrid.uniform([-1.0], [1.0], [2]), fx.time_grid.macro_steps)
    with pytest.raises(ValidationError):
        simulate_pomdp_range(fx.model, markov, fx.time_grid, 0, 0, 5, np.zeros(1))


def test_bank_shares_noise_between_policies():
    fx = build_team_local_meas(inner_refine=4)
    bank = NoiseBank()
    first, second = fx.reference_policies()[0], fx.reference_policies()[2]
    a = simulate_team_local_meas_range(fx.model, first, fx.time_grid, 8, 0, 30, np.zeros(1), bank)
    b = simulate_team_local_meas_range(fx.model, second, fx.time_grid, 8, 0, 30, np.zeros(1), bank)
    assert np.array_equal(a.observation_increments, b.observation_increments)
    assert a.observation_increments.shape[2] == 2
    assert a.action_indices.shape == (30, 2, 2)


def test_decoupled_batch_layout():
    fx = build_team_coupled(inner_refine=4)
    batch = simulate_team_decoupled_range(fx.model, fx.reference_policies()[1], fx.time_grid, 2, 0, 10, fx.x0)
    assert batch.n_agents == 2
    assert batch.joint_states.shape == (10, fx.time_grid.n_inner + 1, 2)
    assert np.all(batch.states[0][:, 0, 0] == 0.5)
    assert np.all(batch.states[1][:, 0, 0] == -0.5)


def test_validate_partially_observed():
    fx = build_pomdp_informative()
    report, g_ok = validate_partially_observed(fx.model, 64, ([-3.0], [3.0]), ([-2.0], [2.0]))
    assert report.passed and g_ok
    _, tight = validate_partially_observed(replace(fx.model, observation_bound=0.5), 64, ([-3.0], [3.0]),
                                           ([-2.0], [2.0]))
    assert not tight


def test_validate_team_local_flags_each_agent():
    fx = build_team_local_meas()
    report, g_ok = validate_team_local(fx.model, 64, ([-3.0], [3.0]), ([-2.0], [2.0]))
    assert report.passed
    assert g_ok == [True, True]
    _, tight = validate_team_local(replace(fx.model, observation_bounds=(1.0, 0.1)), 64, ([-3.0], [3.0]),
                                   ([-2.0], [2.0]))
    assert tight == [True, False]


def test_validate_coupled_team():
    fx = build_team_coupled()
    reports, ok = validate_coupled_team(fx.model, 64, ([-3.0], [3.0]))
    assert all(r.passed for r in reports) and ok
    _, tight = validate_coupled_team(replace(fx.model, coupling_bound=0.1), 64, ([-3.0], [3.0]))
    assert not tight
    decoupled = build_team_decoupled()
    assert decoupled.model.coupling_bound == 0.0
    assert validate_coupled_team(decoupled.model, 16, ([-3.0], [3.0]))[1]


def test_audit_requires_enough_paths():
    grid = TimeGrid(1.0, 2, 4)
    with pytest.raises(ValidationError):
        independence_audit(np.zeros((100, 2), dtype=int), {"W": np.zeros((100, 8, 1))}, grid)


def test_audit_detects_anticipation():
    grid = TimeGrid(1.0, 2, 4)
    rng = np.random.default_rng(0)
    n = 20000
    incr = rng.standard_normal((n, grid.n_inner, 1))
    honest = rng.integers(0, 2, size=(n, 2))
    report = independence_audit(honest, {"W": incr}, grid, band=5.0)
    assert report.passed
    assert report.to_dict()["tests"] == 3
    windows = incr.reshape(n, 2, 4, 1).sum(axis=2)[:, :, 0]
    cheating = (windows > 0).astype(int)
    flagged = independence_audit(cheating, {"W": incr}, grid, band=5.0)
    assert not flagged.passed
    assert flagged.max_abs_correlation > 0.5
