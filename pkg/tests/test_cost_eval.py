import numpy as np
import pytest

from algorithms.policy import constant_policy, quantize_actions
from algorithms.sde_core import NoiseBank, TimeGrid
from inference.cost_eval import (
    CostSpec, check_cost, constant_cost, mc_cost_direct, mc_cost_pomdp, mc_cost_pomdp_direct, mc_cost_reweighted,
    mc_cost_team_coupled, mc_cost_team_coupled_direct, path_costs, stage_cost_hat, weighted_estimate,
)
from models.fixtures import build_pomdp_y_drift, build_tanh_drift, build_team_coupled, tanh_square_cost
from utils.errors import ValidationError
from utils.estimates import agree

UNIT_ACTIONS = quantize_actions(((-1.0,), (1.0,)), 3)


def test_constant_cost_is_exact(identity_model, grid):
    cost = constant_cost(1.0, 0.5, grid.horizon)
    policy = constant_policy(UNIT_ACTIONS, grid.macro_steps)
    direct = mc_cost_direct(identity_model, policy, cost, grid, 200, np.zeros(1))
    assert direct.mean == 1.5
    assert direct.standard_error == 0.0
    reweighted = mc_cost_reweighted(identity_model, policy, cost, grid, 200, np.zeros(1))
    assert reweighted.mean == 1.5


def test_path_costs_left_point():
    states = np.array([[[0.0], [1.0], [2.0]]])
    actions = np.zeros((1, 2, 1))
    cost = CostSpec(lambda x, u: x[:, 0], lambda x: 10 * x[:, 0], 1.0)
    assert path_costs(states, actions, cost, 0.5)[0] == pytest.approx(0.5 * (0.0 + 1.0) + 20.0)
    assert path_costs(states, actions, cost, 0.5, terminal=False)[0] == pytest.approx(0.5)


def test_check_cost():
    report = check_cost(tanh_square_cost(1.0), 1, ((-1.0,), (1.0,)))
    assert report["passed"]
    negative = CostSpec(lambda x, u: -np.ones(x.shape[0]), lambda x: np.zeros(x.shape[0]), 1.0, 1.0, 1.0)
    assert not check_cost(negative, 1, ((-1.0,), (1.0,)))["nonnegative"]
    understated = tanh_square_cost(1.0, weight=2.0)
    understated = CostSpec(understated.running, understated.terminal, 1.0, running_cap=0.5, terminal_cap=2.0)
    report = check_cost(understated, 1, ((-1.0,), (1.0,)))
    assert report["nonnegative"] and not report["bounded"] and not report["passed"]


def test_horizon_mismatch_rejected(identity_model, grid):
    policy = constant_policy(UNIT_ACTIONS, grid.macro_steps)
    with pytest.raises(ValidationError):
        mc_cost_direct(identity_model, policy, tanh_square_cost(2.0), grid, 10, np.zeros(1))


def test_direct_and_reweighted_agree_full():
    fx = build_tanh_drift(macro_steps=4, inner_refine=8)
    policy = fx.reference_policies()[2]
    bank = NoiseBank()
    direct = mc_cost_direct(fx.model, policy, fx.cost, fx.time_grid, 4000, fx.x0, 7, bank)
    reweighted = mc_cost_reweighted(fx.model, policy, fx.cost, fx.time_grid, 4000, fx.x0, 7, bank)
    assert agree(direct, reweighted, band=4.0)


def test_direct_and_reweighted_agree_capped_quadratic():
    fx = build_tanh_drift(macro_steps=4, inner_refine=8, cost="capped_quadratic")
    assert fx.cost.name == "capped_quadratic"
    assert check_cost(fx.cost, fx.model.state_dim, fx.action_grid.box)["passed"]
    policy = fx.reference_policies()[2]
    bank = NoiseBank()
    direct = mc_cost_direct(fx.model, policy, fx.cost, fx.time_grid, 4000, fx.x0, 7, bank)
    reweighted = mc_cost_reweighted(fx.model, policy, fx.cost, fx.time_grid, 4000, fx.x0, 7, bank)
    assert agree(direct, reweighted, band=4.0)


def test_direct_and_reweighted_agree_observed():
    fx = build_pomdp_y_drift(inner_refine=8)
    policy = fx.reference_policies()[2]
    direct = mc_cost_pomdp_direct(fx.model, policy, fx.cost, fx.time_grid, 4000, np.asarray(fx.x0), 11)
    reweighted = mc_cost_pomdp(fx.model, policy, fx.cost, fx.time_grid, 4000, np.asarray(fx.x0), 11)
    assert agree(direct, reweighted, band=4.0)


def test_direct_and_reweighted_agree_coupled_team():
    fx = build_team_coupled(inner_refine=8)
    team = fx.reference_policies()[1]
    direct = mc_cost_team_coupled_direct(fx.model, team, fx.cost, fx.time_grid, 3000, fx.x0, 5)
    reweighted = mc_cost_team_coupled(fx.model, team, fx.cost, fx.time_grid, 3000, fx.x0, 5)
    assert agree(direct, reweighted, band=4.0)


def test_self_normalized_matches_unit_weights():
    costs = np.array([1.0, 2.0, 4.0, 8.0])
    plain = weighted_estimate(costs, np.zeros(4), "plain")
    normalized = weighted_estimate(costs, np.zeros(4), "plain", self_normalize=True)
    assert normalized.mean == pytest.approx(plain.mean)
    assert normalized.label == "plain/self_normalized"
    with pytest.raises(ValidationError):
        weighted_estimate(costs, np.full(4, -np.inf), "zero", self_normalize=True)


def test_stage_cost_of_constant_running_cost(identity_model):
    grid = TimeGrid(1.0, 4, 8)
    est = stage_cost_hat(identity_model, [0.0], [0.0], constant_cost(1.0, 0.0), grid, 50)
    assert est.mean == pytest.approx(grid.h)
    assert est.standard_error == pytest.approx(0.0, abs=1e-15)


def test_stage_cost_uses_shared_kernel_noise(tanh_model):
    grid = TimeGrid(1.0, 2, 8)
    bank = NoiseBank()
    a = stage_cost_hat(tanh_model, [0.5], [1.0], tanh_square_cost(1.0), grid, 100, 3, 0, bank)
    b = stage_cost_hat(tanh_model, [0.5], [1.0], tanh_square_cost(1.0), grid, 100, 3, 0, bank)
    assert a == b
    assert len(bank) == 1
