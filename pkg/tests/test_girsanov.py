import math

import numpy as np
import pytest

from algorithms.girsanov import (
    LikelihoodWeight, integrand_sup, ito_log_sum, log_drift_weight, log_drift_weights, log_observation_weight,
    martingale_mean, second_moment_bound_check, solve_diffusion, weight_l1_distance,
)
from algorithms.policy import interpolate, open_loop_policy, perturb_policy, quantize_actions
from algorithms.sde_core import TimeGrid, sample_brownian, simulate_coarsened_range, simulate_path
from models.fixtures import build_constant_drift, build_identity, build_tanh_drift, feedback_policy
from utils.errors import NumericError, ValidationError


def test_ito_log_sum_by_hand():
    theta = np.array([[[1.0], [2.0]]])
    incr = np.array([[[0.5], [-0.25]]])
    value = ito_log_sum(theta, incr, 0.1)
    assert value[0] == pytest.approx(1.0 * 0.5 + 2.0 * -0.25 - 0.5 * (1.0 + 4.0) * 0.1)
    with pytest.raises(ValidationError):
        ito_log_sum(theta, incr[:, :1], 0.1)


def test_singular_diffusion_reports_point():
    sigma = np.array([[[1.0]], [[0.0]]])
    with pytest.raises(NumericError) as info:
        solve_diffusion(sigma, np.ones((2, 1)), np.array([[0.0], [3.5]]))
    assert info.value.point == [3.5]


def test_likelihood_weight_checks_components():
    w = LikelihoodWeight(0.3, "team_coupling", (0.1, 0.2))
    assert w.weight == pytest.approx(math.exp(0.3))
    with pytest.raises(NumericError):
        LikelihoodWeight(0.3, "team_coupling", (0.1, 0.1))
    with pytest.raises(ValidationError):
        LikelihoodWeight(0.0, "unknown")


def test_identity_weight_is_exactly_one():
    fx = build_identity(macro_steps=2)
    policy = fx.reference_policies()[1]
    est = martingale_mean(fx.model, policy, fx.time_grid, 500, np.zeros(1), 3)
    assert est.mean == 1.0
    assert est.standard_error == 0.0


def test_constant_drift_single_path_weight():
    """b ≡ μ、σ = 1 时 log Z_T = μ·B_T - μ²T/2"""
    fx = build_constant_drift(macro_steps=2, mu=0.5)
    grid = fx.time_grid
    plan = sample_brownian(grid, 1, 11, 0)
    policy = interpolate(open_loop_policy(fx.action_grid, [0, 2]), grid)
    path = simulate_path(fx.model.reference(), policy, grid, plan, np.zeros(1))
    weight = log_drift_weight(path, fx.model)
    expected = 0.5 * plan.increments.sum() - 0.125 * grid.horizon
    assert weight.log_weight == pytest.approx(expected)


def test_observation_weight_vanishes_without_signal():
    grid = TimeGrid(1.0, 2, 4)
    x = np.zeros(grid.n_inner + 1)
    dy = np.full(grid.n_inner, 0.1)
    zero = log_observation_weight(x, dy, lambda s: np.zeros((s.shape[0], 1)), grid)
    assert zero.log_weight == 0.0
    one = log_observation_weight(x, dy, lambda s: np.ones((s.shape[0], 1)), grid)
    assert one.log_weight == pytest.approx(0.1 * grid.n_inner - 0.5 * grid.horizon)


def test_tanh_drift_weight_has_unit_mean():
    fx = build_tanh_drift(macro_steps=4)
    policy = feedback_policy(fx.templates()[0])
    est = martingale_mean(fx.model, policy, fx.time_grid, 20000, np.zeros(1), 5)
    assert est.within(1.0, band=4.0)


def test_constant_drift_second_moment_is_exact():
    fx = build_constant_drift(macro_steps=2, mu=0.5)
    check = second_moment_bound_check(fx.model, fx.reference_policies()[1], fx.time_grid, 40000, np.zeros(1), 6,
                                      band=4.0)
    assert check["estimate"].within(math.exp(0.25), band=4.0)
    assert check["M"] == pytest.approx(0.25)
    assert check["passed"]


def test_integrand_sup_for_tanh_drift():
    fx = build_tanh_drift()
    assert integrand_sup(fx.model, probe_radius=3.0) == pytest.approx(math.tanh(3.0) ** 2)


def test_weight_l1_distance_zero_and_positive():
    fx = build_tanh_drift(macro_steps=4)
    base = feedback_policy(fx.templates()[0])
    zero = weight_l1_distance(base, base, fx.model, fx.time_grid, 2000, np.zeros(1), 7)
    assert zero.mean == 0.0 and zero.standard_error == 0.0
    moved = weight_l1_distance(perturb_policy(base, 0.5), base, fx.model, fx.time_grid, 2000, np.zeros(1), 7)
    assert moved.mean > 0.0


def test_drift_weight_consistent_under_refinement():
    fx = build_tanh_drift(macro_steps=4, inner_refine=64)
    fine_grid = fx.time_grid
    table = feedback_policy(fx.templates()[0])

    def log_z(grid):
        batch = simulate_coarsened_range(fx.model, interpolate(table, grid), grid, fine_grid, 3, 0, 400, fx.x0,
                                         reference=True)
        return log_drift_weights(batch, fx.model)

    fine = log_z(fine_grid)
    gaps = [float(np.mean(np.abs(log_z(TimeGrid(fine_grid.horizon, 4, 64 // f)) - fine))) for f in (8, 4, 2)]
    assert gaps[0] > gaps[1] > gaps[2] > 0.0
