import gc
import math
from dataclasses import replace

import numpy as np
import pytest

from algorithms import sde_core
from algorithms.policy import constant_policy, interpolate, quantize_actions
from algorithms.sde_core import (
    STREAM_POLICY, STREAM_STATE, DiffusionModel, NoiseBank, TimeGrid, coarsen_increments, draw_increments,
    dynkin_residual, ensure_valid, identity_diffusion, moment_bound_check, moment_cap, path_generator,
    sample_brownian, simulate_coarsened_range, simulate_path, simulate_paths, simulate_range, validate_assumptions,
    zero_drift,
)
from utils.errors import IntegrationError, ValidationError
from utils.parallel import set_chunk_size, set_worker_count


def _constant(model, grid, index=1):
    actions = quantize_actions(((-1.0,), (1.0,)), 3)
    return interpolate(constant_policy(actions, grid.macro_steps, index), grid)


def test_time_grid_steps():
    grid = TimeGrid(2.0, 4, 8)
    assert grid.h == pytest.approx(0.5)
    assert grid.delta == pytest.approx(2.0 / 32)
    assert grid.n_inner == 32
    assert grid.refine(2).inner_refine == 16
    assert grid.macro_index(2.0) == 3


@pytest.mark.parametrize("args", [(0.0, 4, 8), (1.0, 0, 8), (1.0, 4, 0), (math.inf, 1, 1)])
def test_time_grid_rejects_bad_values(args):
    with pytest.raises(ValidationError):
        TimeGrid(*args)


def test_path_generator_is_reproducible():
    a = path_generator(7, 3, STREAM_STATE).standard_normal(5)
    b = path_generator(7, 3, STREAM_STATE).standard_normal(5)
    c = path_generator(7, 3, STREAM_POLICY).standard_normal(5)
    d = path_generator(7, 4, STREAM_STATE).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_path_generator_rejects_negative_seed():
    with pytest.raises(ValidationError):
        path_generator(-1, 0, STREAM_STATE)


def test_coarsen_increments_sums_blocks(grid):
    plan = sample_brownian(grid, 1, 5, 0)
    coarse = coarsen_increments(plan.increments, 4)
    assert coarse.shape == (grid.n_inner // 4, 1)
    assert np.allclose(coarse[0], plan.increments[:4].sum(axis=0))
    assert np.allclose(coarse.sum(), plan.increments.sum())
    with pytest.raises(ValidationError):
        coarsen_increments(plan.increments, 3)


def test_noise_bank_matches_direct_draws(grid):
    bank = NoiseBank()
    direct = draw_increments(grid, 1, 9, 10, 20)
    cached = draw_increments(grid, 1, 9, 10, 20, bank=bank)
    again = draw_increments(grid, 1, 9, 10, 20, bank=bank)
    assert np.array_equal(direct, cached)
    assert again is cached
    assert len(bank) == 1
    other_grid = draw_increments(grid.refine(2), 1, 9, 10, 20, bank=bank)
    assert other_grid.shape[1] == 2 * grid.n_inner
    assert len(bank) == 2


def test_zero_drift_path_is_brownian(identity_model, grid):
    plan = sample_brownian(grid, 1, 3, 0)
    path = simulate_path(identity_model, _constant(identity_model, grid), grid, plan, np.array([0.25]))
    assert path.states.shape == (grid.n_inner + 1, 1)
    assert np.allclose(path.states[1:, 0], 0.25 + np.cumsum(plan.increments[:, 0]))


def test_simulation_independent_of_workers_and_chunks(tanh_model, grid):
    policy = _constant(tanh_model, grid, 2)
    set_worker_count(1)
    set_chunk_size(1024)
    base = simulate_paths(tanh_model, policy, grid, 300, 42, np.zeros(1))
    set_worker_count(3)
    set_chunk_size(17)
    other = simulate_paths(tanh_model, policy, grid, 300, 42, np.zeros(1))
    assert np.array_equal(base.states, other.states)
    assert np.array_equal(base.action_indices, other.action_indices)


def test_non_finite_state_raises_integration_error(grid):
    model = DiffusionModel(1, 1, lambda x, u: np.full((x.shape[0], 1), np.inf), identity_diffusion(1), 1.0, 0.5,
                           name="broken")
    with pytest.raises(IntegrationError) as info:
        simulate_paths(model, _constant(model, grid), grid, 4, 0, np.zeros(1))
    assert info.value.step == 1
    assert info.value.path_index == 0


def test_validate_assumptions(tanh_model):
    report = validate_assumptions(tanh_model, 64, ([-3.0], [3.0]))
    assert report.passed
    loose = validate_assumptions(replace(tanh_model, drift_bound=0.5), 64, ([-3.0], [3.0]))
    assert not loose.bound_ok
    strict = validate_assumptions(replace(tanh_model, ellipticity=0.6), 64, ([-3.0], [3.0]))
    assert not strict.ellipticity_ok
    with pytest.raises(ValidationError):
        validate_assumptions(tanh_model, 0, ([-3.0], [3.0]))


def test_moment_cap_formula(tanh_model, grid):
    cap = moment_cap(tanh_model, grid, np.zeros(1))
    expected = 1.0 + 4.0 / 3.0 + 1.0 + grid.delta
    assert cap == pytest.approx(expected)


def test_moment_bound_check_passes(tanh_model, grid):
    result = moment_bound_check(tanh_model, _constant(tanh_model, grid, 2), grid, 2000, np.zeros(1), 3)
    assert result["passed"]
    assert 0 <= result["argmax_step"] <= grid.n_inner


def test_dynkin_residual_square_function(identity_model, grid):
    est = dynkin_residual(identity_model, _constant(identity_model, grid), lambda x: np.sum(x * x, axis=1),
                          lambda x: 2.0 * x, lambda x: np.full((x.shape[0], 1, 1), 2.0), grid, 4000, np.zeros(1), 8)
    assert est.within(0.0, band=4.0)


def test_coarsened_simulation_shares_brownian_path(identity_model, grid):
    fine_grid = grid.refine(4)
    fine = simulate_coarsened_range(identity_model, _constant(identity_model, fine_grid), fine_grid, fine_grid,
                                    4, 0, 20, np.zeros(1))
    direct = simulate_range(identity_model, _constant(identity_model, fine_grid), fine_grid, 4, 0, 20, np.zeros(1))
    assert np.array_equal(fine.states, direct.states)
    coarse = simulate_coarsened_range(identity_model, _constant(identity_model, grid), grid, fine_grid,
                                      4, 0, 20, np.zeros(1))
    assert np.allclose(coarse.states, fine.states[:, ::4])
    with pytest.raises(ValidationError):
        simulate_coarsened_range(identity_model, _constant(identity_model, grid), grid.refine(3), fine_grid,
                                 4, 0, 20, np.zeros(1))


def test_validation_cache_released_with_model():
    model = DiffusionModel(1, 1, zero_drift(1), identity_diffusion(1), 1.0, 0.5, name="short_lived")
    report = ensure_valid(model)
    assert report.passed
    key = id(model)
    assert sde_core._validation_cache[key] is report
    assert ensure_valid(model) is report
    del model
    gc.collect()
    assert key not in sde_core._validation_cache
