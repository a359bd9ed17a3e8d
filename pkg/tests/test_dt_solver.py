import numpy as np
import pytest

from algorithms.dt_solver import (
    DiscreteControlProblem, PomdpProblem, SolverGrids, TeamProblem, backward_induction, build_discrete_mdp,
    enumerate_markov_policies, enumerate_open_loop, enumerate_wide_sense, random_team_challengers, solve_discrete,
    team_brute_force, team_tuple_from_index,
)
from algorithms.policy import StateGrid, quantize_actions
from algorithms.sde_core import NoiseBank, TimeGrid
from models.fixtures import build_pomdp_informative, build_team_decoupled, tanh_square_cost
from utils.errors import KernelBuildError, ValidationError


def _swap_problem(macro_steps: int) -> DiscreteControlProblem:
    """动作 0 原地不动，动作 1 交换两个状态"""
    kernel = np.zeros((2, 2, 2))
    kernel[0, 0, 0] = kernel[1, 0, 1] = 1.0
    kernel[0, 1, 1] = kernel[1, 1, 0] = 1.0
    return DiscreteControlProblem(kernel, np.array([[1.0, 2.0], [0.0, 0.5]]), np.array([0.0, 3.0]),
                                  macro_steps, samples_per_row=1)


def test_backward_induction_by_hand():
    values, policy = backward_induction(_swap_problem(1))
    assert values.values[0].tolist() == [1.0, 0.5]
    assert policy.tables[0].argmax(axis=1).tolist() == [0, 1]
    values, policy = backward_induction(_swap_problem(2))
    assert values.values[0].tolist() == [2.0, 0.5]
    assert policy.tables[0].argmax(axis=1).tolist() == [0, 0]


@pytest.mark.parametrize("steps", [1, 2, 3])
def test_enumeration_matches_backward_induction(steps):
    problem = _swap_problem(steps)
    values, _ = backward_induction(problem)
    best, _ = enumerate_markov_policies(problem)
    assert np.array_equal(best, values.values[0])


def test_enumeration_guard():
    with pytest.raises(ValidationError):
        enumerate_markov_policies(_swap_problem(3), guard=10)


def test_ties_pick_lowest_action():
    kernel = np.zeros((1, 3, 1))
    kernel[0, :, 0] = 1.0
    problem = DiscreteControlProblem(kernel, np.array([[2.0, 1.0, 1.0]]), np.zeros(1), 1, 1)
    _, policy = backward_induction(problem)
    assert policy.tables[0][0].tolist() == [0.0, 1.0, 0.0]


def test_problem_validation():
    problem = _swap_problem(1)
    with pytest.raises(ValidationError):
        DiscreteControlProblem(problem.kernel * 0.5, problem.stage_cost, problem.terminal, 1, 1)
    with pytest.raises(ValidationError):
        DiscreteControlProblem(problem.kernel, -problem.stage_cost, problem.terminal, 1, 1)
    assert problem.with_horizon(4).macro_steps == 4


@pytest.fixture
def solver_grids():
    return SolverGrids(StateGrid.uniform([-2.0], [2.0], [3]), quantize_actions(((-1.0,), (1.0,)), 2),
                       TimeGrid(1.0, 2, 4))


def test_build_discrete_mdp_rows(tanh_model, solver_grids):
    problem = build_discrete_mdp(tanh_model, solver_grids.state_grid, solver_grids.action_grid,
                                 solver_grids.time_grid, 200, tanh_square_cost(1.0), master_seed=3)
    assert problem.kernel.shape == (3, 2, 3)
    assert np.allclose(problem.kernel.sum(axis=2), 1.0)
    assert np.all(problem.stage_cost >= 0)
    assert problem.h == pytest.approx(0.5)
    with pytest.raises(KernelBuildError) as info:
        build_discrete_mdp(tanh_model, solver_grids.state_grid, solver_grids.action_grid,
                           solver_grids.time_grid, 50, tanh_square_cost(1.0))
    assert info.value.cell == 0
    assert "所有转移核行" in str(info.value)


def test_solve_discrete_is_reproducible(tanh_model, solver_grids):
    first = solve_discrete(tanh_model, tanh_square_cost(1.0), solver_grids, 200, [0.0], master_seed=9)
    second = solve_discrete(tanh_model, tanh_square_cost(1.0), solver_grids, 200, [0.0], master_seed=9,
                            bank=NoiseBank())
    assert first.value == second.value
    assert first.markov_policy == second.markov_policy
    assert first.initial_cell == 1


def test_wide_sense_never_worse_than_open_loop():
    fx = build_pomdp_informative(inner_refine=4)
    problem = PomdpProblem(fx.model, fx.cost, fx.time_grid, fx.x0, 2000, master_seed=4)
    bank = NoiseBank()
    _, wide = enumerate_wide_sense(problem, fx.templates()[0], bank)
    _, open_loop = enumerate_open_loop(problem, fx.action_grid, bank)
    assert wide.mean <= open_loop.mean + 1e-9


def test_wide_sense_guard():
    fx = build_pomdp_informative(macro_steps=4, inner_refine=2)
    problem = PomdpProblem(fx.model, fx.cost, fx.time_grid, fx.x0, 10)
    with pytest.raises(ValidationError):
        enumerate_wide_sense(problem, fx.templates()[0])


def test_team_brute_force_beats_challengers():
    fx = build_team_decoupled(inner_refine=4)
    problem = TeamProblem(fx.model, fx.cost, fx.time_grid, fx.x0, 200, master_seed=2)
    templates = fx.templates()
    bank = NoiseBank()
    best, est = team_brute_force(problem, templates, bank=bank)
    assert best.n_agents == 2
    for _, challenger in random_team_challengers(problem, templates, 10, seed=1, bank=bank):
        assert est.mean <= challenger.mean
    with pytest.raises(ValidationError):
        team_brute_force(problem, templates, guard=100)


def test_team_index_most_significant_agent_first():
    templates = build_team_decoupled().templates()
    team = team_tuple_from_index(templates, 1)
    assert team.policies[0] == team_tuple_from_index(templates, 0).policies[0]
    assert team.policies[1] != team_tuple_from_index(templates, 0).policies[1]


def test_backward_induction_matches_enumeration_on_random_problems():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        S, A, N = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        while N > 1 and A ** (N * S) > 50_000:
            N -= 1
        kernel = rng.random((S, A, S))
        kernel /= kernel.sum(axis=2, keepdims=True)
        problem = DiscreteControlProblem(kernel, rng.random((S, A)), rng.random(S), N, 1)
        values, _ = backward_induction(problem)
        best, _ = enumerate_markov_policies(problem)
        assert np.allclose(best, values.values[0], rtol=0.0, atol=1e-12)
