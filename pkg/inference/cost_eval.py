"""
cost_eval.py - 各信息结构下代价泛函的蒙特卡洛估计器，以及单步阶段代价 ĉ

直接估计器在原始动力学下模拟；测度变换估计器在参考测度下模拟并乘以 Girsanov 权重。
运行代价按内网格左端点求积分（与冻结动作约定一致）。
所有估计器接受 master_seed 与可选的 NoiseBank，按路径编号分块计算、按编号归约。
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from algorithms.girsanov import (
    log_coupling_weights, log_drift_weights, log_observation_weights, log_team_observation_weights,
)
from algorithms.info_structures import (
    CoupledLocalStateTeamModel, LocalMeasurementTeamModel, PartiallyObservedModel,
    simulate_pomdp_range, simulate_team_coupled_range, simulate_team_decoupled_range,
    simulate_team_local_meas_range,
)
from algorithms.policy import as_interpolated
from algorithms.sde_core import (
    STREAM_KERNEL, DiffusionModel, NoiseBank, TimeGrid, box_probes, broadcast_x0, draw_increments,
    integrate_controlled, simulate_range,
)
from utils.errors import ValidationError
from utils.estimates import EstimateWithError, concat_samples, estimate_from_samples
from utils.parallel import map_path_chunks

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostSpec:
    """
    代价 ∫₀ᵀ c(X_t, U_t) dt + c_T(X_T)

    running(x (n, N), u (n, A)) -> (n,)；terminal(x (n, N)) -> (n,)。
    running_cap / terminal_cap 为声明的上界（抽样检查用）。
    """

    running: Callable[[np.ndarray, np.ndarray], np.ndarray]
    terminal: Callable[[np.ndarray], np.ndarray]
    horizon: float
    running_cap: float = math.inf
    terminal_cap: float = math.inf
    name: str = ""

    def running_at(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.running(x, u), dtype=float).reshape(-1), (x.shape[0],))

    def terminal_at(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.terminal(x), dtype=float).reshape(-1), (x.shape[0],))

    @property
    def total_cap(self) -> float:
        """T·sup c + sup c_T"""
        return self.horizon * self.running_cap + self.terminal_cap


def constant_cost(running: float = 0.0, terminal: float = 0.0, horizon: float = 1.0) -> CostSpec:
    """常值代价（归一化检查与平凡算例使用）"""
    return CostSpec(
        running=lambda x, u: np.full(x.shape[0], float(running)),
        terminal=lambda x: np.full(x.shape[0], float(terminal)),
        horizon=float(horizon),
        running_cap=float(running),
        terminal_cap=float(terminal),
        name=f"constant({running},{terminal})",
    )


def check_cost(cost: CostSpec, state_dim: int, action_box: Tuple[Sequence[float], Sequence[float]],
               probe_count: int = 256, probe_radius: float = 4.0, seed: int = 0) -> Dict[str, object]:
    """在探测点上检查代价非负且不超过声明上界"""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    xs = box_probes(-probe_radius * np.ones(state_dim), probe_radius * np.ones(state_dim), probe_count, rng)
    lo = np.asarray(action_box[0], dtype=float)
    hi = np.asarray(action_box[1], dtype=float)
    us = box_probes(lo, hi, probe_count, rng)
    r = cost.running_at(xs, us[np.arange(xs.shape[0]) % us.shape[0]])
    t = cost.terminal_at(xs)
    report = {
        "max_running": float(np.max(r)),
        "max_terminal": float(np.max(t)),
        "nonnegative": bool(np.min(r) >= 0 and np.min(t) >= 0),
        "bounded": bool(np.max(r) <= cost.running_cap and np.max(t) <= cost.terminal_cap),
    }
    report["passed"] = report["nonnegative"] and report["bounded"]
    return report


def _check_horizon(cost: CostSpec, grid: TimeGrid) -> None:
    if abs(cost.horizon - grid.horizon) > 1e-12 * max(1.0, grid.horizon):
        raise ValidationError(f"代价时间区间 {cost.horizon} 与网格 {grid.horizon} 不一致")


def path_costs(states: np.ndarray, inner_actions: np.ndarray, cost: CostSpec, delta: float,
               terminal: bool = True) -> np.ndarray:
    """
    逐路径代价：Σⱼ c(X_j, u_j) δ + c_T(X_S)

    Args:
        states: (n, S + 1, N)
        inner_actions: (n, S, A)
        cost: 代价
        delta: 内步长
        terminal: 是否计入终端代价
    """
    n, S = inner_actions.shape[0], inner_actions.shape[1]
    r = cost.running_at(states[:, :-1].reshape(n * S, -1), inner_actions.reshape(n * S, -1)).reshape(n, S)
    total = np.sum(r, axis=1) * delta
    if terminal:
        total = total + cost.terminal_at(states[:, -1])
    return total


def weighted_estimate(costs: np.ndarray, log_weights: np.ndarray, label: str,
                      self_normalize: bool = False) -> EstimateWithError:
    """
    Σ w·C / n（默认）或自归一化 Σ w·C / Σ w

    自归一化的标准误用比率估计的 delta 方法：sqrt(Σ w²(C - μ)²) / Σ w。
    """
    w = np.exp(np.asarray(log_weights, dtype=float))
    c = np.asarray(costs, dtype=float)
    if not self_normalize:
        return estimate_from_samples(w * c, label)
    total = float(np.sum(w))
    if total <= 0:
        raise ValidationError("权重之和为零，无法自归一化")
    mean = float(np.sum(w * c) / total)
    resid = w * (c - mean)
    se = float(math.sqrt(np.sum(resid * resid)) / total) if c.size > 1 else 0.0
    logger.warning(f"{label}: 使用自归一化估计（仅作方差诊断）")
    return EstimateWithError(mean, se, int(c.size), f"{label}/self_normalized")


# ----------------------------------------------------------------------------
# 全观测
# ----------------------------------------------------------------------------

def mc_cost_direct(model: DiffusionModel, policy, cost: CostSpec, grid: TimeGrid, n: int, x0,
                   master_seed: int = 0, bank: Optional[NoiseBank] = None) -> EstimateWithError:
    """原始动力学下 E[∫c dt + c_T(X_T)] 的直接估计"""
    _check_horizon(cost, grid)
    policy = as_interpolated(policy, grid)

    def chunk(a, b):
        batch = simulate_range(model, policy, grid, master_seed, a, b, x0, bank=bank)
        return path_costs(batch.states, batch.inner_actions, cost, grid.delta)

    return estimate_from_samples(concat_samples(map_path_chunks(chunk, n)), "mc_cost_direct")


def mc_cost_reweighted(model: DiffusionModel, policy, cost: CostSpec, grid: TimeGrid, n: int, x0,
                       master_seed: int = 0, bank: Optional[NoiseBank] = None,
                       self_normalize: bool = False) -> EstimateWithError:
    """
    测度变换估计：在无漂移参考动力学下模拟，逐路径代价乘以 Z_T

    参考路径与直接估计器共用同一组 (seed, path_index) 噪声与策略随机流。
    """
    _check_horizon(cost, grid)
    policy = as_interpolated(policy, grid)
    reference = model.reference()

    def chunk(a, b):
        batch = simulate_range(reference, policy, grid, master_seed, a, b, x0, bank=bank)
        return np.column_stack([path_costs(batch.states, batch.inner_actions, cost, grid.delta),
                                log_drift_weights(batch, model)])

    out = concat_samples(map_path_chunks(chunk, n))
    return weighted_estimate(out[:, 0], out[:, 1], "mc_cost_reweighted", self_normalize)


# ----------------------------------------------------------------------------
# 部分观测
# ----------------------------------------------------------------------------

def mc_cost_pomdp(model: PartiallyObservedModel, policy, cost: CostSpec, grid: TimeGrid, n: int, x0,
                  master_seed: int = 0, bank: Optional[NoiseBank] = None, self_normalize: bool = False,
                  freeze_measurements: bool = True) -> EstimateWithError:
    """参考测度（Y 为纯布朗通道）下模拟，代价乘以 G_T"""
    _check_horizon(cost, grid)
    policy = as_interpolated(policy, grid)

    def chunk(a, b):
        batch = simulate_pomdp_range(model, policy, grid, master_seed, a, b, x0, bank, False, freeze_measurements)
        return np.column_stack([
            path_costs(batch.states, batch.inner_actions, cost, grid.delta),
            log_observation_weights(batch.states, batch.observation_increments, model.observation_at, grid),
        ])

    out = concat_samples(map_path_chunks(chunk, n))
    return weighted_estimate(out[:, 0], out[:, 1], "mc_cost_pomdp", self_normalize)


def mc_cost_pomdp_direct(model: PartiallyObservedModel, policy, cost: CostSpec, grid: TimeGrid, n: int, x0,
                         master_seed: int = 0, bank: Optional[NoiseBank] = None,
                         freeze_measurements: bool = True) -> EstimateWithError:
    """原始耦合方程 dY = g(X) dt + dB 下的直接估计"""
    _check_horizon(cost, grid)
    policy = as_interpolated(policy, grid)

    def chunk(a, b):
        batch = simulate_pomdp_range(model, policy, grid, master_seed, a, b, x0, bank, True, freeze_measurements)
        return path_costs(batch.states, batch.inner_actions, cost, grid.delta)

    return estimate_from_samples(concat_samples(map_path_chunks(chunk, n)), "mc_cost_pomdp_direct")


# ----------------------------------------------------------------------------
# 局部观测团队
# ----------------------------------------------------------------------------

def mc_cost_team_local_meas(model: LocalMeasurementTeamModel, team, cost: CostSpec, grid: TimeGrid, n: int, x0,
                            master_seed: int = 0, bank: Optional[NoiseBank] = None,
                            self_normalize: bool = False, freeze_measurements: bool = True) -> EstimateWithError:
    """各智能体观测通道均为纯布朗运动，代价乘以 exp(Σᵢ log Gⁱ)"""
    _check_horizon(cost, grid)
    observations = [(lambda i: (lambda x: model.observation_at(i, x)))(i) for i in range(model.n_agents)]

    def chunk(a, b):
        batch = simulate_team_local_meas_range(model, team, grid, master_seed, a, b, x0, bank, False,
                                               freeze_measurements)
        logw = log_team_observation_weights(batch, observations).sum(axis=1)
        return np.column_stack([path_costs(batch.states, batch.inner_actions, cost, grid.delta), logw])

    out = concat_samples(map_path_chunks(chunk, n))
    return weighted_estimate(out[:, 0], out[:, 1], "mc_cost_team_local_meas", self_normalize)


def mc_cost_team_local_meas_direct(model: LocalMeasurementTeamModel, team, cost: CostSpec, grid: TimeGrid,
                                   n: int, x0, master_seed: int = 0, bank: Optional[NoiseBank] = None,
                                   freeze_measurements: bool = True) -> EstimateWithError:
    _check_horizon(cost, grid)

    def chunk(a, b):
        batch = simulate_team_local_meas_range(model, team, grid, master_seed, a, b, x0, bank, True,
                                               freeze_measurements)
        return path_costs(batch.states, batch.inner_actions, cost, grid.delta)

    return estimate_from_samples(concat_samples(map_path_chunks(chunk, n)), "mc_cost_team_local_meas_direct")


# ----------------------------------------------------------------------------
# 局部状态耦合团队
# ----------------------------------------------------------------------------

def mc_cost_team_coupled(model: CoupledLocalStateTeamModel, team, cost: CostSpec, grid: TimeGrid, n: int, x0s,
                         master_seed: int = 0, bank: Optional[NoiseBank] = None,
                         self_normalize: bool = False) -> EstimateWithError:
    """解耦动力学下模拟，代价（联合状态、联合动作）乘以 dμ₀/dμ"""
    _check_horizon(cost, grid)

    def chunk(a, b):
        batch = simulate_team_decoupled_range(model, team, grid, master_seed, a, b, x0s, bank)
        logw = log_coupling_weights(batch, model).sum(axis=1)
        return np.column_stack([path_costs(batch.joint_states, batch.joint_inner_actions, cost, grid.delta), logw])

    out = concat_samples(map_path_chunks(chunk, n))
    return weighted_estimate(out[:, 0], out[:, 1], "mc_cost_team_coupled", self_normalize)


def mc_cost_team_coupled_direct(model: CoupledLocalStateTeamModel, team, cost: CostSpec, grid: TimeGrid, n: int,
                                x0s, master_seed: int = 0, bank: Optional[NoiseBank] = None) -> EstimateWithError:
    _check_horizon(cost, grid)

    def chunk(a, b):
        batch = simulate_team_coupled_range(model, team, grid, master_seed, a, b, x0s, bank)
        return path_costs(batch.joint_states, batch.joint_inner_actions, cost, grid.delta)

    return estimate_from_samples(concat_samples(map_path_chunks(chunk, n)), "mc_cost_team_coupled_direct")


# ----------------------------------------------------------------------------
# 阶段代价 ĉ
# ----------------------------------------------------------------------------

def frozen_rollout(model: DiffusionModel, starts: np.ndarray, actions: np.ndarray, step_grid: TimeGrid,
                   increments: np.ndarray, cost: Optional[CostSpec] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    一个宏步内冻结动作的批量推进

    Args:
        starts: (m, N) 起点
        actions: (m, A) 冻结动作
        step_grid: 单宏步网格 TimeGrid(h, 1, M)
        increments: (m, M, N)
        cost: 提供时同时积分运行代价

    Returns:
        (终点 (m, N), 积分运行代价 (m,)；未提供 cost 时为零)
    """
    if step_grid.macro_steps != 1:
        raise ValidationError("冻结动作推进只接受单宏步网格")
    m = starts.shape[0]
    actions = np.asarray(actions, dtype=float).reshape(m, -1)
    x0 = broadcast_x0(starts, m, model.state_dim)

    def decide(k, x):
        return actions, np.zeros(m, dtype=np.int64)

    states, _, _ = integrate_controlled(step_grid, x0, increments,
                                        lambda x, u, j: model.drift_at(x, u),
                                        lambda x, j: model.diffusion_at(x), decide)
    if cost is None:
        return states[:, -1], np.zeros(m)
    inner = np.repeat(actions[:, None, :], step_grid.inner_refine, axis=1)
    return states[:, -1], path_costs(states, inner, cost, step_grid.delta, terminal=False)


def stage_cost_hat(model: DiffusionModel, x, u, cost: CostSpec, grid: TimeGrid, n_inner: int,
                   master_seed: int = 0, sub: int = 0, bank: Optional[NoiseBank] = None) -> EstimateWithError:
    """
    ĉ(x, u) = E[∫₀ʰ c(X_s, u) ds | X_0 = x]，u 在 [0, h] 上冻结

    Args:
        model: 扩散模型（团队时为联合模型，u 为联合动作向量）
        x: 起点
        u: 冻结动作
        cost: 代价（只用运行代价）
        grid: 提供宏步长 h 与内步数 M
        n_inner: 蒙特卡洛样本数
    """
    step = TimeGrid(grid.h, 1, grid.inner_refine)
    incr = draw_increments(step, model.state_dim, master_seed, 0, int(n_inner), STREAM_KERNEL, sub, bank)
    starts = np.broadcast_to(np.asarray(x, dtype=float).reshape(1, -1), (int(n_inner), model.state_dim))
    acts = np.broadcast_to(np.asarray(u, dtype=float).reshape(1, -1), (int(n_inner), model.action_dim))
    _, integrated = frozen_rollout(model, starts, acts, step, incr, cost)
    return estimate_from_samples(integrated, "stage_cost_hat")
