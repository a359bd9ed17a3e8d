"""
Girsanov 似然权重（对数空间）

所有随机和都按内网格左端点（Itô）求值：
    log W = Σⱼ ⟨θⱼ, ΔIⱼ⟩ - ½ Σⱼ |θⱼ|² δ
其中 θ 为被积函数（σ⁻¹b、g 或 (σⁱ)⁻¹bⁱ₀），ΔI 为积分子增量（ΔB 或 ΔY）。
权重只在估计器内部取指数。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from algorithms.info_structures import CoupledLocalStateTeamModel, MeasuredPathBatch, TeamPathBatch
from algorithms.policy import as_interpolated
from algorithms.sde_core import (
    INVERTIBILITY_TOL, DiffusionModel, NoiseBank, PathBatch, SamplePath, TimeGrid, box_probes, diffusion_spectrum,
    simulate_range,
)
from utils.errors import NumericError, ValidationError
from utils.estimates import EstimateWithError, concat_samples, estimate_from_samples
from utils.parallel import map_path_chunks

logger = logging.getLogger(__name__)

WEIGHT_KINDS = ("drift", "observation", "team_observation", "team_coupling")
ADDITIVITY_TOL = 1e-12


@dataclass(frozen=True)
class LikelihoodWeight:
    """单条路径的对数似然权重；团队类型附带各智能体分量"""

    log_weight: float
    kind: str
    components: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ValidationError(f"未知的权重类型: {self.kind}")
        if not math.isfinite(self.log_weight):
            raise NumericError(f"对数权重非有限: {self.log_weight}")
        if self.components and abs(sum(self.components) - self.log_weight) > ADDITIVITY_TOL * max(1.0, abs(self.log_weight)):
            raise NumericError("团队权重与分量之和不一致")

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


# ----------------------------------------------------------------------------
# Itô 和
# ----------------------------------------------------------------------------

def ito_log_sum(theta: np.ndarray, increments: np.ndarray, delta: float) -> np.ndarray:
    """
    批量 Itô 指数对数：theta、increments 形状均为 (n, S, d)

    Returns:
        (n,) 逐路径对数权重
    """
    if theta.shape != increments.shape:
        raise ValidationError(f"被积函数形状 {theta.shape} 与增量形状 {increments.shape} 不一致")
    stochastic = np.sum(np.sum(theta * increments, axis=2), axis=1)
    quadratic = np.sum(np.sum(theta * theta, axis=2), axis=1)
    return stochastic - 0.5 * quadratic * delta


def solve_diffusion(sigma: np.ndarray, rhs: np.ndarray, points: Optional[np.ndarray] = None) -> np.ndarray:
    """
    逐点求解 σθ = rhs

    Args:
        sigma: (m, N, N)
        rhs: (m, N)
        points: (m, N) 对应的状态点，用于报错

    Raises:
        NumericError: 某点 σ 奇异（携带该点）
    """
    _, smallest, _ = diffusion_spectrum(sigma)
    bad = smallest <= INVERTIBILITY_TOL
    if np.any(bad):
        first = int(np.argmax(bad))
        point = None if points is None else np.asarray(points[first]).tolist()
        raise NumericError(f"扩散矩阵在 {point} 处奇异（最小奇异值 {smallest[first]:.3e}）", point=point)
    try:
        return np.linalg.solve(sigma, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as e:
        raise NumericError(f"扩散矩阵求逆失败: {e}") from e


def _drift_integrand(model: DiffusionModel, states: np.ndarray, inner_actions: np.ndarray) -> np.ndarray:
    """θ = σ⁻¹(X_j) b(X_j, u_j)，左端点取值，返回 (n, S, N)"""
    n, S = inner_actions.shape[0], inner_actions.shape[1]
    x = states[:, :-1].reshape(n * S, -1)
    u = inner_actions.reshape(n * S, -1)
    b = model.drift_at(x, u)
    sigma = model.diffusion_at(x)
    return solve_diffusion(sigma, b, x).reshape(n, S, -1)


# ----------------------------------------------------------------------------
# 漂移权重 Z_T
# ----------------------------------------------------------------------------

def log_drift_weights(batch: PathBatch, model: DiffusionModel) -> np.ndarray:
    """参考动力学路径批上的 log Z_T，(n,)"""
    theta = _drift_integrand(model, batch.states, batch.inner_actions)
    return ito_log_sum(theta, batch.increments, batch.grid.delta)


def log_drift_weight(path: SamplePath, model: DiffusionModel, policy=None) -> LikelihoodWeight:
    """
    单条参考路径的漂移权重 log Z_T

    Args:
        path: 按参考动力学 dX' = σ(X') dB 模拟的路径（动作已按策略在路径上抽样）
        model: 原模型（提供 b 与 σ）
        policy: 可选，仅用于检查动作维数与策略一致
    """
    if policy is not None and getattr(policy, "action_dim", path.actions.shape[-1]) != path.actions.shape[-1]:
        raise ValidationError("路径动作维数与策略不一致")
    theta = _drift_integrand(model, path.states[None], path.inner_actions[None])
    value = ito_log_sum(theta, path.noise.increments[None], path.grid.delta)[0]
    return LikelihoodWeight(float(value), "drift")


# ----------------------------------------------------------------------------
# 观测权重 G_T
# ----------------------------------------------------------------------------

def log_observation_weights(states: np.ndarray, y_increments: np.ndarray, g, grid: TimeGrid) -> np.ndarray:
    """
    批量观测权重 log G_T = Σ g(X_j)·ΔY_j - ½ Σ |g(X_j)|² δ

    Args:
        states: (n, S + 1, N)
        y_increments: (n, S, M)
        g: 观测映射 x (m, N) -> (m, M)
        grid: 时间网格（提供 δ）
    """
    states = np.asarray(states, dtype=float)
    y_increments = np.asarray(y_increments, dtype=float)
    if states.ndim != 3 or y_increments.ndim != 3 or states.shape[1] - 1 != y_increments.shape[1]:
        raise ValidationError(f"状态路径长度 {states.shape} 与观测增量长度 {y_increments.shape} 不一致")
    if y_increments.shape[1] != grid.n_inner:
        raise ValidationError(f"观测增量步数 {y_increments.shape[1]} 与网格内步数 {grid.n_inner} 不一致")
    n, S, M = y_increments.shape
    x = states[:, :-1].reshape(n * S, -1)
    theta = np.asarray(g(x), dtype=float).reshape(n, S, M)
    return ito_log_sum(theta, y_increments, grid.delta)


def log_observation_weight(x_path: np.ndarray, y_increments: np.ndarray, g, grid: TimeGrid) -> LikelihoodWeight:
    """单条路径的观测权重，y_increments 须在参考测度下生成（dY = dB）"""
    x_path = np.asarray(x_path, dtype=float)
    y_increments = np.asarray(y_increments, dtype=float)
    if x_path.ndim == 1:
        x_path = x_path[:, None]
    if y_increments.ndim == 1:
        y_increments = y_increments[:, None]
    value = log_observation_weights(x_path[None], y_increments[None], g, grid)[0]
    return LikelihoodWeight(float(value), "observation")


def log_team_observation_weights(batch: MeasuredPathBatch, observations: Sequence) -> np.ndarray:
    """团队观测权重的分量，(n, agents)"""
    if len(observations) != len(batch.observation_slices):
        raise ValidationError(f"观测映射数 {len(observations)} 与智能体数 {len(batch.observation_slices)} 不一致")
    cols = [log_observation_weights(batch.states, batch.agent_observation_increments(i), g, batch.grid)
            for i, g in enumerate(observations)]
    return np.stack(cols, axis=1)


def log_team_observation_weight(x_path: np.ndarray, y_increments: Sequence[np.ndarray], observations: Sequence,
                                grid: TimeGrid) -> LikelihoodWeight:
    """∏ᵢ Gⁱ_T 的对数：各分量按 log_observation_weight 计算后求和"""
    if len(y_increments) != len(observations):
        raise ValidationError(f"观测增量组数 {len(y_increments)} 与观测映射数 {len(observations)} 不一致")
    comps = tuple(log_observation_weight(x_path, dy, g, grid).log_weight for dy, g in zip(y_increments, observations))
    return LikelihoodWeight(float(math.fsum(comps)), "team_observation", comps)


# ----------------------------------------------------------------------------
# 耦合权重 dμ₀/dμ
# ----------------------------------------------------------------------------

def log_coupling_weights(batch: TeamPathBatch, model: CoupledLocalStateTeamModel) -> np.ndarray:
    """
    解耦路径批上的耦合权重分量，(n, agents)

    被积函数为 (σⁱ)⁻¹(Xⁱ_j) bⁱ₀(𝐗_j, 𝐔_j)，积分子为智能体 i 自己的 ΔBⁱ。
    """
    if batch.n_agents != model.n_agents:
        raise ValidationError(f"路径批智能体数 {batch.n_agents} 与模型 {model.n_agents} 不一致")
    n, S = batch.n, batch.grid.n_inner
    x_all = batch.joint_states[:, :-1].reshape(n * S, -1)
    u_all = batch.joint_inner_actions.reshape(n * S, -1)
    cols = []
    for i, agent in enumerate(model.agents):
        xi = batch.states[i][:, :-1].reshape(n * S, -1)
        b0 = model.coupling_at(i, x_all, u_all)
        theta = solve_diffusion(agent.diffusion_at(xi), b0, xi).reshape(n, S, -1)
        cols.append(ito_log_sum(theta, batch.increments[i], batch.grid.delta))
    return np.stack(cols, axis=1)


def log_coupling_weight(team_path: TeamPathBatch, model: CoupledLocalStateTeamModel, policies=None) -> LikelihoodWeight:
    """
    单条解耦团队路径的耦合权重

    Args:
        team_path: 只含一条路径的 TeamPathBatch（解耦动力学下模拟）
        model: 耦合团队模型
        policies: 可选，动作已记录在路径中
    """
    if team_path.n != 1:
        raise ValidationError("log_coupling_weight 只接受单条路径")
    comps = tuple(float(c) for c in log_coupling_weights(team_path, model)[0])
    return LikelihoodWeight(float(math.fsum(comps)), "team_coupling", comps)


# ----------------------------------------------------------------------------
# 二阶矩与 L¹ 连续性
# ----------------------------------------------------------------------------

def integrand_sup(model: DiffusionModel, probe_count: int = 256, probe_radius: float = 3.0,
                  seed: int = 0) -> float:
    """在探测点上估计 M = sup |σ⁻¹b|²（状态探测盒 × 动作盒的中心、角点与随机点）"""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    xs = box_probes(-probe_radius * np.ones(model.state_dim), probe_radius * np.ones(model.state_dim),
                     probe_count, rng)
    a_lo, a_hi = model.actions_box
    us = box_probes(a_lo, a_hi, max(16, 2 ** min(model.action_dim, 6) + 1), rng)
    x = np.repeat(xs, us.shape[0], axis=0)
    u = np.tile(us, (xs.shape[0], 1))
    theta = solve_diffusion(model.diffusion_at(x), model.drift_at(x, u), x)
    return float(np.max(np.sum(theta * theta, axis=1)))


def second_moment_bound_check(model: DiffusionModel, policy, grid: TimeGrid, n: int, x0=None,
                              master_seed: int = 0, band: float = 3.0,
                              bank: Optional[NoiseBank] = None) -> Dict[str, object]:
    """
    估计 E[Z_T²] 并与解析上界 e^{MT} 比较

    M 取探测点与模拟路径上 |σ⁻¹b|² 的较大者。

    Returns:
        dict: {"estimate": EstimateWithError, "cap": e^{MT}, "M": M, "passed": bool}
    """
    policy = as_interpolated(policy, grid)
    x0 = np.zeros(model.state_dim) if x0 is None else x0
    reference = model.reference()

    def chunk(a, b):
        batch = simulate_range(reference, policy, grid, master_seed, a, b, x0, bank=bank)
        theta = _drift_integrand(model, batch.states, batch.inner_actions)
        logz = ito_log_sum(theta, batch.increments, grid.delta)
        return np.column_stack([np.exp(2.0 * logz), np.max(np.sum(theta * theta, axis=2), axis=1)])

    out = concat_samples(map_path_chunks(chunk, n))
    est = estimate_from_samples(out[:, 0], "second_moment")
    m_sup = max(integrand_sup(model), float(np.max(out[:, 1])))
    cap = math.exp(m_sup * grid.horizon)
    passed = est.mean <= cap + band * est.standard_error
    if not passed:
        logger.warning(f"E[Z²]={est.mean:.6g} 超过上界 e^(MT)={cap:.6g}")
    return {"estimate": est, "cap": cap, "M": m_sup, "passed": bool(passed)}


def weight_l1_distance(policy_a, policy_b, model: DiffusionModel, grid: TimeGrid, n: int, x0=None,
                       master_seed: int = 0, bank: Optional[NoiseBank] = None) -> EstimateWithError:
    """
    配对估计 E|Z_T^a - Z_T^b|

    两个策略使用同一批参考路径噪声与同一批策略随机变量。
    参考动力学不含漂移，动作不影响状态，因此两条路径的状态逐位相同，只有动作不同。
    """
    pa, pb = as_interpolated(policy_a, grid), as_interpolated(policy_b, grid)
    x0 = np.zeros(model.state_dim) if x0 is None else x0
    reference = model.reference()

    def chunk(a, b):
        batch_a = simulate_range(reference, pa, grid, master_seed, a, b, x0, bank=bank)
        batch_b = simulate_range(reference, pb, grid, master_seed, a, b, x0, bank=bank)
        za = np.exp(log_drift_weights(batch_a, model))
        zb = np.exp(log_drift_weights(batch_b, model))
        return np.abs(za - zb)

    return estimate_from_samples(concat_samples(map_path_chunks(chunk, n)), "weight_l1_distance")


def martingale_mean(model: DiffusionModel, policy, grid: TimeGrid, n: int, x0=None, master_seed: int = 0,
                    bank: Optional[NoiseBank] = None) -> EstimateWithError:
    """参考路径上 Z_T 的均值（应为 1）"""
    policy = as_interpolated(policy, grid)
    x0 = np.zeros(model.state_dim) if x0 is None else x0
    reference = model.reference()

    def chunk(a, b):
        return np.exp(log_drift_weights(simulate_range(reference, policy, grid, master_seed, a, b, x0, bank=bank), model))

    return estimate_from_samples(concat_samples(map_path_chunks(chunk, n)), "mean_drift_weight")
