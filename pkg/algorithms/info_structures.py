"""
部分观测与分散式（团队）模型，以及它们的参考测度模拟器和非预见性审计

参考测度下观测通道是纯布朗运动（dY = dB），与状态无关；观测带来的信息全部进入
Girsanov 观测权重（见 algorithms.girsanov）。直接模拟器按原始耦合方程生成
dY = g(X) dt + dB，只用于估计量等价性检查。

随机流分配：
- 状态噪声 STREAM_STATE，单状态模型 sub = 0，局部状态团队的智能体 i 用 sub = i
- 智能体 i 的观测噪声 STREAM_OBSERVATION / sub = i
- 智能体 i 的策略随机化 STREAM_POLICY / sub = i
单智能体情形与全观测模拟器使用完全相同的流，可逐位对照。
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from algorithms.policy import InterpolatedPolicy, TeamPolicyTuple, as_interpolated, interpolate
from algorithms.sde_core import (
    STREAM_OBSERVATION, STREAM_STATE, AssumptionReport, DiffusionModel, NoiseBank, NoisePlan,
    PathBatch, TimeGrid, broadcast_x0, draw_increments, draw_uniforms, ensure_valid,
    integrate_controlled, path_generator, STREAM_POLICY, simulate_batch, validate_assumptions,
)
from utils.errors import ValidationError

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# 模型
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PartiallyObservedModel:
    """
    部分观测模型：dX = b(X, Y, U) dt + σ(X, Y) dW，dY = g(X) dt + dB

    drift(x, y, u) -> (n, N)，diffusion(x, y) -> (n, N, N)，observation(x) -> (n, M)。
    observation_bound 为 |g| 的声明上界。
    """

    state_dim: int
    obs_dim: int
    action_dim: int
    drift: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    observation: Callable[[np.ndarray], np.ndarray]
    drift_bound: float
    ellipticity: float
    observation_bound: float
    action_box: Optional[Tuple[Tuple[float, ...], Tuple[float, ...]]] = None
    name: str = ""

    def __post_init__(self):
        if min(self.state_dim, self.obs_dim, self.action_dim) < 1:
            raise ValidationError("状态、观测、动作维数必须为正整数")
        if not (self.drift_bound > 0 and self.ellipticity > 0 and self.observation_bound >= 0):
            raise ValidationError("界常数必须为正")

    def drift_at(self, x, y, u) -> np.ndarray:
        return np.asarray(self.drift(x, y, u), dtype=float).reshape(x.shape[0], self.state_dim)

    def diffusion_at(self, x, y) -> np.ndarray:
        return np.asarray(self.diffusion(x, y), dtype=float).reshape(x.shape[0], self.state_dim, self.state_dim)

    def observation_at(self, x) -> np.ndarray:
        return np.asarray(self.observation(x), dtype=float).reshape(x.shape[0], self.obs_dim)

    def at_observation(self, y: Sequence[float]) -> DiffusionModel:
        """把观测冻结为常值 y 得到的全观测模型（用于按 y 探测假设）"""
        y = np.asarray(y, dtype=float).reshape(1, self.obs_dim)

        def drift(x, u):
            return self.drift_at(x, np.broadcast_to(y, (x.shape[0], self.obs_dim)), u)

        def diffusion(x):
            return self.diffusion_at(x, np.broadcast_to(y, (x.shape[0], self.obs_dim)))

        return DiffusionModel(self.state_dim, self.action_dim, drift, diffusion, self.drift_bound,
                              self.ellipticity, self.action_box, name=f"{self.name}@y")

    def without_observation(self) -> "PartiallyObservedModel":
        """g ≡ 0 的无信息版本"""
        M = self.obs_dim
        return replace(self, observation=lambda x: np.zeros((x.shape[0], M)), observation_bound=0.0,
                       name=f"{self.name}/uninformative")


@dataclass(frozen=True)
class LocalMeasurementTeamModel:
    """
    局部观测团队：共享状态 dX = b(X, 𝐘, 𝐔) dt + σ(X, 𝐘) dW，智能体 i 观测 dYⁱ = gⁱ(X) dt + dBⁱ

    drift(x, y_all, u_all) 中 y_all、u_all 为各智能体分量按顺序拼接。
    """

    state_dim: int
    obs_dims: Tuple[int, ...]
    action_dims: Tuple[int, ...]
    drift: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    observations: Tuple[Callable[[np.ndarray], np.ndarray], ...]
    drift_bound: float
    ellipticity: float
    observation_bounds: Tuple[float, ...]
    action_boxes: Optional[Tuple[Tuple[Tuple[float, ...], Tuple[float, ...]], ...]] = None
    name: str = ""

    def __post_init__(self):
        n = len(self.observations)
        if n < 1 or len(self.obs_dims) != n or len(self.action_dims) != n or len(self.observation_bounds) != n:
            raise ValidationError("智能体数目与观测/动作维数列表不一致")

    @property
    def n_agents(self) -> int:
        return len(self.observations)

    def drift_at(self, x, y, u) -> np.ndarray:
        return np.asarray(self.drift(x, y, u), dtype=float).reshape(x.shape[0], self.state_dim)

    def diffusion_at(self, x, y) -> np.ndarray:
        return np.asarray(self.diffusion(x, y), dtype=float).reshape(x.shape[0], self.state_dim, self.state_dim)

    def observation_at(self, i: int, x) -> np.ndarray:
        return np.asarray(self.observations[i](x), dtype=float).reshape(x.shape[0], self.obs_dims[i])

    def without_observations(self) -> "LocalMeasurementTeamModel":
        zeros = tuple((lambda M: (lambda x: np.zeros((x.shape[0], M))))(M) for M in self.obs_dims)
        return replace(self, observations=zeros, observation_bounds=tuple(0.0 for _ in self.obs_dims),
                       name=f"{self.name}/uninformative")


@dataclass(frozen=True)
class CoupledLocalStateTeamModel:
    """
    局部状态耦合团队：dXⁱ = [bⁱ(Xⁱ, Uⁱ) + bⁱ₀(𝐗, 𝐔)] dt + σⁱ(Xⁱ) dBⁱ

    agents[i] 给出 bⁱ 与 σⁱ；coupling[i](x_all, u_all) -> (n, Nⁱ) 为耦合漂移 bⁱ₀。
    """

    agents: Tuple[DiffusionModel, ...]
    coupling: Tuple[Callable[[np.ndarray, np.ndarray], np.ndarray], ...]
    coupling_bound: float
    name: str = ""

    def __post_init__(self):
        if len(self.agents) < 1 or len(self.coupling) != len(self.agents):
            raise ValidationError("智能体模型与耦合漂移数目不一致")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def state_slices(self) -> List[slice]:
        return _slices([m.state_dim for m in self.agents])

    @property
    def action_slices(self) -> List[slice]:
        return _slices([m.action_dim for m in self.agents])

    def coupling_at(self, i: int, x_all, u_all) -> np.ndarray:
        return np.asarray(self.coupling[i](x_all, u_all), dtype=float).reshape(x_all.shape[0], self.agents[i].state_dim)

    def decoupled(self) -> "CoupledLocalStateTeamModel":
        """bⁱ₀ ≡ 0 的解耦版本"""
        zeros = tuple((lambda N: (lambda x, u: np.zeros((x.shape[0], N))))(m.state_dim) for m in self.agents)
        return replace(self, coupling=zeros, coupling_bound=0.0, name=f"{self.name}/decoupled")

    def joint_drift(self, x_all: np.ndarray, u_all: np.ndarray) -> np.ndarray:
        parts = []
        for i, (m, sx, su) in enumerate(zip(self.agents, self.state_slices, self.action_slices)):
            parts.append(m.drift_at(x_all[:, sx], u_all[:, su]) + self.coupling_at(i, x_all, u_all))
        return np.concatenate(parts, axis=1)

    def joint_diffusion(self, x_all: np.ndarray) -> np.ndarray:
        dim = sum(m.state_dim for m in self.agents)
        out = np.zeros((x_all.shape[0], dim, dim))
        for m, sx in zip(self.agents, self.state_slices):
            out[:, sx, sx] = m.diffusion_at(x_all[:, sx])
        return out

    def joint_model(self) -> DiffusionModel:
        """联合状态上的全观测模型（集中式下界与联合阶段代价使用）"""
        lo = tuple(v for m in self.agents for v in m.actions_box[0])
        hi = tuple(v for m in self.agents for v in m.actions_box[1])
        # |b + b₀| 逐块有界，拼接后乘 √N；块对角 σ 的范数不超过各块的最大值
        bound = (max(m.drift_bound for m in self.agents) + self.coupling_bound) * np.sqrt(self.n_agents)
        return DiffusionModel(
            state_dim=sum(m.state_dim for m in self.agents),
            action_dim=sum(m.action_dim for m in self.agents),
            drift=self.joint_drift,
            diffusion=self.joint_diffusion,
            drift_bound=float(bound),
            ellipticity=min(m.ellipticity for m in self.agents),
            action_box=(lo, hi),
            name=f"{self.name}/joint",
        )


def _slices(dims: Sequence[int]) -> List[slice]:
    out, start = [], 0
    for d in dims:
        out.append(slice(start, start + int(d)))
        start += int(d)
    return out


def validate_partially_observed(model: PartiallyObservedModel, probe_count: int,
                                probe_box: Tuple[Sequence[float], Sequence[float]],
                                observation_box: Tuple[Sequence[float], Sequence[float]],
                                seed: int = 0) -> Tuple[AssumptionReport, bool]:
    """
    对观测盒的中心与角点逐一冻结 y 做假设校验，报告各项的最坏情况；另检查 |g| <= 声明上界

    Returns:
        (最坏情况 AssumptionReport, 观测界是否满足)
    """
    lo = np.asarray(observation_box[0], dtype=float).reshape(-1)
    hi = np.asarray(observation_box[1], dtype=float).reshape(-1)
    ys = [0.5 * (lo + hi)] + list(np.array(np.meshgrid(*[[lo[d], hi[d]] for d in range(lo.size)],
                                                       indexing="ij")).reshape(lo.size, -1).T)
    reports = [validate_assumptions(model.at_observation(y), probe_count, probe_box, seed) for y in ys]
    worst = reports[0]
    for r in reports[1:]:
        worst = replace(
            worst,
            max_drift_norm=max(worst.max_drift_norm, r.max_drift_norm),
            max_diffusion_norm=max(worst.max_diffusion_norm, r.max_diffusion_norm),
            min_eigenvalue=min(worst.min_eigenvalue, r.min_eigenvalue),
            min_singular_value=min(worst.min_singular_value, r.min_singular_value),
            bound_ok=worst.bound_ok and r.bound_ok,
            ellipticity_ok=worst.ellipticity_ok and r.ellipticity_ok,
            invertible=worst.invertible and r.invertible,
        )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed) + 1)))
    xs = rng.uniform(np.asarray(probe_box[0], dtype=float), np.asarray(probe_box[1], dtype=float),
                     size=(max(probe_count, 1), model.state_dim))
    g_max = float(np.max(np.linalg.norm(model.observation_at(xs), axis=1)))
    g_ok = g_max <= model.observation_bound * (1 + 1e-12)
    logger.debug(f"[validate_partially_observed] {model.name}: 最坏情况 {worst.to_dict()}，max|g|={g_max:.4g}")
    return worst, bool(g_ok)


def validate_team_local(model: LocalMeasurementTeamModel, probe_count: int,
                        probe_box: Tuple[Sequence[float], Sequence[float]],
                        observation_box: Tuple[Sequence[float], Sequence[float]],
                        seed: int = 0) -> Tuple[AssumptionReport, List[bool]]:
    """
    局部观测团队的假设校验：把全体观测与联合动作视为一个部分观测模型做最坏情况校验，
    再逐个智能体检查 |gⁱ| <= 声明上界

    Args:
        observation_box: 单个智能体观测分量的探测盒，所有智能体共用

    Returns:
        (最坏情况 AssumptionReport, 各智能体观测界是否满足)
    """
    total_obs = int(sum(model.obs_dims))
    total_act = int(sum(model.action_dims))
    if model.action_boxes is None:
        act_box = None
    else:
        act_box = (tuple(v for b in model.action_boxes for v in b[0]), tuple(v for b in model.action_boxes for v in b[1]))
    lo = np.asarray(observation_box[0], dtype=float).reshape(-1)
    hi = np.asarray(observation_box[1], dtype=float).reshape(-1)
    joint = PartiallyObservedModel(
        model.state_dim, total_obs, total_act, model.drift, model.diffusion,
        lambda x: np.concatenate([model.observation_at(i, x) for i in range(model.n_agents)], axis=1),
        model.drift_bound, model.ellipticity, float(np.sqrt(np.sum(np.square(model.observation_bounds)))),
        act_box, name=f"{model.name}/joint",
    )
    worst, _ = validate_partially_observed(joint, probe_count, probe_box,
                                           (np.resize(lo, total_obs), np.resize(hi, total_obs)), seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed) + 1)))
    xs = rng.uniform(np.asarray(probe_box[0], dtype=float), np.asarray(probe_box[1], dtype=float),
                     size=(max(probe_count, 1), model.state_dim))
    g_ok = [bool(np.max(np.linalg.norm(model.observation_at(i, xs), axis=1)) <= bound * (1 + 1e-12))
            for i, bound in enumerate(model.observation_bounds)]
    return worst, g_ok


def validate_coupled_team(model: CoupledLocalStateTeamModel, probe_count: int,
                          probe_box: Tuple[Sequence[float], Sequence[float]],
                          seed: int = 0) -> Tuple[List[AssumptionReport], bool]:
    """
    逐个智能体校验 (bⁱ, σⁱ) 的有界性与非退化性，并在联合探测点上检查 |bⁱ₀| <= 耦合上界

    Args:
        probe_box: 单个智能体状态分量的探测盒，所有智能体共用
    """
    reports = [validate_assumptions(agent, probe_count, (np.resize(np.asarray(probe_box[0], dtype=float), agent.state_dim),
                                                         np.resize(np.asarray(probe_box[1], dtype=float), agent.state_dim)),
                                    seed + i)
               for i, agent in enumerate(model.agents)]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    dim_x = sum(m.state_dim for m in model.agents)
    x_lo = np.resize(np.asarray(probe_box[0], dtype=float), dim_x)
    x_hi = np.resize(np.asarray(probe_box[1], dtype=float), dim_x)
    u_lo = np.concatenate([m.actions_box[0] for m in model.agents])
    u_hi = np.concatenate([m.actions_box[1] for m in model.agents])
    xs = rng.uniform(x_lo, x_hi, size=(max(probe_count, 1), dim_x))
    us = rng.uniform(u_lo, u_hi, size=(max(probe_count, 1), u_lo.size))
    worst = max(float(np.max(np.linalg.norm(model.coupling_at(i, xs, us), axis=1))) for i in range(model.n_agents))
    coupling_ok = worst <= model.coupling_bound * (1 + 1e-12)
    logger.debug(f"[validate_coupled_team] {model.name}: max|b0|={worst:.4g}, 上界 {model.coupling_bound}")
    return reports, bool(coupling_ok)


# ----------------------------------------------------------------------------
# 路径批
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasuredPathBatch:
    """
    带观测通道的路径批

    observation_increments 为全部智能体观测增量按通道拼接 (n, S, ΣM)，
    y_samples 为宏步边界上的观测样本 (n, N_h + 1, ΣM)，Y_0 = 0。
    """

    states: np.ndarray
    actions: np.ndarray
    action_indices: np.ndarray
    state_increments: np.ndarray
    observation_increments: np.ndarray
    y_samples: np.ndarray
    observation_slices: Tuple[slice, ...]
    path_indices: np.ndarray
    grid: TimeGrid

    @property
    def n(self) -> int:
        return int(self.states.shape[0])

    @property
    def inner_actions(self) -> np.ndarray:
        return np.repeat(self.actions, self.grid.inner_refine, axis=1)

    def agent_observation_increments(self, i: int) -> np.ndarray:
        return self.observation_increments[:, :, self.observation_slices[i]]

    def agent_y_samples(self, i: int) -> np.ndarray:
        return self.y_samples[:, :, self.observation_slices[i]]


@dataclass(frozen=True)
class TeamPathBatch:
    """局部状态团队的路径批：每个智能体一组 (状态, 动作, 增量)"""

    states: Tuple[np.ndarray, ...]
    actions: Tuple[np.ndarray, ...]
    action_indices: np.ndarray
    increments: Tuple[np.ndarray, ...]
    path_indices: np.ndarray
    grid: TimeGrid

    @property
    def n(self) -> int:
        return int(self.states[0].shape[0])

    @property
    def n_agents(self) -> int:
        return len(self.states)

    @property
    def joint_states(self) -> np.ndarray:
        return np.concatenate(self.states, axis=2)

    @property
    def joint_actions(self) -> np.ndarray:
        return np.concatenate(self.actions, axis=2)

    @property
    def joint_inner_actions(self) -> np.ndarray:
        return np.repeat(self.joint_actions, self.grid.inner_refine, axis=1)


# ----------------------------------------------------------------------------
# 观测通道模拟（部分观测与局部观测团队共用）
# ----------------------------------------------------------------------------

def _team_policies(team, grid: TimeGrid) -> List[InterpolatedPolicy]:
    if isinstance(team, TeamPolicyTuple):
        return [interpolate(p, grid) for p in team.policies]
    return [as_interpolated(p, grid) for p in team]


@dataclass(frozen=True)
class _MeasuredSystem:
    """部分观测模型与局部观测团队的统一视图"""

    state_dim: int
    obs_dims: Tuple[int, ...]
    drift: Callable
    diffusion: Callable
    observation: Callable[[int, np.ndarray], np.ndarray]


def _pomdp_system(model: PartiallyObservedModel) -> _MeasuredSystem:
    return _MeasuredSystem(model.state_dim, (model.obs_dim,), model.drift_at, model.diffusion_at,
                           lambda i, x: model.observation_at(x))


def _team_system(model: LocalMeasurementTeamModel) -> _MeasuredSystem:
    return _MeasuredSystem(model.state_dim, tuple(model.obs_dims), model.drift_at, model.diffusion_at,
                           model.observation_at)


def _simulate_measured(system: _MeasuredSystem, policies: List[InterpolatedPolicy], grid: TimeGrid, x0,
                       w_incr: np.ndarray, obs_incr: List[np.ndarray], uniforms: List[np.ndarray],
                       path_indices: np.ndarray, direct: bool, freeze: bool) -> MeasuredPathBatch:
    """
    逐内步推进状态与观测；direct=False 时观测为纯布朗通道

    智能体 i 在宏步 k 只能读到自己的 Y_h, ..., Y_{kh} 的量化符号。
    freeze=True 时 b(·, Y)、σ(·, Y) 在宏步 k 内取 Y_{kh}，否则取当前内网格点的 Y。
    """
    if len(policies) != len(system.obs_dims) or len(obs_incr) != len(policies) or len(uniforms) != len(policies):
        raise ValidationError(f"智能体数 {len(system.obs_dims)} 与策略/噪声数目不一致")
    for p in policies:
        if p.information == "state":
            raise ValidationError("观测模型中的策略不能读取隐藏状态")
    n = w_incr.shape[0]
    x0 = broadcast_x0(x0, n, system.state_dim)
    slices = tuple(_slices(system.obs_dims))
    db = np.concatenate(obs_incr, axis=2)
    dy_all = np.empty_like(db)
    total_obs = db.shape[2]
    y_samples = np.zeros((n, grid.macro_steps + 1, total_obs))
    symbols = [np.zeros((n, grid.macro_steps), dtype=np.int64) for _ in policies]
    state = {"y": np.zeros((n, total_obs)), "frozen": np.zeros((n, total_obs))}
    dt = grid.delta

    def coeff_y():
        return state["frozen"] if freeze else state["y"]

    def drift_fn(x, u, j):
        return system.drift(x, coeff_y(), u)

    def diffusion_fn(x, j):
        return system.diffusion(x, coeff_y())

    def decide(k, x):
        y_now = state["y"]
        y_samples[:, k] = y_now
        state["frozen"] = y_now
        vals, idxs = [], []
        for i, p in enumerate(policies):
            if p.information == "history":
                if k >= 1:
                    symbols[i][:, k - 1] = p.policy.quantizer.symbol(y_now[:, slices[i]])
                info = symbols[i][:, :k]
            else:
                info = None
            v, ix = p.act(k, info, uniforms[i][:, k])
            vals.append(v)
            idxs.append(ix)
        return np.concatenate(vals, axis=1), np.stack(idxs, axis=1)

    def on_step(j1, x_prev, x_new):
        dy = db[:, j1 - 1]
        if direct:
            g = np.concatenate([system.observation(i, x_prev) for i in range(len(policies))], axis=1)
            dy = dy + g * dt
        dy_all[:, j1 - 1] = dy
        state["y"] = state["y"] + dy

    states, actions, idx = integrate_controlled(grid, x0, w_incr, drift_fn, diffusion_fn, decide,
                                                path_indices, on_step)
    y_samples[:, grid.macro_steps] = state["y"]
    return MeasuredPathBatch(states, actions, idx, w_incr, dy_all, y_samples, slices, np.asarray(path_indices), grid)


def _measured_range(system: _MeasuredSystem, policies: List[InterpolatedPolicy], grid: TimeGrid,
                    master_seed: int, start: int, stop: int, x0, bank: Optional[NoiseBank],
                    direct: bool, freeze: bool) -> MeasuredPathBatch:
    w = draw_increments(grid, system.state_dim, master_seed, start, stop, STREAM_STATE, 0, bank)
    obs = [draw_increments(grid, M, master_seed, start, stop, STREAM_OBSERVATION, i, bank)
           for i, M in enumerate(system.obs_dims)]
    unif = [draw_uniforms(grid, master_seed, start, stop, i, bank) for i in range(len(policies))]
    return _simulate_measured(system, policies, grid, x0, w, obs, unif, np.arange(start, stop), direct, freeze)


def _single_uniforms(grid: TimeGrid, plan: NoisePlan, agents: int, uniforms) -> List[np.ndarray]:
    if uniforms is not None:
        return [np.asarray(u, dtype=float).reshape(1, -1) for u in uniforms]
    return [path_generator(plan.master_seed, plan.path_index, STREAM_POLICY, i).random(grid.macro_steps)[None]
            for i in range(agents)]


def simulate_pomdp_range(model: PartiallyObservedModel, policy, grid: TimeGrid, master_seed: int,
                         start: int, stop: int, x0, bank: Optional[NoiseBank] = None,
                         direct: bool = False, freeze_measurements: bool = True) -> MeasuredPathBatch:
    """路径区间 [start, stop) 的部分观测模拟（默认参考测度）"""
    return _measured_range(_pomdp_system(model), [as_interpolated(policy, grid)], grid, master_seed,
                           start, stop, x0, bank, direct, freeze_measurements)


def simulate_pomdp_reference(model: PartiallyObservedModel, policy, grid: TimeGrid,
                             noise: Tuple[NoisePlan, NoisePlan], x0, uniforms=None,
                             freeze_measurements: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    参考测度下的单条部分观测路径：Y 为纯布朗通道

    Args:
        model: 部分观测模型
        policy: WideSensePolicy 或其插值（开环策略同样可用）
        grid: 时间网格
        noise: (W 噪声计划, B 噪声计划)，两者必须独立
        x0: 初始状态
        uniforms: 可选的 (N_h,) 策略随机化变量

    Returns:
        (x_path (S + 1, N), y_samples (N_h + 1, M), y_increments (S, M))
    """
    batch = _single_measured(_pomdp_system(model), [as_interpolated(policy, grid)], grid, noise[0], [noise[1]],
                             x0, None if uniforms is None else [uniforms], False, freeze_measurements)
    return batch.states[0], batch.y_samples[0], batch.observation_increments[0]


def simulate_pomdp_direct(model: PartiallyObservedModel, policy, grid: TimeGrid,
                          noise: Tuple[NoisePlan, NoisePlan], x0, uniforms=None,
                          freeze_measurements: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """原始耦合方程 dY = g(X) dt + dB 下的单条路径（等价性检查用）"""
    batch = _single_measured(_pomdp_system(model), [as_interpolated(policy, grid)], grid, noise[0], [noise[1]],
                             x0, None if uniforms is None else [uniforms], True, freeze_measurements)
    return batch.states[0], batch.y_samples[0], batch.observation_increments[0]


def _single_measured(system: _MeasuredSystem, policies, grid: TimeGrid, w_plan: NoisePlan,
                     obs_plans: Sequence[NoisePlan], x0, uniforms, direct: bool, freeze: bool) -> MeasuredPathBatch:
    if w_plan.stream == obs_plans[0].stream and w_plan.sub == obs_plans[0].sub:
        raise ValidationError("状态噪声与观测噪声必须来自不同的随机流")
    for plan, M in zip(obs_plans, system.obs_dims):
        if plan.increments.shape != (grid.n_inner, M):
            raise ValidationError(f"观测噪声形状 {plan.increments.shape} 与 ({grid.n_inner}, {M}) 不一致")
    unif = _single_uniforms(grid, w_plan, len(policies), uniforms)
    return _simulate_measured(system, policies, grid, x0, w_plan.increments[None],
                              [p.increments[None] for p in obs_plans], unif,
                              np.array([w_plan.path_index]), direct, freeze)


def simulate_team_local_meas_range(model: LocalMeasurementTeamModel, team, grid: TimeGrid, master_seed: int,
                                   start: int, stop: int, x0, bank: Optional[NoiseBank] = None,
                                   direct: bool = False, freeze_measurements: bool = True) -> MeasuredPathBatch:
    """路径区间 [start, stop) 的局部观测团队模拟（默认参考测度）"""
    policies = _team_policies(team, grid)
    if len(policies) != model.n_agents:
        raise ValidationError(f"团队策略数 {len(policies)} 与智能体数 {model.n_agents} 不一致")
    return _measured_range(_team_system(model), policies, grid, master_seed, start, stop, x0, bank,
                           direct, freeze_measurements)


def simulate_team_local_meas_reference(model: LocalMeasurementTeamModel, team, grid: TimeGrid,
                                       noise: Tuple[NoisePlan, Sequence[NoisePlan]], x0, uniforms=None,
                                       freeze_measurements: bool = True):
    """
    参考测度下的单条局部观测团队路径

    Returns:
        (x_path, [(y_samples_i, y_increments_i) for i in agents])
    """
    batch = _single_measured(_team_system(model), _team_policies(team, grid), grid, noise[0], list(noise[1]),
                             x0, uniforms, False, freeze_measurements)
    per_agent = [(batch.agent_y_samples(i)[0], batch.agent_observation_increments(i)[0])
                 for i in range(model.n_agents)]
    return batch.states[0], per_agent


def simulate_team_local_meas_direct(model: LocalMeasurementTeamModel, team, grid: TimeGrid,
                                    noise: Tuple[NoisePlan, Sequence[NoisePlan]], x0, uniforms=None,
                                    freeze_measurements: bool = True):
    """原始耦合方程 dYⁱ = gⁱ(X) dt + dBⁱ 下的单条团队路径"""
    batch = _single_measured(_team_system(model), _team_policies(team, grid), grid, noise[0], list(noise[1]),
                             x0, uniforms, True, freeze_measurements)
    per_agent = [(batch.agent_y_samples(i)[0], batch.agent_observation_increments(i)[0])
                 for i in range(model.n_agents)]
    return batch.states[0], per_agent


# ----------------------------------------------------------------------------
# 局部状态团队
# ----------------------------------------------------------------------------

def _agent_x0s(model: CoupledLocalStateTeamModel, x0s) -> List[np.ndarray]:
    if isinstance(x0s, (list, tuple)) and len(x0s) == model.n_agents:
        return [np.asarray(x, dtype=float) for x in x0s]
    flat = np.asarray(x0s, dtype=float)
    return [flat[..., sl] for sl in model.state_slices]


def simulate_team_decoupled_range(model: CoupledLocalStateTeamModel, team, grid: TimeGrid, master_seed: int,
                                  start: int, stop: int, x0s, bank: Optional[NoiseBank] = None) -> TeamPathBatch:
    """
    解耦动力学 dXⁱ = bⁱ(Xⁱ, Uⁱ) dt + σⁱ dBⁱ 下的团队路径批

    每个智能体独立积分，只使用自己的噪声流与策略随机流；耦合漂移留给 log_coupling_weight。
    """
    policies = _team_policies(team, grid)
    if len(policies) != model.n_agents:
        raise ValidationError(f"团队策略数 {len(policies)} 与智能体数 {model.n_agents} 不一致")
    starts = _agent_x0s(model, x0s)
    batches: List[PathBatch] = []
    for i, (agent, pol, x0) in enumerate(zip(model.agents, policies, starts)):
        incr = draw_increments(grid, agent.state_dim, master_seed, start, stop, STREAM_STATE, i, bank)
        unif = draw_uniforms(grid, master_seed, start, stop, i, bank)
        batches.append(simulate_batch(agent, pol, grid, incr, unif, x0, np.arange(start, stop)))
    return TeamPathBatch(
        tuple(b.states for b in batches),
        tuple(b.actions for b in batches),
        np.stack([b.action_indices for b in batches], axis=2),
        tuple(b.increments for b in batches),
        np.arange(start, stop),
        grid,
    )


def simulate_team_decoupled(model: CoupledLocalStateTeamModel, team, grid: TimeGrid,
                            noise: Sequence[NoisePlan], x0s, uniforms=None) -> TeamPathBatch:
    """单条解耦团队路径（每个智能体一份噪声计划）"""
    policies = _team_policies(team, grid)
    if len(noise) != model.n_agents or len(policies) != model.n_agents:
        raise ValidationError("噪声计划数、策略数与智能体数不一致")
    for agent in model.agents:
        ensure_valid(agent)
    starts = _agent_x0s(model, x0s)
    batches = []
    for i, (agent, pol, plan, x0) in enumerate(zip(model.agents, policies, noise, starts)):
        if uniforms is not None:
            unif = np.asarray(uniforms[i], dtype=float).reshape(1, -1)
        else:
            unif = path_generator(plan.master_seed, plan.path_index, STREAM_POLICY, i).random(grid.macro_steps)[None]
        batches.append(simulate_batch(agent, pol, grid, plan.increments[None], unif, x0,
                                      np.array([plan.path_index])))
    return TeamPathBatch(
        tuple(b.states for b in batches),
        tuple(b.actions for b in batches),
        np.stack([b.action_indices for b in batches], axis=2),
        tuple(b.increments for b in batches),
        np.array([noise[0].path_index]),
        grid,
    )


def _coupled_direct(model: CoupledLocalStateTeamModel, policies: List[InterpolatedPolicy], grid: TimeGrid,
                    incrs: List[np.ndarray], unifs: List[np.ndarray], starts: List[np.ndarray],
                    path_indices: np.ndarray) -> TeamPathBatch:
    n = incrs[0].shape[0]
    x0 = np.concatenate([broadcast_x0(x, n, m.state_dim) for x, m in zip(starts, model.agents)], axis=1)
    sx = model.state_slices

    def drift_fn(x, u, j):
        return model.joint_drift(x, u)

    def diffusion_fn(x, j):
        return model.joint_diffusion(x)

    def decide(k, x):
        vals, idxs = [], []
        for i, p in enumerate(policies):
            info = x[:, sx[i]] if p.information == "state" else None
            v, ix = p.act(k, info, unifs[i][:, k])
            vals.append(v)
            idxs.append(ix)
        return np.concatenate(vals, axis=1), np.stack(idxs, axis=1)

    joint_incr = np.concatenate(incrs, axis=2)
    states, actions, idx = integrate_controlled(grid, x0, joint_incr, drift_fn, diffusion_fn, decide, path_indices)
    sa = model.action_slices
    return TeamPathBatch(
        tuple(states[:, :, s] for s in sx),
        tuple(actions[:, :, s] for s in sa),
        idx,
        tuple(incrs),
        np.asarray(path_indices),
        grid,
    )


def simulate_team_coupled_range(model: CoupledLocalStateTeamModel, team, grid: TimeGrid, master_seed: int,
                                start: int, stop: int, x0s, bank: Optional[NoiseBank] = None) -> TeamPathBatch:
    """原始耦合动力学下的团队路径批（与解耦模拟共用噪声流，等价性检查用）"""
    policies = _team_policies(team, grid)
    if len(policies) != model.n_agents:
        raise ValidationError(f"团队策略数 {len(policies)} 与智能体数 {model.n_agents} 不一致")
    incrs = [draw_increments(grid, m.state_dim, master_seed, start, stop, STREAM_STATE, i, bank)
             for i, m in enumerate(model.agents)]
    unifs = [draw_uniforms(grid, master_seed, start, stop, i, bank) for i in range(model.n_agents)]
    return _coupled_direct(model, policies, grid, incrs, unifs, _agent_x0s(model, x0s), np.arange(start, stop))


def simulate_team_coupled_direct(model: CoupledLocalStateTeamModel, team, grid: TimeGrid,
                                 noise: Sequence[NoisePlan], x0s, uniforms=None) -> TeamPathBatch:
    """单条耦合团队路径"""
    policies = _team_policies(team, grid)
    if len(noise) != model.n_agents or len(policies) != model.n_agents:
        raise ValidationError("噪声计划数、策略数与智能体数不一致")
    if uniforms is None:
        unifs = [path_generator(noise[0].master_seed, noise[0].path_index, STREAM_POLICY, i).random(grid.macro_steps)[None]
                 for i in range(model.n_agents)]
    else:
        unifs = [np.asarray(u, dtype=float).reshape(1, -1) for u in uniforms]
    return _coupled_direct(model, policies, grid, [p.increments[None] for p in noise], unifs,
                           _agent_x0s(model, x0s), np.array([noise[0].path_index]))


# ----------------------------------------------------------------------------
# 独立性审计
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditReport:
    """动作编号与未来增量的经验相关系数表"""

    n_paths: int
    threshold: float
    entries: Tuple[Dict[str, object], ...]

    @property
    def flagged(self) -> List[Dict[str, object]]:
        return [e for e in self.entries if e["flagged"]]

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def max_abs_correlation(self) -> float:
        return max((abs(e["correlation"]) for e in self.entries), default=0.0)

    def to_dict(self):
        return {
            "n_paths": self.n_paths,
            "threshold": self.threshold,
            "tests": len(self.entries),
            "flagged": len(self.flagged),
            "max_abs_correlation": self.max_abs_correlation,
            "passed": self.passed,
        }


def _correlation(a: np.ndarray, f: np.ndarray) -> np.ndarray:
    """a (n,) 与 f (n, ch) 的逐通道 Pearson 相关系数；常值序列记为 0"""
    ac = a - a.mean()
    fc = f - f.mean(axis=0)
    sa = float(np.sqrt(np.sum(ac * ac)))
    sf = np.sqrt(np.sum(fc * fc, axis=0))
    out = np.zeros(f.shape[1])
    ok = (sf > 0) & (sa > 0)
    out[ok] = (ac @ fc)[ok] / (sa * sf[ok])
    return out


def independence_audit(action_indices: np.ndarray, increments: Dict[str, np.ndarray], grid: TimeGrid,
                       band: float = 3.0, min_paths: int = 10_000) -> AuditReport:
    """
    非预见性审计：第 k 步的动作编号与每个宏区间 m >= k 上的噪声增量之和做相关检验

    Args:
        action_indices: (n, N_h) 或 (n, N_h, agents)
        increments: 名称 -> (n, S, ch) 的布朗/观测增量
        grid: 时间网格
        band: 阈值系数，|corr| > band / √n 记为违规
        min_paths: 最少路径数

    Returns:
        AuditReport
    """
    idx = np.asarray(action_indices)
    if idx.ndim == 2:
        idx = idx[:, :, None]
    n = idx.shape[0]
    if n < min_paths:
        raise ValidationError(f"独立性审计至少需要 {min_paths} 条路径，当前 {n}")
    M = grid.inner_refine
    threshold = band / np.sqrt(n)
    entries = []
    window_sums = {name: arr.reshape(n, grid.macro_steps, M, arr.shape[2]).sum(axis=2)
                   for name, arr in increments.items()}
    for agent in range(idx.shape[2]):
        for k in range(grid.macro_steps):
            a = idx[:, k, agent].astype(float)
            for name, sums in window_sums.items():
                for m in range(k, grid.macro_steps):
                    corr = _correlation(a, sums[:, m, :])
                    for ch, c in enumerate(corr):
                        entries.append({
                            "source": name, "agent": agent, "step": k, "interval": m, "channel": ch,
                            "correlation": float(c), "flagged": bool(abs(c) > threshold),
                        })
    report = AuditReport(int(n), float(threshold), tuple(entries))
    if not report.passed:
        logger.warning(f"独立性审计发现 {len(report.flagged)} 处相关性超过阈值 {threshold:.4f}")
    return report
