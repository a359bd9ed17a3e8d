"""
内置模型算例

每个算例由一个构造函数给出，接受参数覆盖（未知参数报错），返回 Fixture：
模型、代价、时间网格、初始状态、各智能体的动作/状态/观测网格以及默认路径数。
参数全部回显在 Fixture.params 中，实验记录据此重放。
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from algorithms.info_structures import (
    CoupledLocalStateTeamModel, LocalMeasurementTeamModel, PartiallyObservedModel,
)
from algorithms.policy import (
    ActionGrid, ObservationQuantizer, StateGrid, TablePolicy, TeamPolicyTuple, deterministic_from_index,
    point_mass_rows, quantize_actions, uniform_markov, uniform_policy_like, uniform_wide_sense,
)
from algorithms.sde_core import DiffusionModel, TimeGrid, identity_diffusion, zero_drift
from inference.cost_eval import CostSpec
from utils.errors import ValidationError

logger = logging.getLogger(__name__)

STRUCTURES = ("full", "pomdp", "team_local", "team_coupled")


@dataclass(frozen=True)
class Fixture:
    """一个可直接交给实验的算例"""

    name: str
    structure: str
    model: Any
    cost: CostSpec
    time_grid: TimeGrid
    x0: Tuple[float, ...]
    action_grids: Tuple[ActionGrid, ...]
    state_grids: Tuple[StateGrid, ...] = ()
    quantizers: Tuple[ObservationQuantizer, ...] = ()
    solo_costs: Tuple[CostSpec, ...] = ()
    n_paths: int = 10_000
    history_length: Optional[int] = None
    params: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValidationError(f"未知的信息结构: {self.structure}")

    @property
    def action_grid(self) -> ActionGrid:
        return self.action_grids[0]

    @property
    def state_grid(self) -> Optional[StateGrid]:
        return self.state_grids[0] if self.state_grids else None

    @property
    def quantizer(self) -> Optional[ObservationQuantizer]:
        return self.quantizers[0] if self.quantizers else None

    @property
    def n_agents(self) -> int:
        return len(self.action_grids)

    def templates(self) -> List[TablePolicy]:
        """每个智能体的策略类模板（均匀随机化表）"""
        N = self.time_grid.macro_steps
        if self.structure in ("pomdp", "team_local"):
            return [uniform_wide_sense(ag, q, N, self.history_length)
                    for ag, q in zip(self.action_grids, self.quantizers)]
        if not self.state_grids:
            raise ValidationError(f"算例 {self.name} 没有状态网格")
        return [uniform_markov(ag, sg, N) for ag, sg in zip(self.action_grids, self.state_grids)]

    def reference_policies(self):
        """估计量等价性检查使用的三个固定策略：全选首个动作、均匀随机、按键轮换的反馈策略"""
        templates = self.templates()
        picks = [
            [deterministic_from_index(t, 0) for t in templates],
            [uniform_policy_like(t) for t in templates],
            [feedback_policy(t) for t in templates],
        ]
        if self.structure in ("team_local", "team_coupled"):
            return [TeamPolicyTuple(tuple(p)) for p in picks]
        return [p[0] for p in picks]

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "structure": self.structure, "params": dict(self.params)}


def feedback_policy(template: TablePolicy) -> TablePolicy:
    """确定性策略：第 k 步键 key 选动作 (key + k) mod K"""
    K = template.action_grid.size
    tables = [point_mass_rows(template.n_keys(k), K, (np.arange(template.n_keys(k)) + k) % K)
              for k in range(template.macro_steps)]
    return template.with_tables(tables)


# ----------------------------------------------------------------------------
# 参数与公共构件
# ----------------------------------------------------------------------------

def _merge(name: str, defaults: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    unknown = sorted(set(overrides) - set(defaults))
    if unknown:
        raise ValidationError(f"算例 {name} 不接受参数: {unknown}")
    params = dict(defaults)
    params.update(overrides)
    return params


def _time_grid(p: Dict[str, Any]) -> TimeGrid:
    return TimeGrid(float(p["horizon"]), int(p["macro_steps"]), int(p["inner_refine"]))


def _unit_box(bound: float, dim: int = 1) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    return tuple([-float(bound)] * dim), tuple([float(bound)] * dim)


def _state_grid(p: Dict[str, Any]) -> StateGrid:
    half = float(p["state_box"])
    return StateGrid.uniform([-half], [half], [int(p["cells"])])


def _quantizer(p: Dict[str, Any]) -> ObservationQuantizer:
    half = float(p["obs_box"])
    return ObservationQuantizer.uniform([-half], [half], [int(p["obs_levels"])])


def tanh_square_cost(horizon: float, weight: float = 1.0, dim: int = 1) -> CostSpec:
    """c = c_T = w·Σ tanh(x)²，dim 为状态维数（决定上界）"""
    return CostSpec(
        running=lambda x, u: weight * np.sum(np.tanh(x) ** 2, axis=1),
        terminal=lambda x: weight * np.sum(np.tanh(x) ** 2, axis=1),
        horizon=float(horizon),
        running_cap=float(weight * dim),
        terminal_cap=float(weight * dim),
        name="tanh_square",
    )


def capped_quadratic_cost(horizon: float, cap: float = 4.0, control_weight: float = 0.1) -> CostSpec:
    """c = min(|x|², cap) + λ|u|²，c_T = min(|x|², cap)（动作盒为 [-1, 1]）"""
    return CostSpec(
        running=lambda x, u: np.minimum(np.sum(x * x, axis=1), cap) + control_weight * np.sum(u * u, axis=1),
        terminal=lambda x: np.minimum(np.sum(x * x, axis=1), cap),
        horizon=float(horizon),
        running_cap=float(cap + control_weight),
        terminal_cap=float(cap),
        name="capped_quadratic",
    )


def tracking_cost(horizon: float, sharpness: float = 3.0) -> CostSpec:
    """c = (u - tanh(k·x))²，无终端代价；动作取 ±1 时上界为 4"""
    return CostSpec(
        running=lambda x, u: np.sum((u - np.tanh(sharpness * x[:, :u.shape[1]])) ** 2, axis=1),
        terminal=lambda x: np.zeros(x.shape[0]),
        horizon=float(horizon),
        running_cap=4.0,
        terminal_cap=0.0,
        name="tracking",
    )


def _full_cost(p: Dict[str, Any]) -> CostSpec:
    if p["cost"] == "tanh_square":
        return tanh_square_cost(p["horizon"])
    if p["cost"] == "capped_quadratic":
        return capped_quadratic_cost(p["horizon"])
    raise ValidationError(f"未知的代价: {p['cost']}")


# ----------------------------------------------------------------------------
# 全观测
# ----------------------------------------------------------------------------

FULL_DEFAULTS = {
    "horizon": 1.0, "macro_steps": 8, "inner_refine": 16, "cells": 9, "state_box": 2.25,
    "levels": 3, "action_bound": 1.0, "x0": 0.0, "cost": "tanh_square", "n_paths": 10_000,
}


def _full_fixture(name: str, p: Dict[str, Any], drift: Callable, drift_bound: float) -> Fixture:
    box = _unit_box(p["action_bound"])
    model = DiffusionModel(1, 1, drift, identity_diffusion(1), float(drift_bound), 0.5, box, name=name)
    return Fixture(
        name=name,
        structure="full",
        model=model,
        cost=_full_cost(p),
        time_grid=_time_grid(p),
        x0=(float(p["x0"]),),
        action_grids=(quantize_actions(box, int(p["levels"])),),
        state_grids=(_state_grid(p),),
        n_paths=int(p["n_paths"]),
        params=p,
    )


def build_identity(**overrides) -> Fixture:
    """b ≡ 0，σ = 1：参考动力学本身，Z_T ≡ 1"""
    p = _merge("identity", FULL_DEFAULTS, overrides)
    return _full_fixture("identity", p, zero_drift(1), 1.0)


def build_tanh_drift(**overrides) -> Fixture:
    """b = u·tanh(x)，σ = 1，动作盒 [-1, 1]：C = 1，Ĉ₁ = 0.5"""
    p = _merge("tanh_drift", FULL_DEFAULTS, overrides)
    bound = float(p["action_bound"])
    return _full_fixture("tanh_drift", p, lambda x, u: u * np.tanh(x), max(bound, 1.0))


def build_constant_drift(**overrides) -> Fixture:
    """b ≡ μ，σ = 1：E[Z_T²] = e^{μ²T} 精确成立"""
    p = _merge("constant_drift", dict(FULL_DEFAULTS, mu=0.5), overrides)
    mu = float(p["mu"])
    return _full_fixture("constant_drift", p, lambda x, u: np.full((x.shape[0], 1), mu), max(abs(mu), 1.0))


# ----------------------------------------------------------------------------
# 部分观测
# ----------------------------------------------------------------------------

POMDP_DEFAULTS = {
    "horizon": 2.0, "macro_steps": 2, "inner_refine": 16, "obs_gain": 1.5, "obs_sharpness": 2.0,
    "obs_levels": 2, "obs_box": 1.0, "x0": 0.0, "n_paths": 20_000, "y_drift": 0.0,
    "history_length": None,
}


def _pomdp_fixture(name: str, p: Dict[str, Any], informative: bool) -> Fixture:
    gain, sharp, y_drift = float(p["obs_gain"]), float(p["obs_sharpness"]), float(p["y_drift"])
    if y_drift != 0.0:
        def drift(x, y, u):
            return u * np.tanh(x) + y_drift * np.tanh(y)
        bound = 1.0 + abs(y_drift)
    else:
        def drift(x, y, u):
            return np.zeros((x.shape[0], 1))
        bound = 1.0

    def diffusion(x, y):
        return np.ones((x.shape[0], 1, 1))

    if informative:
        def observation(x):
            return gain * np.tanh(sharp * x)
    else:
        def observation(x):
            return np.zeros((x.shape[0], 1))

    box = ((-1.0,), (1.0,))
    model = PartiallyObservedModel(1, 1, 1, drift, diffusion, observation, bound, 0.5,
                                   abs(gain) if informative else 0.0, box, name=name)
    return Fixture(
        name=name,
        structure="pomdp",
        model=model,
        cost=tracking_cost(p["horizon"]),
        time_grid=_time_grid(p),
        x0=(float(p["x0"]),),
        action_grids=(quantize_actions(box, 2),),
        quantizers=(_quantizer(p),),
        n_paths=int(p["n_paths"]),
        history_length=None if p["history_length"] is None else int(p["history_length"]),
        params=p,
    )


def build_pomdp_informative(**overrides) -> Fixture:
    """b = 0，σ = 1，g = 1.5·tanh(2x)，代价 (u - tanh(3x))²，动作 {-1, 1}"""
    return _pomdp_fixture("pomdp_informative", _merge("pomdp_informative", POMDP_DEFAULTS, overrides), True)


def build_pomdp_uninformative(**overrides) -> Fixture:
    """同上但 g ≡ 0：观测不含信息"""
    return _pomdp_fixture("pomdp_uninformative", _merge("pomdp_uninformative", POMDP_DEFAULTS, overrides), False)


def build_pomdp_y_drift(**overrides) -> Fixture:
    """漂移依赖观测：b = u·tanh(x) + 0.1·tanh(y)"""
    defaults = dict(POMDP_DEFAULTS, y_drift=0.1, horizon=1.0, macro_steps=2)
    return _pomdp_fixture("pomdp_y_drift", _merge("pomdp_y_drift", defaults, overrides), True)


# ----------------------------------------------------------------------------
# 团队
# ----------------------------------------------------------------------------

TEAM_LOCAL_DEFAULTS = {
    "horizon": 1.0, "macro_steps": 2, "inner_refine": 16, "gains": (1.0, 0.5), "obs_levels": 2,
    "obs_box": 1.0, "x0": 0.0, "n_paths": 4_000, "history_length": None,
}


def build_team_local_meas(**overrides) -> Fixture:
    """
    两个智能体共享一维状态：b = ½(u¹ + u²)·tanh(x)，σ = 1，智能体 i 观测 dYⁱ = gᵢ·tanh(x) dt + dBⁱ
    """
    p = _merge("team_local_meas", TEAM_LOCAL_DEFAULTS, overrides)
    gains = tuple(float(g) for g in p["gains"])
    n_agents = len(gains)

    def drift(x, y, u):
        return np.mean(u, axis=1, keepdims=True) * np.tanh(x)

    def diffusion(x, y):
        return np.ones((x.shape[0], 1, 1))

    observations = tuple((lambda g: (lambda x: g * np.tanh(x)))(g) for g in gains)
    box = ((-1.0,), (1.0,))
    model = LocalMeasurementTeamModel(
        state_dim=1,
        obs_dims=tuple(1 for _ in gains),
        action_dims=tuple(1 for _ in gains),
        drift=drift,
        diffusion=diffusion,
        observations=observations,
        drift_bound=1.0,
        ellipticity=0.5,
        observation_bounds=tuple(abs(g) for g in gains),
        action_boxes=tuple(box for _ in gains),
        name="team_local_meas",
    )
    return Fixture(
        name="team_local_meas",
        structure="team_local",
        model=model,
        cost=tanh_square_cost(p["horizon"]),
        time_grid=_time_grid(p),
        x0=(float(p["x0"]),),
        action_grids=tuple(quantize_actions(box, 2) for _ in range(n_agents)),
        quantizers=tuple(_quantizer(p) for _ in range(n_agents)),
        n_paths=int(p["n_paths"]),
        history_length=None if p["history_length"] is None else int(p["history_length"]),
        params=p,
    )


TEAM_COUPLED_DEFAULTS = {
    "horizon": 1.0, "macro_steps": 2, "inner_refine": 16, "coupling": 0.3, "cells": 2, "state_box": 2.0,
    "levels": 2, "x0": (0.5, -0.5), "n_paths": 4_000,
}


def _coupled_fixture(name: str, p: Dict[str, Any]) -> Fixture:
    strength = float(p["coupling"])
    x0 = tuple(float(v) for v in p["x0"])
    n_agents = len(x0)
    box = ((-1.0,), (1.0,))
    agents = tuple(DiffusionModel(1, 1, lambda x, u: u * np.tanh(x), identity_diffusion(1), 1.0, 0.5, box,
                                  name=f"{name}/agent{i}") for i in range(n_agents))

    def coupling_for(i):
        others = [j for j in range(n_agents) if j != i]

        def coupling(x_all, u_all):
            return strength * np.mean(np.tanh(x_all[:, others]), axis=1, keepdims=True)
        return coupling

    model = CoupledLocalStateTeamModel(agents, tuple(coupling_for(i) for i in range(n_agents)),
                                       abs(strength), name=name)
    if strength == 0.0:
        model = model.decoupled()
    return Fixture(
        name=name,
        structure="team_coupled",
        model=model,
        cost=tanh_square_cost(p["horizon"], dim=n_agents),
        time_grid=_time_grid(p),
        x0=x0,
        action_grids=tuple(quantize_actions(box, int(p["levels"])) for _ in range(n_agents)),
        state_grids=tuple(_state_grid(p) for _ in range(n_agents)),
        solo_costs=tuple(tanh_square_cost(p["horizon"]) for _ in range(n_agents)),
        n_paths=int(p["n_paths"]),
        params=p,
    )


def build_team_coupled(**overrides) -> Fixture:
    """bⁱ = uⁱ·tanh(xⁱ)，bⁱ₀ = 0.3·tanh(xʲ)（j ≠ i），σⁱ = 1，可分代价 Σ tanh(xⁱ)²"""
    return _coupled_fixture("team_coupled", _merge("team_coupled", TEAM_COUPLED_DEFAULTS, overrides))


def build_team_decoupled(**overrides) -> Fixture:
    """team_coupled 去掉耦合漂移（bⁱ₀ ≡ 0）"""
    defaults = dict(TEAM_COUPLED_DEFAULTS, coupling=0.0)
    return _coupled_fixture("team_decoupled", _merge("team_decoupled", defaults, overrides))


FIXTURE_BUILDERS: Dict[str, Callable[..., Fixture]] = {
    "identity": build_identity,
    "tanh_drift": build_tanh_drift,
    "constant_drift": build_constant_drift,
    "pomdp_informative": build_pomdp_informative,
    "pomdp_uninformative": build_pomdp_uninformative,
    "pomdp_y_drift": build_pomdp_y_drift,
    "team_local_meas": build_team_local_meas,
    "team_coupled": build_team_coupled,
    "team_decoupled": build_team_decoupled,
}
