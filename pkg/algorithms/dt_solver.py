"""
离散时间近似问题的构造与求解

- 全观测：按 (状态格, 动作) 模拟单宏步路径估计转移核与阶段代价 ĉ，逆向归纳求解，插值回连续时间
- 部分观测：在有限宽义策略类上穷举（参考测度下共同噪声）
- 团队：在各智能体有限策略类的乘积上穷举（共同噪声），附随机挑战者与集中式下界
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from algorithms.girsanov import log_observation_weights
from algorithms.info_structures import (
    CoupledLocalStateTeamModel, LocalMeasurementTeamModel, PartiallyObservedModel, simulate_pomdp_range,
)
from algorithms.policy import (
    ActionGrid, InterpolatedPolicy, MarkovTablePolicy, RelaxedControl, StateGrid, TablePolicy, TeamPolicyTuple,
    WideSensePolicy, deterministic_from_index, enumerate_deterministic, interpolate, open_loop_policy,
    point_mass_rows, policy_slots,
)
from algorithms.sde_core import (
    STREAM_KERNEL, STREAM_KERNEL_START, DiffusionModel, NoiseBank, TimeGrid, draw_increments, path_generator,
)
from inference.cost_eval import (
    CostSpec, frozen_rollout, mc_cost_pomdp, mc_cost_team_coupled, mc_cost_team_local_meas, path_costs,
)
from utils.errors import KernelBuildError, ValidationError
from utils.estimates import EstimateWithError
from utils.parallel import map_path_chunks

logger = logging.getLogger(__name__)


class SolverDefaults:
    """求解器默认参数"""
    N_KERNEL_MIN = 200
    KERNEL_ROW_TOL = 1e-9
    MARKOV_ENUMERATION_GUARD = 10 ** 6
    TEAM_ENUMERATION_GUARD = 10 ** 4
    WIDE_SENSE_MAX_STEPS = 3
    WIDE_SENSE_MAX_SYMBOLS = 3
    WIDE_SENSE_MAX_ACTIONS = 3
    CHALLENGERS = 100
    ENUMERATION_BLOCK = 16384


# ----------------------------------------------------------------------------
# 离散 MDP
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteControlProblem:
    """
    采样得到的有限 MDP

    kernel[s, a, s'] 为估计的转移概率，stage_cost[s, a] 为 ĉ，terminal[s] 为终端代价。
    """

    kernel: np.ndarray
    stage_cost: np.ndarray
    terminal: np.ndarray
    macro_steps: int
    samples_per_row: int
    state_grid: Optional[StateGrid] = None
    action_grid: Optional[ActionGrid] = None
    h: float = 1.0
    stage_cost_se: Optional[np.ndarray] = field(default=None, compare=False)
    out_of_box: int = 0
    start: str = "center"

    def __post_init__(self):
        S, A = self.stage_cost.shape
        if self.kernel.shape != (S, A, S) or self.terminal.shape != (S,):
            raise ValidationError(f"转移核 {self.kernel.shape}、阶段代价 {self.stage_cost.shape}、"
                                  f"终端代价 {self.terminal.shape} 形状不一致")
        if self.macro_steps < 1:
            raise ValidationError("宏步数必须 >= 1")
        if np.any(self.kernel < 0) or np.any(np.abs(self.kernel.sum(axis=2) - 1.0) > SolverDefaults.KERNEL_ROW_TOL):
            raise ValidationError("转移核存在负值或行和不为 1")
        for name, arr in (("阶段代价", self.stage_cost), ("终端代价", self.terminal)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValidationError(f"{name}必须有限且非负")

    @property
    def n_states(self) -> int:
        return int(self.stage_cost.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.stage_cost.shape[1])

    def with_horizon(self, macro_steps: int) -> "DiscreteControlProblem":
        """同一组单步表、不同步数的问题"""
        return DiscreteControlProblem(self.kernel, self.stage_cost, self.terminal, int(macro_steps),
                                      self.samples_per_row, self.state_grid, self.action_grid, self.h,
                                      self.stage_cost_se, self.out_of_box, self.start)


@dataclass(frozen=True)
class ValueTable:
    """values[k, s] 为第 k 步的最优剩余代价，values[N_h] 为终端层"""

    values: np.ndarray

    @property
    def macro_steps(self) -> int:
        return int(self.values.shape[0] - 1)

    def value(self, k: int, cell: int) -> float:
        return float(self.values[k, cell])

    def to_dict(self):
        return {"values": self.values.tolist()}


def build_discrete_mdp(model: DiffusionModel, state_grid: StateGrid, action_grid: ActionGrid, grid: TimeGrid,
                       n_kernel: int, cost: CostSpec, master_seed: int = 0, start: str = "center",
                       n_min: int = SolverDefaults.N_KERNEL_MIN, bank: Optional[NoiseBank] = None) -> DiscreteControlProblem:
    """
    估计时间齐次的转移核与阶段代价

    对每个 (格, 动作) 从格中心（start="uniform" 时从格内均匀点）出发模拟 n_kernel 条单宏步路径，
    动作冻结；下一格的经验频率构成核的一行，积分运行代价的均值为 ĉ。
    (格 s, 动作 a) 使用路径编号 [(s·K + a)·n_kernel, (s·K + a + 1)·n_kernel)。

    Raises:
        KernelBuildError: n_kernel < n_min
    """
    if start not in ("center", "uniform"):
        raise ValidationError(f"未知的起点方式: {start}")
    S, K = state_grid.n_cells, action_grid.size
    if n_kernel < n_min:
        raise KernelBuildError(f"所有转移核行都只有 {n_kernel} 个样本（每个 (格, 动作) 样本数相同），至少需要 {n_min}；"
                               f"首个不足的行为 (cell=0, action=0)", cell=0, action=0)
    if action_grid.dim != model.action_dim or state_grid.dim != model.state_dim:
        raise ValidationError("网格维数与模型不一致")
    step = TimeGrid(grid.h, 1, grid.inner_refine)
    rows = S * K
    centers = state_grid.centers
    points = action_grid.points
    pair = np.arange(rows)

    def chunk(a, b):
        idx = np.arange(a, b)
        p = idx // n_kernel
        cells, acts = p // K, p % K
        if start == "center":
            starts = centers[cells]
        else:
            u = np.stack([path_generator(master_seed, int(i), STREAM_KERNEL_START).random(model.state_dim)
                          for i in idx])
            starts = state_grid.sample_in_cells(cells, u)
        incr = draw_increments(step, model.state_dim, master_seed, a, b, STREAM_KERNEL, 0, bank)
        end, integrated = frozen_rollout(model, starts, points[acts], step, incr, cost)
        return np.column_stack([state_grid.cell_of(end), integrated, state_grid.cell_coords(end)[1]])

    out = np.concatenate(map_path_chunks(chunk, rows * n_kernel), axis=0)
    nxt = out[:, 0].astype(np.int64).reshape(rows, n_kernel)
    costs = out[:, 1].reshape(rows, n_kernel)
    outside = int(out[:, 2].sum())
    kernel = np.zeros((rows, S))
    for p in pair:
        kernel[p] = np.bincount(nxt[p], minlength=S) / n_kernel
    stage = costs.mean(axis=1)
    stage_se = costs.std(axis=1, ddof=1) / math.sqrt(n_kernel) if n_kernel > 1 else np.zeros(rows)
    terminal = np.array(cost.terminal_at(centers), dtype=float)
    if outside:
        logger.warning(f"转移核估计中有 {outside} 个终点落在状态盒外（已归入边界格）")
    logger.info(f"离散 MDP 构造完成: {S} 格 × {K} 动作，每行 {n_kernel} 个样本，h={grid.h:.4g}")
    return DiscreteControlProblem(
        kernel=kernel.reshape(S, K, S),
        stage_cost=stage.reshape(S, K),
        terminal=terminal,
        macro_steps=grid.macro_steps,
        samples_per_row=int(n_kernel),
        state_grid=state_grid,
        action_grid=action_grid,
        h=grid.h,
        stage_cost_se=stage_se.reshape(S, K),
        out_of_box=outside,
        start=start,
    )


def _expected_next(kernel: np.ndarray, v_next: np.ndarray) -> np.ndarray:
    """
    E[V(s') | s, a]，v_next 形状 (P, S)，返回 (P, S, A)

    按 s' 顺序逐项累加，任何批量大小下同一元素的结果逐位相同。
    """
    P = v_next.shape[0]
    S, A, _ = kernel.shape
    out = np.zeros((P, S, A))
    for t in range(kernel.shape[2]):
        out += kernel[None, :, :, t] * v_next[:, t][:, None, None]
    return out


def backward_induction(problem: DiscreteControlProblem) -> Tuple[ValueTable, MarkovTablePolicy]:
    """
    V_{N_h} = 终端代价；V_k(s) = min_a [ĉ(s, a) + Σ P̂(s'|s, a) V_{k+1}(s')]

    取最小值时并列的动作取最小编号；返回确定性 Markov 表策略。
    """
    N, S, A = problem.macro_steps, problem.n_states, problem.n_actions
    values = np.zeros((N + 1, S))
    values[N] = problem.terminal
    choices = np.zeros((N, S), dtype=np.int64)
    for k in range(N - 1, -1, -1):
        q = problem.stage_cost + _expected_next(problem.kernel, values[k + 1][None])[0]
        choices[k] = np.argmin(q, axis=1)
        values[k] = q[np.arange(S), choices[k]]
    action_grid, state_grid = problem.action_grid, problem.state_grid
    if action_grid is None or state_grid is None:
        # 纯表格问题：动作值取编号本身，状态格为 [0, S) 上的单位格
        action_grid = ActionGrid((tuple(float(a) for a in range(A)),), ((0.0,), (float(max(A - 1, 0)),)))
        state_grid = StateGrid((0.0,), (float(S),), (S,))
    policy = MarkovTablePolicy(action_grid, state_grid, [point_mass_rows(S, A, choices[k]) for k in range(N)])
    return ValueTable(values), policy


def evaluate_markov_choices(problem: DiscreteControlProblem, choices: np.ndarray) -> np.ndarray:
    """
    确定性 Markov 策略批的精确值：choices 形状 (P, N_h, S)，返回 V_0 (P, S)

    与 backward_induction 使用相同的逐项累加顺序。
    """
    P = choices.shape[0]
    S = problem.n_states
    v = np.broadcast_to(problem.terminal, (P, S)).copy()
    rows = np.arange(S)[None, :]
    for k in range(problem.macro_steps - 1, -1, -1):
        q = problem.stage_cost[None] + _expected_next(problem.kernel, v)
        v = np.take_along_axis(q, choices[:, k, :, None], axis=2)[:, :, 0]
    return v


def enumerate_markov_policies(problem: DiscreteControlProblem,
                              guard: int = SolverDefaults.MARKOV_ENUMERATION_GUARD) -> Tuple[np.ndarray, np.ndarray]:
    """
    在全部确定性 Markov 策略上穷举每个初始格的最小值

    Returns:
        (最小值 (S,), 取得最小值的策略编号 (S,)；编号按 (k, s) 字典序，首位最高)
    """
    N, S, A = problem.macro_steps, problem.n_states, problem.n_actions
    slots = N * S
    total = A ** slots
    if total > guard:
        raise ValidationError(f"Markov 策略数 {total} 超过穷举上限 {guard}")
    best = np.full(S, np.inf)
    best_idx = np.zeros(S, dtype=np.int64)
    powers = A ** np.arange(slots - 1, -1, -1, dtype=np.int64)
    for a in range(0, total, SolverDefaults.ENUMERATION_BLOCK):
        idx = np.arange(a, min(a + SolverDefaults.ENUMERATION_BLOCK, total), dtype=np.int64)
        digits = (idx[:, None] // powers[None, :]) % A
        v0 = evaluate_markov_choices(problem, digits.reshape(-1, N, S))
        local = np.argmin(v0, axis=0)
        vals = v0[local, np.arange(S)]
        better = vals < best
        best[better] = vals[better]
        best_idx[better] = idx[local[better]]
    return best, best_idx


@dataclass(frozen=True)
class SolverGrids:
    """求解所需的状态网格、动作网格与时间网格"""

    state_grid: StateGrid
    action_grid: ActionGrid
    time_grid: TimeGrid


@dataclass(frozen=True)
class DiscreteSolution:
    policy: InterpolatedPolicy
    value: float
    problem: DiscreteControlProblem
    values: ValueTable
    markov_policy: MarkovTablePolicy
    initial_cell: int


def solve_discrete(model: DiffusionModel, cost: CostSpec, grids: SolverGrids, n_kernel: int, x0,
                   master_seed: int = 0, start: str = "center", n_min: int = SolverDefaults.N_KERNEL_MIN,
                   bank: Optional[NoiseBank] = None) -> DiscreteSolution:
    """构造 → 逆向归纳 → 插值，并保留中间结果"""
    problem = build_discrete_mdp(model, grids.state_grid, grids.action_grid, grids.time_grid, n_kernel, cost,
                                 master_seed, start, n_min, bank)
    values, markov = backward_induction(problem)
    cell = int(grids.state_grid.cell_of(np.asarray(x0, dtype=float).reshape(1, -1))[0])
    lifted = interpolate(markov, grids.time_grid)
    logger.info(f"离散问题最优值 J*={values.value(0, cell):.6g}（初始格 {cell}）")
    return DiscreteSolution(lifted, values.value(0, cell), problem, values, markov, cell)


def solve_and_lift(model: DiffusionModel, cost: CostSpec, grids: SolverGrids, n_kernel: int, x0=None,
                   master_seed: int = 0, start: str = "center",
                   n_min: int = SolverDefaults.N_KERNEL_MIN) -> Tuple[InterpolatedPolicy, float]:
    """
    返回插值后的连续时间策略与离散最优值 J_n*（初始格处）
    """
    x0 = np.zeros(model.state_dim) if x0 is None else x0
    sol = solve_discrete(model, cost, grids, n_kernel, x0, master_seed, start, n_min)
    return sol.policy, sol.value


# ----------------------------------------------------------------------------
# 部分观测：宽义策略穷举
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PomdpProblem:
    """参考测度下评估的有限视界部分观测问题"""

    model: PartiallyObservedModel
    cost: CostSpec
    grid: TimeGrid
    x0: Tuple[float, ...]
    n_paths: int
    master_seed: int = 0
    freeze_measurements: bool = True

    def evaluate(self, policy, bank: Optional[NoiseBank] = None) -> EstimateWithError:
        return mc_cost_pomdp(self.model, policy, self.cost, self.grid, self.n_paths, np.asarray(self.x0),
                             self.master_seed, bank, False, self.freeze_measurements)


def _sequence_costs(problem: PomdpProblem, action_grid: ActionGrid, bank: NoiseBank) -> Tuple[np.ndarray, np.ndarray]:
    """
    全部开环动作序列下的逐路径加权代价 C[p, seq] 以及观测样本

    参考测度下观测与策略无关，确定性策略在每条路径上的代价等于其实际动作序列对应的开环代价。
    """
    K, N = action_grid.size, problem.grid.macro_steps
    grid, cost = problem.grid, problem.cost
    seqs = list(np.ndindex(*([K] * N)))
    cols, y_samples = [], None
    for seq in seqs:
        pol = interpolate(open_loop_policy(action_grid, seq), grid)

        def chunk(a, b, pol=pol):
            batch = simulate_pomdp_range(problem.model, pol, grid, problem.master_seed, a, b,
                                         np.asarray(problem.x0), bank, False, problem.freeze_measurements)
            logw = log_observation_weights(batch.states, batch.observation_increments,
                                           problem.model.observation_at, grid)
            c = path_costs(batch.states, batch.inner_actions, cost, grid.delta)
            return np.exp(logw) * c, batch.y_samples

        parts = map_path_chunks(chunk, problem.n_paths)
        cols.append(np.concatenate([p[0] for p in parts]))
        if y_samples is None:
            y_samples = np.concatenate([p[1] for p in parts], axis=0)
    return np.stack(cols, axis=1), y_samples


def enumerate_open_loop(problem: PomdpProblem, action_grid: ActionGrid,
                        bank: Optional[NoiseBank] = None) -> Tuple[RelaxedControl, EstimateWithError]:
    """最优开环动作序列（并列取字典序最小），以共同噪声重新评估给出估计"""
    bank = bank or NoiseBank()
    costs, _ = _sequence_costs(problem, action_grid, bank)
    means = costs.mean(axis=0)
    best = int(np.argmin(means))
    seq = list(np.ndindex(*([action_grid.size] * problem.grid.macro_steps)))[best]
    policy = open_loop_policy(action_grid, seq)
    return policy, problem.evaluate(policy, bank)


def enumerate_wide_sense(problem: PomdpProblem, template: WideSensePolicy,
                         bank: Optional[NoiseBank] = None) -> Tuple[WideSensePolicy, EstimateWithError]:
    """
    在确定性宽义策略类 {(k, 历史编码) -> 动作} 上求共同噪声下的最小估计代价

    所有候选共用同一批参考路径，每条路径上的代价只取决于实际执行的动作序列；
    按观测历史树自底向上逐节点取最小（并列取最小动作编号），结果与逐个候选评估后取字典序
    最小的最优者相同。最后用 mc_cost_pomdp 重新评估最优策略。

    Raises:
        ValidationError: 超出规模保护（N_h <= 3，符号数 <= 3，动作数 <= 3），或历史被截断
    """
    N = problem.grid.macro_steps
    K = template.action_grid.size
    n_sym = template.quantizer.n_symbols
    if N > SolverDefaults.WIDE_SENSE_MAX_STEPS or n_sym > SolverDefaults.WIDE_SENSE_MAX_SYMBOLS \
            or K > SolverDefaults.WIDE_SENSE_MAX_ACTIONS:
        raise ValidationError(f"宽义策略类过大: N_h={N}, 观测符号数={n_sym}, 动作数={K}")
    if template.macro_steps != N:
        raise ValidationError("模板策略宏步数与问题不一致")
    if template.history_length < N - 1:
        raise ValidationError("穷举要求保留完整观测历史")
    bank = bank or NoiseBank()
    costs, y_samples = _sequence_costs(problem, template.action_grid, bank)
    n = costs.shape[0]
    symbols = template.quantizer.symbol(y_samples[:, 1:N, :].reshape(-1, y_samples.shape[2])).reshape(n, N - 1) \
        if N > 1 else np.zeros((n, 0), dtype=np.int64)
    last_codes = template.history_code(N - 1, symbols) if N > 1 else np.zeros(n, dtype=np.int64)
    # 叶层：每个第 N_h-1 步历史节点、每个完整动作序列的代价和
    n_leaf = n_sym ** (N - 1)
    value = np.zeros((n_leaf, K ** N))
    np.add.at(value, last_codes, costs)
    choices: List[np.ndarray] = [None] * N
    for k in range(N - 1, -1, -1):
        nodes = n_sym ** k
        v = value.reshape(nodes, K ** k, K)
        choices[k] = np.argmin(v, axis=2)
        best = np.take_along_axis(v, choices[k][:, :, None], axis=2)[:, :, 0]
        if k > 0:
            value = best.reshape(nodes // n_sym, n_sym, K ** k).sum(axis=1)
    # 自根向下恢复每个节点的动作
    tables = []
    prefix = np.zeros(1, dtype=np.int64)
    for k in range(N):
        nodes = n_sym ** k
        act = choices[k][np.arange(nodes), prefix]
        tables.append(point_mass_rows(nodes, K, act))
        if k + 1 < N:
            prefix = np.repeat(prefix * K + act, n_sym)
    policy = template.with_tables(tables)
    est = problem.evaluate(policy, bank)
    logger.info(f"宽义策略穷举完成: 最优估计 {est.mean:.6g} ± {est.standard_error:.3g}")
    return policy, est


# ----------------------------------------------------------------------------
# 团队穷举
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TeamProblem:
    """团队问题：局部观测团队或局部状态耦合团队"""

    model: Union[LocalMeasurementTeamModel, CoupledLocalStateTeamModel]
    cost: CostSpec
    grid: TimeGrid
    x0: Tuple[float, ...]
    n_paths: int
    master_seed: int = 0

    def evaluate(self, team: TeamPolicyTuple, bank: Optional[NoiseBank] = None) -> EstimateWithError:
        x0 = np.asarray(self.x0, dtype=float)
        if isinstance(self.model, CoupledLocalStateTeamModel):
            return mc_cost_team_coupled(self.model, team, self.cost, self.grid, self.n_paths, x0,
                                        self.master_seed, bank)
        return mc_cost_team_local_meas(self.model, team, self.cost, self.grid, self.n_paths, x0,
                                       self.master_seed, bank)


def _class_sizes(templates: Sequence[TablePolicy]) -> List[int]:
    return [enumerate_deterministic(t.action_grid.size, policy_slots(t)) for t in templates]


def team_tuple_from_index(templates: Sequence[TablePolicy], index: int) -> TeamPolicyTuple:
    """乘积类中的第 index 个确定性策略组（智能体 0 为最高位）"""
    sizes = _class_sizes(templates)
    digits = []
    rem = int(index)
    for s in reversed(sizes):
        digits.append(rem % s)
        rem //= s
    digits.reverse()
    return TeamPolicyTuple(tuple(deterministic_from_index(t, d) for t, d in zip(templates, digits)))


def team_brute_force(problem: TeamProblem, templates: Sequence[TablePolicy],
                     guard: int = SolverDefaults.TEAM_ENUMERATION_GUARD,
                     bank: Optional[NoiseBank] = None) -> Tuple[TeamPolicyTuple, EstimateWithError]:
    """
    逐个评估乘积类中的全部确定性策略组（共同噪声），返回最小者（并列取字典序最小）

    Args:
        problem: 团队问题
        templates: 每个智能体一个模板策略，决定其信息模式与键集合
    """
    sizes = _class_sizes(templates)
    total = int(np.prod(sizes))
    if total > guard:
        raise ValidationError(f"团队策略组数 {total} 超过穷举上限 {guard}")
    bank = bank or NoiseBank()
    best_team, best_est = None, None
    for idx in range(total):
        team = team_tuple_from_index(templates, idx)
        est = problem.evaluate(team, bank)
        if best_est is None or est.mean < best_est.mean:
            best_team, best_est = team, est
        if (idx + 1) % 256 == 0:
            logger.info(f"团队穷举进度 {idx + 1}/{total}")
    return best_team, best_est


def random_team_challengers(problem: TeamProblem, templates: Sequence[TablePolicy],
                            count: int = SolverDefaults.CHALLENGERS, seed: int = 0,
                            bank: Optional[NoiseBank] = None) -> List[Tuple[int, EstimateWithError]]:
    """均匀随机抽取 count 个确定性策略组，在共同噪声下评估"""
    total = int(np.prod(_class_sizes(templates)))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    picks = rng.integers(0, total, size=int(count))
    bank = bank or NoiseBank()
    return [(int(i), problem.evaluate(team_tuple_from_index(templates, int(i)), bank)) for i in picks]


def product_action_grid(grids: Sequence[ActionGrid]) -> ActionGrid:
    """联合动作网格：各智能体网格的乘积，智能体 0 为最高位"""
    values = tuple(v for g in grids for v in g.values)
    lo = tuple(v for g in grids for v in g.box[0])
    hi = tuple(v for g in grids for v in g.box[1])
    return ActionGrid(values, (lo, hi))


def product_state_grid(grids: Sequence[StateGrid]) -> StateGrid:
    return StateGrid(tuple(v for g in grids for v in g.lo), tuple(v for g in grids for v in g.hi),
                     tuple(c for g in grids for c in g.cells))


def build_team_mdp(model: CoupledLocalStateTeamModel, state_grids: Sequence[StateGrid],
                   action_grids: Sequence[ActionGrid], grid: TimeGrid, n_kernel: int, cost: CostSpec,
                   master_seed: int = 0, n_min: int = SolverDefaults.N_KERNEL_MIN) -> DiscreteControlProblem:
    """
    联合状态上的集中式采样 MDP；其最优值在采样误差范围内是分散式最优值的下界
    """
    if len(state_grids) != model.n_agents or len(action_grids) != model.n_agents:
        raise ValidationError("网格数目与智能体数不一致")
    return build_discrete_mdp(model.joint_model(), product_state_grid(state_grids), product_action_grid(action_grids),
                              grid, n_kernel, cost, master_seed, "center", n_min)
