"""
策略类：量化松弛控制、Markov 表策略、宽义（观测历史）策略、团队策略组，以及分段常值插值

所有离散策略都表示为“每个宏步一张表”：tables[k] 形状为 (键数, 动作数)，每行是动作网格上的
概率分布。不同策略类的区别只在于第 k 步的键如何由可用信息计算：
- RelaxedControl：开环，每步只有一个键
- MarkovTablePolicy：X_{kh} 所在的状态格
- WideSensePolicy：量化后的观测样本 Y_h, ..., Y_{kh}（截断到最近 L 个）的编码

键只能由时间编号 <= k 的数据计算，非预见性由结构保证。
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ValidationError

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12


# ----------------------------------------------------------------------------
# 网格
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionGrid:
    """紧动作盒上的乘积网格，编号按行优先（最后一维变化最快）"""

    values: Tuple[Tuple[float, ...], ...]
    box: Tuple[Tuple[float, ...], Tuple[float, ...]]

    def __post_init__(self):
        lo, hi = self.box
        for d, vals in enumerate(self.values):
            if len(vals) < 1:
                raise ValidationError(f"第 {d} 维动作网格为空")
            if any(b <= a for a, b in zip(vals[:-1], vals[1:])):
                raise ValidationError(f"第 {d} 维动作网格必须严格递增: {vals}")
            if vals[0] < lo[d] or vals[-1] > hi[d]:
                raise ValidationError(f"第 {d} 维动作网格越出动作盒 [{lo[d]}, {hi[d]}]")

    @property
    def dim(self) -> int:
        return len(self.values)

    @property
    def size(self) -> int:
        return int(np.prod([len(v) for v in self.values]))

    @property
    def points(self) -> np.ndarray:
        """(K, A) 全部网格点"""
        mesh = np.meshgrid(*[np.asarray(v, dtype=float) for v in self.values], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def point(self, index: int) -> np.ndarray:
        return self.points[int(index)]

    def index_of(self, coords: Sequence[int]) -> int:
        """各维坐标编号 -> 全局编号"""
        return int(np.ravel_multi_index(tuple(int(c) for c in coords), tuple(len(v) for v in self.values)))

    def coords_of(self, index: int) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(int(index), tuple(len(v) for v in self.values)))


def quantize_actions(box: Tuple[Sequence[float], Sequence[float]], levels) -> ActionGrid:
    """
    动作盒的均匀量化

    Args:
        box: (lo, hi)，每维 lo <= hi
        levels: 每维的量化级数（整数或列表）；级数 >= 2 时包含端点，级数 = 1 时取中点

    Returns:
        ActionGrid
    """
    lo = np.asarray(box[0], dtype=float).reshape(-1)
    hi = np.asarray(box[1], dtype=float).reshape(-1)
    if lo.size == 0 or lo.size != hi.size or np.any(hi < lo):
        raise ValidationError(f"动作盒为空或不合法: lo={lo}, hi={hi}")
    if np.isscalar(levels):
        levels = [int(levels)] * lo.size
    if len(levels) != lo.size:
        raise ValidationError(f"量化级数 {levels} 与动作维数 {lo.size} 不一致")
    values = []
    for d, q in enumerate(levels):
        q = int(q)
        if q < 1:
            raise ValidationError(f"第 {d} 维量化级数必须 >= 1: {q}")
        if q == 1:
            values.append((float(0.5 * (lo[d] + hi[d])),))
        else:
            if hi[d] == lo[d]:
                raise ValidationError(f"第 {d} 维动作盒退化，无法放置 {q} 个点")
            values.append(tuple(float(v) for v in np.linspace(lo[d], hi[d], q)))
    return ActionGrid(tuple(values), (tuple(float(v) for v in lo), tuple(float(v) for v in hi)))


@dataclass(frozen=True)
class StateGrid:
    """状态盒的均匀划分，盒外状态就近归入边界格（并计数）"""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    cells: Tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.cells)) or len(self.lo) == 0:
            raise ValidationError("状态网格维数不一致")
        if any(c < 1 for c in self.cells) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValidationError(f"状态网格不合法: lo={self.lo}, hi={self.hi}, cells={self.cells}")

    @classmethod
    def uniform(cls, lo, hi, cells) -> "StateGrid":
        lo = tuple(float(v) for v in np.atleast_1d(lo))
        hi = tuple(float(v) for v in np.atleast_1d(hi))
        cells = tuple(int(c) for c in np.atleast_1d(cells))
        if len(cells) == 1 and len(lo) > 1:
            cells = cells * len(lo)
        return cls(lo, hi, cells)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def widths(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / np.asarray(self.cells)

    @property
    def centers(self) -> np.ndarray:
        """(n_cells, N) 各格中心，编号行优先"""
        axes = [np.asarray(self.lo)[d] + (np.arange(self.cells[d]) + 0.5) * self.widths[d] for d in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def cell_coords(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        raw = np.floor((x - np.asarray(self.lo)) / self.widths).astype(np.int64)
        clipped = np.clip(raw, 0, np.asarray(self.cells) - 1)
        outside = np.any(raw != clipped, axis=1)
        return clipped, outside

    def cell_of(self, x: np.ndarray) -> np.ndarray:
        """(n, N) -> (n,) 格编号"""
        coords, _ = self.cell_coords(x)
        return np.ravel_multi_index(tuple(coords.T), self.cells).astype(np.int64)

    def out_of_box(self, x: np.ndarray) -> int:
        return int(np.sum(self.cell_coords(x)[1]))

    def sample_in_cells(self, cells: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        """格内均匀点：uniforms 形状 (n, N)，取值 [0, 1)"""
        coords = np.stack(np.unravel_index(np.asarray(cells, dtype=np.int64), self.cells), axis=1)
        return np.asarray(self.lo) + (coords + uniforms) * self.widths

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "cells": list(self.cells)}


@dataclass(frozen=True)
class ObservationQuantizer:
    """观测逐坐标均匀量化：box 内等分为 levels 段，盒外归入端段"""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    levels: Tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.levels)) or len(self.lo) == 0:
            raise ValidationError("观测量化器维数不一致")
        if any(q < 1 for q in self.levels) or any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValidationError(f"观测量化器不合法: lo={self.lo}, hi={self.hi}, levels={self.levels}")

    @classmethod
    def uniform(cls, lo, hi, levels) -> "ObservationQuantizer":
        lo = tuple(float(v) for v in np.atleast_1d(lo))
        hi = tuple(float(v) for v in np.atleast_1d(hi))
        levels = tuple(int(q) for q in np.atleast_1d(levels))
        if len(levels) == 1 and len(lo) > 1:
            levels = levels * len(lo)
        return cls(lo, hi, levels)

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def n_symbols(self) -> int:
        return int(np.prod(self.levels))

    def symbol(self, y: np.ndarray) -> np.ndarray:
        """(n, M) -> (n,) 观测符号"""
        y = np.asarray(y, dtype=float).reshape(-1, self.dim)
        width = (np.asarray(self.hi) - np.asarray(self.lo)) / np.asarray(self.levels)
        lv = np.floor((y - np.asarray(self.lo)) / width).astype(np.int64)
        lv = np.clip(lv, 0, np.asarray(self.levels) - 1)
        return np.ravel_multi_index(tuple(lv.T), self.levels).astype(np.int64)

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "levels": list(self.levels)}


def default_history_length(macro_steps: int) -> int:
    """N_h <= 8 时保留完整历史，否则保留最近 4 个样本"""
    return int(macro_steps) if macro_steps <= 8 else 4


# ----------------------------------------------------------------------------
# 离散策略
# ----------------------------------------------------------------------------

def _check_rows(rows: np.ndarray, k: int) -> None:
    if rows.ndim != 2:
        raise ValidationError(f"第 {k} 步策略表必须是二维数组")
    if np.any(rows < 0) or not np.all(np.isfinite(rows)):
        raise ValidationError(f"第 {k} 步策略表存在负值或非有限值")
    bad = np.abs(rows.sum(axis=1) - 1.0) > ROW_SUM_TOL
    if np.any(bad):
        raise ValidationError(f"第 {k} 步键 {int(np.argmax(bad))} 的概率和不为 1")


def inverse_cdf(rows: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """逐行逆 CDF 抽样：rows (n, K)，uniforms (n,) ∈ [0, 1)"""
    cdf = np.cumsum(rows, axis=1)
    # 最后一个正权重动作起 cdf 置 1，舍入误差不会落到零权重的尾部动作上
    K = rows.shape[1]
    last = K - 1 - np.argmax(rows[:, ::-1] > 0, axis=1)
    cdf[np.arange(K)[None, :] >= last[:, None]] = 1.0
    idx = np.sum(uniforms[:, None] >= cdf, axis=1)
    return np.minimum(idx, rows.shape[1] - 1).astype(np.int64)


class TablePolicy:
    """按宏步分表的策略基类"""

    information = "none"

    def __init__(self, action_grid: ActionGrid, tables: Sequence[np.ndarray]):
        self.action_grid = action_grid
        tabs = []
        for k, t in enumerate(tables):
            arr = np.array(t, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != action_grid.size:
                raise ValidationError(f"第 {k} 步策略表形状 {arr.shape} 与动作数 {action_grid.size} 不一致")
            _check_rows(arr, k)
            arr.setflags(write=False)
            tabs.append(arr)
        if not tabs:
            raise ValidationError("策略至少需要一个宏步")
        self.tables: Tuple[np.ndarray, ...] = tuple(tabs)

    @property
    def macro_steps(self) -> int:
        return len(self.tables)

    def n_keys(self, k: int) -> int:
        return int(self.tables[k].shape[0])

    def keys(self, k: int, information) -> np.ndarray:
        raise NotImplementedError

    def rows(self, k: int, keys: np.ndarray) -> np.ndarray:
        if k < 0 or k >= self.macro_steps:
            raise ValidationError(f"策略缺少第 {k} 步")
        keys = np.asarray(keys, dtype=np.int64)
        bad = (keys < 0) | (keys >= self.n_keys(k))
        if np.any(bad):
            raise ValidationError(f"策略缺少键 (k={k}, key={int(keys[np.argmax(bad)])})")
        return self.tables[k][keys]

    def sample(self, k: int, keys: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        return inverse_cdf(self.rows(k, keys), np.asarray(uniforms, dtype=float).reshape(-1))

    def with_tables(self, tables: Sequence[np.ndarray]) -> "TablePolicy":
        raise NotImplementedError

    def is_deterministic(self) -> bool:
        return all(np.all((t == 0.0) | (t == 1.0)) for t in self.tables)

    def __eq__(self, other):
        return (type(self) is type(other) and self.action_grid == other.action_grid
                and len(self.tables) == len(other.tables)
                and all(np.array_equal(a, b) for a, b in zip(self.tables, other.tables))
                and self._info_eq(other))

    def _info_eq(self, other) -> bool:
        return True

    __hash__ = None


class RelaxedControl(TablePolicy):
    """开环松弛控制：每个宏步一个动作分布"""

    information = "none"

    @classmethod
    def from_weights(cls, action_grid: ActionGrid, weights) -> "RelaxedControl":
        w = np.asarray(weights, dtype=float)
        return cls(action_grid, [w[k][None, :] for k in range(w.shape[0])])

    def keys(self, k: int, information) -> np.ndarray:
        n = 1 if information is None else int(np.asarray(information).shape[0])
        return np.zeros(n, dtype=np.int64)

    def with_tables(self, tables):
        return RelaxedControl(self.action_grid, tables)


class MarkovTablePolicy(TablePolicy):
    """Markov 表策略：(k, 状态格) -> 动作分布"""

    information = "state"

    def __init__(self, action_grid: ActionGrid, state_grid: StateGrid, tables: Sequence[np.ndarray]):
        super().__init__(action_grid, tables)
        self.state_grid = state_grid
        for k, t in enumerate(self.tables):
            if t.shape[0] != state_grid.n_cells:
                raise ValidationError(f"第 {k} 步缺少状态格（{t.shape[0]} != {state_grid.n_cells}）")

    def keys(self, k: int, information) -> np.ndarray:
        return self.state_grid.cell_of(information)

    def with_tables(self, tables):
        return MarkovTablePolicy(self.action_grid, self.state_grid, tables)

    def _info_eq(self, other) -> bool:
        return self.state_grid == other.state_grid


class WideSensePolicy(TablePolicy):
    """
    宽义容许策略：(k, 量化观测历史编码) -> 动作分布

    第 k 步可用的观测样本是 Y_h, ..., Y_{kh}（Y_0 = 0 为确定值，不参与编码），
    只保留最近 L 个。编码为以符号数为底的整数，最早的样本为最高位。
    """

    information = "history"

    def __init__(self, action_grid: ActionGrid, quantizer: ObservationQuantizer,
                 tables: Sequence[np.ndarray], history_length: Optional[int] = None):
        super().__init__(action_grid, tables)
        self.quantizer = quantizer
        self.history_length = int(history_length if history_length is not None
                                  else default_history_length(len(self.tables)))
        if self.history_length < 0:
            raise ValidationError("历史长度必须非负")
        for k, t in enumerate(self.tables):
            if t.shape[0] != self.codes_at(k):
                raise ValidationError(f"第 {k} 步历史编码数应为 {self.codes_at(k)}，实际 {t.shape[0]}")

    def samples_at(self, k: int) -> int:
        return min(k, self.history_length)

    def codes_at(self, k: int) -> int:
        return self.quantizer.n_symbols ** self.samples_at(k)

    def history_code(self, k: int, symbols: np.ndarray) -> np.ndarray:
        """
        symbols: (n, k) 为 Y_h..Y_{kh} 的符号；多于 k 列时只取前 k 列（即只能读到第 k 个样本）
        """
        symbols = np.asarray(symbols, dtype=np.int64)
        if symbols.ndim == 1:
            symbols = symbols[None, :]
        if symbols.shape[1] < k:
            raise ValidationError(f"第 {k} 步需要 {k} 个观测样本，只提供了 {symbols.shape[1]} 个")
        used = symbols[:, max(k - self.history_length, 0):k]
        code = np.zeros(symbols.shape[0], dtype=np.int64)
        for col in range(used.shape[1]):
            code = code * self.quantizer.n_symbols + used[:, col]
        return code

    def keys(self, k: int, information) -> np.ndarray:
        return self.history_code(k, information)

    def with_tables(self, tables):
        return WideSensePolicy(self.action_grid, self.quantizer, tables, self.history_length)

    def _info_eq(self, other) -> bool:
        return self.quantizer == other.quantizer and self.history_length == other.history_length


@dataclass(frozen=True)
class TeamPolicyTuple:
    """团队策略组：每个智能体只读取自己的信息"""

    policies: Tuple[TablePolicy, ...]

    def __post_init__(self):
        if len(self.policies) < 1:
            raise ValidationError("团队至少需要一个智能体")
        steps = {p.macro_steps for p in self.policies}
        if len(steps) != 1:
            raise ValidationError(f"各智能体策略的宏步数不一致: {steps}")

    @property
    def n_agents(self) -> int:
        return len(self.policies)

    @property
    def macro_steps(self) -> int:
        return self.policies[0].macro_steps

    def __getitem__(self, i: int) -> TablePolicy:
        return self.policies[i]


# ----------------------------------------------------------------------------
# 构造与变换
# ----------------------------------------------------------------------------

def point_mass_rows(n_keys: int, n_actions: int, choices) -> np.ndarray:
    rows = np.zeros((n_keys, n_actions))
    rows[np.arange(n_keys), np.broadcast_to(np.asarray(choices, dtype=np.int64), (n_keys,))] = 1.0
    return rows


def constant_policy(action_grid: ActionGrid, macro_steps: int, index: int = 0) -> RelaxedControl:
    """所有宏步都选同一个动作的开环策略"""
    return RelaxedControl(action_grid, [point_mass_rows(1, action_grid.size, index) for _ in range(macro_steps)])


def open_loop_policy(action_grid: ActionGrid, sequence: Sequence[int]) -> RelaxedControl:
    return RelaxedControl(action_grid, [point_mass_rows(1, action_grid.size, a) for a in sequence])


def uniform_policy_like(policy: TablePolicy) -> TablePolicy:
    K = policy.action_grid.size
    return policy.with_tables([np.full(t.shape, 1.0 / K) for t in policy.tables])


def perturb_policy(policy: TablePolicy, eps: float) -> TablePolicy:
    """
    每行混合为 (1 - ε)·row + ε·uniform

    Args:
        policy: 任意表策略
        eps: 0 <= ε <= 1；ε = 0 原样返回
    """
    if not 0.0 <= eps <= 1.0:
        raise ValidationError(f"扰动系数必须在 [0, 1] 内: {eps}")
    if eps == 0.0:
        return policy
    K = policy.action_grid.size
    tables = []
    for t in policy.tables:
        mixed = (1.0 - eps) * t + eps / K
        tables.append(mixed / mixed.sum(axis=1, keepdims=True))
    return policy.with_tables(tables)


def perturb_team(team: TeamPolicyTuple, eps: float) -> TeamPolicyTuple:
    return TeamPolicyTuple(tuple(perturb_policy(p, eps) for p in team.policies))


# ----------------------------------------------------------------------------
# 插值
# ----------------------------------------------------------------------------

class InterpolatedPolicy:
    """
    离散策略的连续时间分段常值插值

    宏步 k 开始时按该步信息抽样一次动作，并在 [kh, (k+1)h) 上保持。
    """

    def __init__(self, policy: TablePolicy, grid):
        if policy.macro_steps != grid.macro_steps:
            raise ValidationError(f"策略宏步数 {policy.macro_steps} 与网格 {grid.macro_steps} 不一致")
        self.policy = policy
        self.grid = grid
        self._points = policy.action_grid.points

    @property
    def information(self) -> str:
        return self.policy.information

    @property
    def action_dim(self) -> int:
        return self.policy.action_grid.dim

    def act(self, k: int, information, uniforms: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """宏步 k 的动作：返回 (动作值 (n, A), 动作编号 (n,))"""
        uniforms = np.asarray(uniforms, dtype=float).reshape(-1)
        if self.policy.information == "none":
            keys = np.zeros(uniforms.shape[0], dtype=np.int64)
        else:
            keys = self.policy.keys(k, information)
        idx = self.policy.sample(k, keys, uniforms)
        return self._points[idx], idx

    def action_at(self, t: float, path_action_indices: np.ndarray) -> np.ndarray:
        """读取一条已模拟路径在时刻 t 的动作值"""
        k = self.grid.macro_index(t)
        return self._points[int(np.asarray(path_action_indices)[k])]


def interpolate(policy: TablePolicy, grid) -> InterpolatedPolicy:
    """把离散策略提升为连续时间分段常值策略"""
    return InterpolatedPolicy(policy, grid)


def sample_action(policy: TablePolicy, information, k: int, randomness: float) -> int:
    """
    单次动作抽样

    Args:
        policy: 表策略
        information: 状态 (N,) / 观测符号历史 (k,) / None（开环）
        k: 宏步
        randomness: [0, 1) 上的均匀变量（来自路径的策略随机流）

    Returns:
        动作编号
    """
    if policy.information == "none":
        keys = np.zeros(1, dtype=np.int64)
    elif policy.information == "state":
        keys = policy.keys(k, np.asarray(information, dtype=float).reshape(1, -1))
    else:
        keys = policy.keys(k, np.asarray(information, dtype=np.int64).reshape(1, -1))
    return int(policy.sample(k, keys, np.array([float(randomness)]))[0])


def enumerate_deterministic(action_count: int, key_counts: Sequence[int]) -> int:
    """确定性表策略的总数 = Π_k K^{keys_k}"""
    total = 1
    for c in key_counts:
        total *= action_count ** int(c)
    return total


def deterministic_from_index(template: TablePolicy, index: int) -> TablePolicy:
    """
    按字典序编号构造确定性策略：所有 (k, key) 依次排列，第一个位置为最高位
    """
    K = template.action_grid.size
    slots = [template.n_keys(k) for k in range(template.macro_steps)]
    total = sum(slots)
    digits = np.zeros(total, dtype=np.int64)
    rem = int(index)
    for pos in range(total - 1, -1, -1):
        digits[pos] = rem % K
        rem //= K
    tables, offset = [], 0
    for k, s in enumerate(slots):
        tables.append(point_mass_rows(s, K, digits[offset:offset + s]))
        offset += s
    return template.with_tables(tables)


def policy_slots(template: TablePolicy) -> List[int]:
    return [template.n_keys(k) for k in range(template.macro_steps)]


def as_interpolated(policy, grid) -> InterpolatedPolicy:
    """表策略按网格插值；已插值的策略原样返回"""
    if isinstance(policy, InterpolatedPolicy):
        return policy
    if isinstance(policy, TablePolicy):
        return interpolate(policy, grid)
    raise ValidationError(f"不支持的策略类型: {type(policy).__name__}")


def uniform_relaxed(action_grid: ActionGrid, macro_steps: int) -> RelaxedControl:
    K = action_grid.size
    return RelaxedControl(action_grid, [np.full((1, K), 1.0 / K) for _ in range(macro_steps)])


def uniform_markov(action_grid: ActionGrid, state_grid: StateGrid, macro_steps: int) -> MarkovTablePolicy:
    K = action_grid.size
    return MarkovTablePolicy(action_grid, state_grid,
                             [np.full((state_grid.n_cells, K), 1.0 / K) for _ in range(macro_steps)])


def uniform_wide_sense(action_grid: ActionGrid, quantizer: ObservationQuantizer, macro_steps: int,
                       history_length: Optional[int] = None) -> WideSensePolicy:
    """各步历史编码数按截断长度确定的均匀宽义策略（也用作枚举模板）"""
    L = default_history_length(macro_steps) if history_length is None else int(history_length)
    K = action_grid.size
    tables = [np.full((quantizer.n_symbols ** min(k, L), K), 1.0 / K) for k in range(macro_steps)]
    return WideSensePolicy(action_grid, quantizer, tables, L)
