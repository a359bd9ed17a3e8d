"""
受控扩散过程的表示、假设校验、噪声计划与 Euler–Maruyama 路径积分

时间网格分两层：宏步长 h = T / N_h（控制在每个宏步内保持不变），
内步长 δ = h / M（积分步长）。所有随机数都由 (master_seed, path_index, stream, sub)
唯一确定，路径可以任意顺序、任意线程数重放。

坐标与形状约定：
- 状态批量为 (n, N)，动作批量为 (n, A)
- 漂移函数 drift(x, u) 返回 (n, N)，扩散函数 diffusion(x) 返回 (n, N, N)
- 路径状态数组为 (n, N_h * M + 1, N)
"""

import logging
import math
import threading
import weakref
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from utils.errors import IntegrationError, ValidationError
from utils.estimates import EstimateWithError, concat_samples, estimate_from_samples
from utils.parallel import map_path_chunks

logger = logging.getLogger(__name__)

# 随机流编号：同一路径的不同用途互不干扰
STREAM_STATE = 0
STREAM_POLICY = 1
STREAM_OBSERVATION = 2
STREAM_KERNEL = 3
STREAM_KERNEL_START = 4

INVERTIBILITY_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """两层时间网格：horizon T、宏步数 N_h、每宏步内步数 M"""

    horizon: float
    macro_steps: int
    inner_refine: int = 16

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValidationError(f"时间区间必须为正: {self.horizon}")
        if int(self.macro_steps) < 1:
            raise ValidationError(f"宏步数必须 >= 1: {self.macro_steps}")
        if int(self.inner_refine) < 1:
            raise ValidationError(f"内步细分数必须 >= 1: {self.inner_refine}")

    @property
    def h(self) -> float:
        return self.horizon / self.macro_steps

    @property
    def delta(self) -> float:
        return self.horizon / (self.macro_steps * self.inner_refine)

    @property
    def n_inner(self) -> int:
        return self.macro_steps * self.inner_refine

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_inner + 1)

    def macro_index(self, t: float) -> int:
        """时刻 t 所在的宏步 k（t = T 归入最后一步）"""
        k = int(math.floor(t / self.h))
        return min(max(k, 0), self.macro_steps - 1)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.macro_steps, self.inner_refine * int(factor))

    def to_dict(self) -> Dict[str, float]:
        return {"horizon": self.horizon, "macro_steps": self.macro_steps, "inner_refine": self.inner_refine}


def zero_drift(state_dim: int) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    def drift(x, u):
        return np.zeros((x.shape[0], state_dim))
    return drift


def identity_diffusion(state_dim: int, scale: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    eye = np.eye(state_dim) * scale

    def diffusion(x):
        return np.broadcast_to(eye, (x.shape[0], state_dim, state_dim))
    return diffusion


@dataclass(frozen=True)
class DiffusionModel:
    """
    受控扩散 dX = b(X, U) dt + σ(X) dB

    drift_bound 为 |b| 与 ‖σ‖ 的共同上界 C，ellipticity 为 ½σσᵀ 最小特征值的下界 Ĉ₁。
    lipschitz_radius_constants 仅用于诊断报告。
    """

    state_dim: int
    action_dim: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    drift_bound: float
    ellipticity: float
    action_box: Optional[Tuple[Tuple[float, ...], Tuple[float, ...]]] = None
    lipschitz_radius_constants: Optional[Dict[float, float]] = field(default=None, hash=False, compare=False)
    name: str = ""

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValidationError("状态维数与动作维数必须为正整数")
        if not (self.drift_bound > 0 and self.ellipticity > 0):
            raise ValidationError("界常数 C 与椭圆常数 Ĉ₁ 必须为正")

    @property
    def actions_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.action_box is None:
            return -np.ones(self.action_dim), np.ones(self.action_dim)
        return np.asarray(self.action_box[0], dtype=float), np.asarray(self.action_box[1], dtype=float)

    def drift_at(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.drift(x, u), dtype=float).reshape(x.shape[0], self.state_dim)

    def diffusion_at(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.diffusion(x), dtype=float).reshape(x.shape[0], self.state_dim, self.state_dim)

    def reference(self) -> "DiffusionModel":
        """去掉漂移的参考模型 dX' = σ(X') dB"""
        return replace(self, drift=zero_drift(self.state_dim), name=f"{self.name}/reference")


@dataclass(frozen=True)
class AssumptionReport:
    """有界性与非退化假设的抽样校验结果"""

    probe_count: int
    max_drift_norm: float
    max_diffusion_norm: float
    min_eigenvalue: float
    min_singular_value: float
    drift_bound: float
    ellipticity: float
    bound_ok: bool
    ellipticity_ok: bool
    invertible: bool

    @property
    def passed(self) -> bool:
        return self.bound_ok and self.ellipticity_ok and self.invertible

    def to_dict(self) -> Dict[str, float]:
        return {
            "probe_count": self.probe_count,
            "max_drift_norm": self.max_drift_norm,
            "max_diffusion_norm": self.max_diffusion_norm,
            "min_eigenvalue": self.min_eigenvalue,
            "min_singular_value": self.min_singular_value,
            "drift_bound": self.drift_bound,
            "ellipticity": self.ellipticity,
            "bound_ok": self.bound_ok,
            "ellipticity_ok": self.ellipticity_ok,
            "invertible": self.invertible,
            "passed": self.passed,
        }


def box_probes(lo: np.ndarray, hi: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """盒内探测点：中心、全部角点、其余均匀采样"""
    dim = lo.size
    pts = [0.5 * (lo + hi)]
    if dim <= 10:
        corners = np.array(np.meshgrid(*[[lo[i], hi[i]] for i in range(dim)], indexing="ij")).reshape(dim, -1).T
        pts.extend(list(corners))
    extra = max(count - len(pts), 0)
    if extra:
        pts.extend(list(rng.uniform(lo, hi, size=(extra, dim))))
    return np.asarray(pts[:max(count, 1)], dtype=float)


def diffusion_spectrum(sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """返回每个点的谱范数、最小奇异值、½σσᵀ 的最小特征值"""
    singular = np.linalg.svd(sigma, compute_uv=False)
    a = 0.5 * np.einsum("nij,nkj->nik", sigma, sigma)
    eig = np.linalg.eigvalsh(a)
    return singular[:, 0], singular[:, -1], eig[:, 0]


def validate_assumptions(model: DiffusionModel, probe_count: int,
                         probe_box: Tuple[Sequence[float], Sequence[float]],
                         seed: int = 0) -> AssumptionReport:
    """
    在探测点上抽样校验 |b| <= C、‖σ‖ <= C、λ_min(½σσᵀ) >= Ĉ₁ 以及 σ 可逆

    Args:
        model: 扩散模型
        probe_count: 状态探测点数（>= 1）
        probe_box: 状态探测盒 (lo, hi)
        seed: 探测点随机种子

    Returns:
        AssumptionReport，只报告不证明（局部 Lipschitz 性无法由探测点保证）
    """
    if probe_count < 1:
        raise ValidationError(f"探测点数必须 >= 1: {probe_count}")
    lo = np.asarray(probe_box[0], dtype=float).reshape(-1)
    hi = np.asarray(probe_box[1], dtype=float).reshape(-1)
    if lo.size != model.state_dim or hi.size != model.state_dim or np.any(hi < lo):
        raise ValidationError(f"探测盒不合法: lo={lo}, hi={hi}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    xs = box_probes(lo, hi, probe_count, rng)
    a_lo, a_hi = model.actions_box
    us = box_probes(a_lo, a_hi, max(probe_count, 2 ** min(model.action_dim, 10) + 1), rng)
    # 每个状态探测点配一个动作探测点，另加全部动作探测点与盒中心的组合
    pair_u = us[np.arange(xs.shape[0]) % us.shape[0]]
    x_all = np.vstack([xs, np.repeat(xs[:1], us.shape[0], axis=0)])
    u_all = np.vstack([pair_u, us])
    drift = model.drift_at(x_all, u_all)
    max_drift = float(np.max(np.linalg.norm(drift, axis=1)))
    sigma = model.diffusion_at(xs)
    norms, min_sing, min_eig = diffusion_spectrum(sigma)
    max_sigma = float(np.max(norms))
    report = AssumptionReport(
        probe_count=int(xs.shape[0]),
        max_drift_norm=max_drift,
        max_diffusion_norm=max_sigma,
        min_eigenvalue=float(np.min(min_eig)),
        min_singular_value=float(np.min(min_sing)),
        drift_bound=float(model.drift_bound),
        ellipticity=float(model.ellipticity),
        bound_ok=bool(max_drift <= model.drift_bound * (1 + 1e-12) and max_sigma <= model.drift_bound * (1 + 1e-12)),
        ellipticity_ok=bool(np.min(min_eig) >= model.ellipticity),
        invertible=bool(np.min(min_sing) > INVERTIBILITY_TOL),
    )
    logger.debug(f"[validate_assumptions] {model.name}: {report.to_dict()}")
    return report


_validation_lock = threading.RLock()
_validation_cache: Dict[int, AssumptionReport] = {}


def _forget_validation(key: int) -> None:
    with _validation_lock:
        _validation_cache.pop(key, None)


def ensure_valid(model: DiffusionModel, probe_box: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
                 probe_count: int = 64) -> AssumptionReport:
    """模拟前的假设检查，同一模型对象只校验一次；模型被回收时缓存项随之删除"""
    key = id(model)
    with _validation_lock:
        report = _validation_cache.get(key)
        if report is None:
            box = probe_box or (-3.0 * np.ones(model.state_dim), 3.0 * np.ones(model.state_dim))
            report = validate_assumptions(model, probe_count, box)
            _validation_cache[key] = report
            weakref.finalize(model, _forget_validation, key)
    if not report.passed:
        raise ValidationError(f"模型 {model.name or '<unnamed>'} 未通过假设校验: {report.to_dict()}")
    return report


# ----------------------------------------------------------------------------
# 噪声
# ----------------------------------------------------------------------------

def path_generator(master_seed: int, path_index: int, stream: int, sub: int = 0) -> np.random.Generator:
    """(master_seed, path_index, stream, sub) -> 独立的 Philox 计数器型生成器"""
    if master_seed < 0 or path_index < 0:
        raise ValidationError(f"种子与路径编号必须非负: seed={master_seed}, index={path_index}")
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(path_index), int(stream), int(sub)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class NoisePlan:
    """单条路径的布朗增量表，形状 (N_h * M, channels)"""

    master_seed: int
    path_index: int
    increments: np.ndarray = field(compare=False)
    stream: int = STREAM_STATE
    sub: int = 0

    @property
    def channels(self) -> int:
        return int(self.increments.shape[1])


def sample_brownian(grid: TimeGrid, channels: int, master_seed: int, path_index: int,
                    stream: int = STREAM_STATE, sub: int = 0) -> NoisePlan:
    """
    生成一条路径的布朗增量，每个增量 ~ N(0, δ)

    Args:
        grid: 时间网格
        channels: 驱动噪声通道数（>= 1）
        master_seed: 主种子
        path_index: 路径编号

    Returns:
        NoisePlan，对相同 (seed, index) 逐位相同
    """
    if channels < 1:
        raise ValidationError(f"通道数必须 >= 1: {channels}")
    rng = path_generator(master_seed, path_index, stream, sub)
    z = rng.standard_normal((grid.n_inner, int(channels)))
    return NoisePlan(int(master_seed), int(path_index), z * math.sqrt(grid.delta), stream, sub)


def coarsen_increments(increments: np.ndarray, factor: int) -> np.ndarray:
    """把细网格增量按 factor 个一组求和，得到同一布朗路径在粗网格上的增量"""
    factor = int(factor)
    if factor == 1:
        return increments
    steps = increments.shape[-2]
    if steps % factor:
        raise ValidationError(f"增量步数 {steps} 不能被 {factor} 整除")
    shape = increments.shape[:-2] + (steps // factor, factor, increments.shape[-1])
    return increments.reshape(shape).sum(axis=-2)


class NoiseBank:
    """
    共同噪声缓存

    缓存内容与直接生成逐位相同，只用于在多个候选策略之间复用同一批噪声以节省生成开销。
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._store: Dict[tuple, np.ndarray] = {}

    def fetch(self, key: tuple, build: Callable[[], np.ndarray]) -> np.ndarray:
        with self._lock:
            arr = self._store.get(key)
        if arr is None:
            arr = build()
            arr.setflags(write=False)
            with self._lock:
                arr = self._store.setdefault(key, arr)
        return arr

    def __len__(self):
        with self._lock:
            return len(self._store)


def draw_increments(grid: TimeGrid, channels: int, master_seed: int, start: int, stop: int,
                    stream: int = STREAM_STATE, sub: int = 0,
                    bank: Optional[NoiseBank] = None) -> np.ndarray:
    """路径区间 [start, stop) 的布朗增量，形状 (n, N_h * M, channels)"""

    def build():
        out = np.empty((stop - start, grid.n_inner, int(channels)))
        for i, idx in enumerate(range(start, stop)):
            out[i] = sample_brownian(grid, channels, master_seed, idx, stream, sub).increments
        return out

    if bank is None:
        return build()
    key = ("incr", grid.horizon, grid.macro_steps, grid.inner_refine, int(channels), int(master_seed),
           start, stop, stream, sub)
    return bank.fetch(key, build)


def draw_uniforms(grid: TimeGrid, master_seed: int, start: int, stop: int, sub: int = 0,
                  bank: Optional[NoiseBank] = None) -> np.ndarray:
    """策略随机化专用的均匀变量，形状 (n, N_h)，与布朗流互相独立"""

    def build():
        out = np.empty((stop - start, grid.macro_steps))
        for i, idx in enumerate(range(start, stop)):
            out[i] = path_generator(master_seed, idx, STREAM_POLICY, sub).random(grid.macro_steps)
        return out

    if bank is None:
        return build()
    key = ("unif", grid.macro_steps, int(master_seed), start, stop, sub)
    return bank.fetch(key, build)


# ----------------------------------------------------------------------------
# 路径
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplePath:
    """单条样本路径：全部内网格点上的状态、每个宏步的动作"""

    states: np.ndarray
    actions: np.ndarray
    action_indices: np.ndarray
    noise: NoisePlan
    grid: TimeGrid

    def __post_init__(self):
        if self.states.shape[0] != self.grid.n_inner + 1:
            raise ValidationError(f"状态长度 {self.states.shape[0]} 与网格 {self.grid.n_inner + 1} 不一致")

    @property
    def inner_actions(self) -> np.ndarray:
        return np.repeat(self.actions, self.grid.inner_refine, axis=0)


@dataclass(frozen=True)
class PathBatch:
    """一批路径（按路径编号排列）"""

    states: np.ndarray
    actions: np.ndarray
    action_indices: np.ndarray
    increments: np.ndarray
    path_indices: np.ndarray
    grid: TimeGrid

    @property
    def n(self) -> int:
        return int(self.states.shape[0])

    @property
    def inner_actions(self) -> np.ndarray:
        """(n, N_h * M, A)：每个内步对应所在宏步的动作"""
        return np.repeat(self.actions, self.grid.inner_refine, axis=1)

    def path(self, i: int, master_seed: int = 0) -> SamplePath:
        plan = NoisePlan(master_seed, int(self.path_indices[i]), self.increments[i])
        return SamplePath(self.states[i], self.actions[i], self.action_indices[i], plan, self.grid)


DriftFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]
DiffusionFn = Callable[[np.ndarray, int], np.ndarray]
DecideFn = Callable[[int, np.ndarray], Tuple[np.ndarray, np.ndarray]]


def integrate_controlled(grid: TimeGrid, x0: np.ndarray, increments: np.ndarray,
                         drift_fn: DriftFn, diffusion_fn: DiffusionFn, decide: DecideFn,
                         path_indices: Optional[np.ndarray] = None,
                         on_inner_step: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None
                         ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    分段常值控制下的 Euler–Maruyama 递推

    X_{j+1} = X_j + b(X_j, u_k) δ + σ(X_j) ΔB_j，其中 u_k 在宏步 k 开始时决定一次并保持。

    Args:
        grid: 时间网格
        x0: 初始状态 (n, N)
        increments: 布朗增量 (n, N_h * M, d)
        drift_fn: (x, u, j) -> (n, N)
        diffusion_fn: (x, j) -> (n, N, d)
        decide: (k, x_kh) -> (动作值 (n, A), 动作编号 (n,) 或 (n, agents))
        path_indices: 用于报错的路径编号
        on_inner_step: 每个内步后的回调 (j + 1, x_prev, x_new)

    Returns:
        (states (n, S + 1, N), actions (n, N_h, A), action_indices (n, N_h, ...))
    """
    n, steps, _ = increments.shape
    if steps != grid.n_inner:
        raise ValidationError(f"增量步数 {steps} 与网格内步数 {grid.n_inner} 不一致")
    x = np.array(x0, dtype=float, copy=True)
    states = np.empty((n, steps + 1, x.shape[1]))
    states[:, 0] = x
    actions, indices = [], []
    M, dt = grid.inner_refine, grid.delta
    for k in range(grid.macro_steps):
        u_vals, u_idx = decide(k, x)
        actions.append(np.asarray(u_vals, dtype=float))
        indices.append(np.asarray(u_idx))
        for m in range(M):
            j = k * M + m
            b = drift_fn(x, actions[-1], j)
            s = diffusion_fn(x, j)
            x_new = x + b * dt + np.einsum("nij,nj->ni", s, increments[:, j, :])
            bad = ~np.all(np.isfinite(x_new), axis=1)
            if np.any(bad):
                first = int(np.argmax(bad))
                idx = int(path_indices[first]) if path_indices is not None else first
                raise IntegrationError(f"第 {j + 1} 个内步出现非有限状态（路径 {idx}）", step=j + 1, path_index=idx)
            if on_inner_step is not None:
                on_inner_step(j + 1, x, x_new)
            x = x_new
            states[:, j + 1] = x
    return states, np.stack(actions, axis=1), np.stack(indices, axis=1)


def broadcast_x0(x0, n: int, dim: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        x0 = np.broadcast_to(x0.reshape(1, -1), (n, dim))
    if x0.shape != (n, dim):
        raise ValidationError(f"初始状态形状 {x0.shape} 与 ({n}, {dim}) 不一致")
    return x0


def simulate_batch(model: DiffusionModel, policy, grid: TimeGrid, increments: np.ndarray,
                   uniforms: np.ndarray, x0, path_indices: Optional[np.ndarray] = None,
                   reference: bool = False) -> PathBatch:
    """
    批量模拟受控路径

    Args:
        model: 扩散模型
        policy: InterpolatedPolicy（信息模式必须是无信息或状态信息）
        grid: 时间网格
        increments: (n, S, N) 布朗增量
        uniforms: (n, N_h) 策略随机化变量
        x0: 初始状态
        reference: True 时按参考动力学 dX' = σ(X') dB 积分（动作仍按策略决定，用于 Girsanov 重加权）
    """
    n = increments.shape[0]
    x0 = broadcast_x0(x0, n, model.state_dim)
    if path_indices is None:
        path_indices = np.arange(n)

    def drift_fn(x, u, j):
        if reference:
            return np.zeros_like(x)
        return model.drift_at(x, u)

    def diffusion_fn(x, j):
        return model.diffusion_at(x)

    def decide(k, x):
        return policy.act(k, x, uniforms[:, k])

    states, actions, idx = integrate_controlled(grid, x0, increments, drift_fn, diffusion_fn, decide, path_indices)
    return PathBatch(states, actions, idx, increments, np.asarray(path_indices), grid)


def simulate_range(model: DiffusionModel, policy, grid: TimeGrid, master_seed: int, start: int, stop: int,
                   x0, reference: bool = False, bank: Optional[NoiseBank] = None, sub: int = 0) -> PathBatch:
    """按路径编号区间生成噪声并模拟"""
    incr = draw_increments(grid, model.state_dim, master_seed, start, stop, STREAM_STATE, sub, bank)
    unif = draw_uniforms(grid, master_seed, start, stop, sub, bank)
    return simulate_batch(model, policy, grid, incr, unif, x0, np.arange(start, stop), reference)


def simulate_coarsened_range(model: DiffusionModel, policy, grid: TimeGrid, noise_grid: TimeGrid,
                             master_seed: int, start: int, stop: int, x0, reference: bool = False,
                             bank: Optional[NoiseBank] = None) -> PathBatch:
    """
    在细网格 noise_grid 的布朗路径上按较粗的 grid 模拟

    两个网格的区间与宏步数相同，noise_grid 的内步数是 grid 的整数倍；
    粗网格增量由细网格增量按组求和得到，策略随机化变量两者共用。
    """
    if (noise_grid.horizon != grid.horizon or noise_grid.macro_steps != grid.macro_steps
            or noise_grid.inner_refine % grid.inner_refine):
        raise ValidationError(f"噪声网格 {noise_grid.to_dict()} 不是网格 {grid.to_dict()} 的细化")
    fine = draw_increments(noise_grid, model.state_dim, master_seed, start, stop, STREAM_STATE, 0, bank)
    incr = coarsen_increments(fine, noise_grid.inner_refine // grid.inner_refine)
    unif = draw_uniforms(grid, master_seed, start, stop, 0, bank)
    return simulate_batch(model, policy, grid, incr, unif, x0, np.arange(start, stop), reference)


def simulate_path(model: DiffusionModel, policy, grid: TimeGrid, noise: NoisePlan, x0,
                  uniforms: Optional[np.ndarray] = None, validate: bool = True) -> SamplePath:
    """
    单条受控路径

    Args:
        model: 扩散模型
        policy: InterpolatedPolicy
        grid: 时间网格
        noise: 布朗噪声计划
        x0: 初始状态
        uniforms: (N_h,) 策略随机化变量；缺省时由 (seed, path_index) 的策略流生成
        validate: 是否先做假设校验（测试夹具可关闭）

    Returns:
        SamplePath
    """
    if validate:
        ensure_valid(model)
    if noise.increments.shape != (grid.n_inner, model.state_dim):
        raise ValidationError(f"噪声形状 {noise.increments.shape} 与网格/模型不一致")
    if uniforms is None:
        uniforms = path_generator(noise.master_seed, noise.path_index, STREAM_POLICY, noise.sub).random(grid.macro_steps)
    batch = simulate_batch(model, policy, grid, noise.increments[None], np.asarray(uniforms, dtype=float)[None],
                           x0, np.array([noise.path_index]))
    return SamplePath(batch.states[0], batch.actions[0], batch.action_indices[0], noise, grid)


def simulate_paths(model: DiffusionModel, policy, grid: TimeGrid, n_paths: int, master_seed: int, x0,
                   reference: bool = False, bank: Optional[NoiseBank] = None) -> PathBatch:
    """路径 0..n_paths-1 的批量模拟（分块并行，按编号拼接）"""
    chunks = map_path_chunks(
        lambda a, b: simulate_range(model, policy, grid, master_seed, a, b, x0, reference, bank), n_paths)
    return PathBatch(
        np.concatenate([c.states for c in chunks]),
        np.concatenate([c.actions for c in chunks]),
        np.concatenate([c.action_indices for c in chunks]),
        np.concatenate([c.increments for c in chunks]),
        np.concatenate([c.path_indices for c in chunks]),
        grid,
    )


# ----------------------------------------------------------------------------
# 诊断
# ----------------------------------------------------------------------------

def generator_action(model: DiffusionModel, x: np.ndarray, u: np.ndarray,
                     grad_f: Callable, hess_f: Callable) -> np.ndarray:
    """受控生成元 𝒜^u f = b·∇f + trace(a ∇²f)，a = ½σσᵀ"""
    b = model.drift_at(x, u)
    sigma = model.diffusion_at(x)
    a = 0.5 * np.einsum("nij,nkj->nik", sigma, sigma)
    g = np.asarray(grad_f(x), dtype=float).reshape(x.shape)
    H = np.asarray(hess_f(x), dtype=float).reshape(a.shape)
    return np.sum(b * g, axis=1) + np.einsum("nij,nji->n", a, H)


def dynkin_residual(model: DiffusionModel, policy, f: Callable, grad_f: Callable, hess_f: Callable,
                    grid: TimeGrid, n_paths: int, x0, master_seed: int = 0,
                    noise_grid: Optional[TimeGrid] = None, bank: Optional[NoiseBank] = None) -> EstimateWithError:
    """
    Dynkin 残差 E[f(X_T) - f(X_0) - ∫ 𝒜^{u_s} f(X_s) ds]

    积分用内网格左端点求和；正确的模拟器给出 0（差一个 O(δ) 偏差）。
    给出 noise_grid 时在其布朗路径上粗化模拟，不同 δ 的残差共用同一组路径。
    """
    M, dt = grid.inner_refine, grid.delta

    def chunk(a, b):
        if noise_grid is None:
            batch = simulate_range(model, policy, grid, master_seed, a, b, x0, bank=bank)
        else:
            batch = simulate_coarsened_range(model, policy, grid, noise_grid, master_seed, a, b, x0, bank=bank)
        n, S = batch.n, grid.n_inner
        x_left = batch.states[:, :-1].reshape(n * S, -1)
        u_left = batch.inner_actions.reshape(n * S, -1)
        gen = generator_action(model, x_left, u_left, grad_f, hess_f).reshape(n, S)
        f_T = np.asarray(f(batch.states[:, -1]), dtype=float).reshape(n)
        f_0 = np.asarray(f(batch.states[:, 0]), dtype=float).reshape(n)
        return f_T - f_0 - np.sum(gen, axis=1) * dt

    samples = concat_samples(map_path_chunks(chunk, n_paths))
    est = estimate_from_samples(samples, "dynkin_residual")
    logger.debug(f"[dynkin_residual] M={M} 残差 {est.mean:.3e} ± {est.standard_error:.3e}")
    return est


def moment_cap(model: DiffusionModel, grid: TimeGrid, x0) -> float:
    """|x0|² + K'(T)，K'(T) 只依赖 C、N、T 与 |x0|"""
    C, N, T = model.drift_bound, model.state_dim, grid.horizon
    r0 = float(np.linalg.norm(np.asarray(x0, dtype=float)))
    k_T = (2 * C * r0 * T + C * C * T * T + (4.0 / 3.0) * math.sqrt(N) * C * C * T ** 1.5
           + N * C * C * T + C * C * T * grid.delta)
    return r0 * r0 + k_T


def moment_bound_check(model: DiffusionModel, policy, grid: TimeGrid, n_paths: int, x0,
                       master_seed: int = 0, band: float = 3.0) -> Dict[str, object]:
    """
    二阶矩界检查：内网格上 max_t E|X_t|² 与 |x0|² + K'(T) 比较

    Returns:
        dict: {"estimate": 取最大值时刻的估计, "cap": 上界, "argmax_step": 内步编号, "passed": bool}
    """
    def chunk(a, b):
        batch = simulate_range(model, policy, grid, master_seed, a, b, x0)
        return np.sum(batch.states ** 2, axis=2)

    sq = np.concatenate(map_path_chunks(chunk, n_paths), axis=0)
    means = sq.mean(axis=0)
    j = int(np.argmax(means))
    est = estimate_from_samples(sq[:, j], "max_second_moment")
    cap = moment_cap(model, grid, x0)
    return {"estimate": est, "cap": cap, "argmax_step": j, "passed": bool(est.mean <= cap + band * est.standard_error)}
