"""
实验编排：解析算例、按实验类型分派、汇总结果记录、重放

每种实验类型对应一个 _run_<kind> 方法。实验内所有候选策略共用一个 NoiseBank（共同噪声），
所有用到的默认值都经 ExperimentContext 写回记录的 inputs["effective"]。
"""

import logging
import math
import os
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from algorithms.dt_solver import (
    PomdpProblem, SolverDefaults, SolverGrids, TeamProblem, backward_induction, build_team_mdp,
    enumerate_open_loop, enumerate_wide_sense, product_state_grid, random_team_challengers, solve_discrete,
    team_brute_force, team_tuple_from_index,
)
from algorithms.girsanov import (
    log_coupling_weights, log_drift_weights, log_observation_weights, log_team_observation_weights,
    martingale_mean, second_moment_bound_check, weight_l1_distance,
)
from algorithms.info_structures import (
    independence_audit, simulate_pomdp_range, simulate_team_decoupled_range, simulate_team_local_meas_range,
    validate_coupled_team, validate_partially_observed, validate_team_local,
)
from algorithms.policy import (
    as_interpolated, deterministic_from_index, enumerate_deterministic, perturb_policy, policy_slots,
)
from algorithms.sde_core import (
    NoiseBank, TimeGrid, dynkin_residual, moment_bound_check, simulate_paths, simulate_range, validate_assumptions,
)
from inference.cost_eval import (
    check_cost, mc_cost_direct, mc_cost_pomdp, mc_cost_pomdp_direct, mc_cost_reweighted, mc_cost_team_coupled,
    mc_cost_team_coupled_direct, mc_cost_team_local_meas, mc_cost_team_local_meas_direct,
)
from io_ops.config_io import EXPERIMENT_KINDS, ConfigFormat, ExperimentConfig, config_from_dict
from io_ops.policy_io import save_policy
from io_ops.record_io import TOOLKIT_VERSION, ResultRecord, load_record
from models.fixtures import Fixture
from services.fixture_registry import FixtureRegistry, get_fixture_registry
from services.result_workspace import ResultWorkspace
from services.settings import HarnessDefaults, SettingsManager, get_settings_manager
from utils.errors import ExperimentError, ValidationError
from utils.estimates import (
    EstimateWithError, agree, combined_se, concat_samples, estimate_from_samples, non_increasing, not_worse_than,
)
from utils.parallel import get_chunk_size, get_worker_count, map_path_chunks, set_chunk_size

logger = logging.getLogger(__name__)


def _square(x):
    return np.sum(x * x, axis=1)


def _square_grad(x):
    return 2.0 * x


def _square_hess(x):
    return np.broadcast_to(2.0 * np.eye(x.shape[1]), (x.shape[0], x.shape[1], x.shape[1]))


def _tanh_sum(x):
    return np.sum(np.tanh(x), axis=1)


def _tanh_grad(x):
    return 1.0 - np.tanh(x) ** 2


def _tanh_hess(x):
    t = np.tanh(x)
    return np.einsum("ni,ij->nij", -2.0 * t * (1.0 - t * t), np.eye(x.shape[1]))


def _sin_sum(x):
    return np.sum(np.sin(x), axis=1)


def _sin_grad(x):
    return np.cos(x)


def _sin_hess(x):
    return np.einsum("ni,ij->nij", -np.sin(x), np.eye(x.shape[1]))


BUMP_RADIUS = 8.0


def _bump(x: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ψ(s) = exp(1 - 1/(1 - s))，s = |x|²/R²，返回 ψ、ψ'、ψ''；s >= 1 处全为 0"""
    s = np.sum(x * x, axis=1) / radius ** 2
    inside = s < 1.0
    q = 1.0 / (1.0 - np.where(inside, s, 0.0))
    psi = np.where(inside, np.exp(1.0 - q), 0.0)
    return psi, -q * q * psi, psi * (q ** 4 - 2.0 * q ** 3)


def compact_test_function(f: Callable, grad_f: Callable, hess_f: Callable,
                          radius: float = BUMP_RADIUS) -> Tuple[Callable, Callable, Callable]:
    """
    f·ψ(|x|²/R²)：乘以光滑紧支撑鼓包后的测试函数及其梯度、Hessian

    Returns:
        (f̃, ∇f̃, ∇²f̃)，在半径 R 的球外恒为 0
    """
    def value(x):
        psi, _, _ = _bump(x, radius)
        return np.asarray(f(x), dtype=float) * psi

    def grad(x):
        psi, d1, _ = _bump(x, radius)
        ds = 2.0 * x / radius ** 2
        g = np.asarray(grad_f(x), dtype=float).reshape(x.shape)
        return psi[:, None] * g + (np.asarray(f(x), dtype=float) * d1)[:, None] * ds

    def hess(x):
        psi, d1, d2 = _bump(x, radius)
        ds = 2.0 * x / radius ** 2
        fx = np.asarray(f(x), dtype=float)
        g = np.asarray(grad_f(x), dtype=float).reshape(x.shape)
        cross = np.einsum("ni,nj->nij", g, ds)
        eye = np.eye(x.shape[1])
        return (psi[:, None, None] * np.asarray(hess_f(x), dtype=float)
                + d1[:, None, None] * (cross + cross.transpose(0, 2, 1))
                + (fx * d2)[:, None, None] * np.einsum("ni,nj->nij", ds, ds)
                + (fx * d1)[:, None, None] * (2.0 / radius ** 2) * eye)

    return value, grad, hess


# Dynkin 残差的测试函数: 名称 -> (f, ∇f, ∇²f)，均为紧支撑
DYNKIN_TEST_FUNCTIONS: Dict[str, Tuple[Callable, Callable, Callable]] = {
    "square": compact_test_function(_square, _square_grad, _square_hess),
    "tanh": compact_test_function(_tanh_sum, _tanh_grad, _tanh_hess),
    "sin": compact_test_function(_sin_sum, _sin_grad, _sin_hess),
}


HOLDOUT_TAG = 0x686F6C64


def _holdout_seed(seed: int) -> int:
    """与主种子派生的噪声互不重叠的复评种子"""
    return int(np.random.SeedSequence([int(seed), HOLDOUT_TAG]).generate_state(1)[0])


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _estimate_row(name: str, est: EstimateWithError, **extra) -> Dict[str, Any]:
    row = {"name": name, "mean": float(est.mean), "standard_error": float(est.standard_error), "n": int(est.n)}
    row.update({k: _plain(v) for k, v in extra.items()})
    return row


@dataclass
class ExperimentContext:
    """单次实验的输入视图；读取的每个默认值都回显到记录"""

    config: ExperimentConfig
    fixture: Fixture
    tolerances: Dict[str, float]
    record: ResultRecord
    registry: FixtureRegistry

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def band(self) -> float:
        return float(self.tolerances["se_band"])

    @property
    def grid(self) -> TimeGrid:
        return self.fixture.time_grid

    @property
    def x0(self) -> np.ndarray:
        return np.asarray(self.fixture.x0, dtype=float)

    def _echo(self, key: str, value):
        self.record.inputs["effective"][key] = _plain(value)
        return value

    def samples(self, key: str, default: int) -> int:
        return self._echo(key, self.config.sample_count(key, default))

    def option(self, key: str, default):
        return self._echo(key, self.config.options.get(key, default))

    def require(self, *structures: str) -> None:
        if self.fixture.structure not in structures:
            raise ValidationError(f"实验 {self.config.kind} 不适用于信息结构 {self.fixture.structure}"
                                  f"（支持: {', '.join(structures)}）")


class ExperimentRunner:
    """实验管理器，负责把配置分派到具体实验并生成结果记录"""

    def __init__(self, registry: Optional[FixtureRegistry] = None, settings: Optional[SettingsManager] = None):
        self.registry = registry or get_fixture_registry()
        self.settings = settings or get_settings_manager()
        self._handlers: Dict[str, Callable[[ExperimentContext], None]] = {
            kind: getattr(self, f"_run_{kind}") for kind in EXPERIMENT_KINDS
        }

    def effective_tolerances(self, config: ExperimentConfig) -> Dict[str, float]:
        """内置默认 < 持久化设置 < 配置文件"""
        tolerances = dict(ConfigFormat.TOLERANCE_DEFAULTS)
        tolerances["se_band"] = self.settings.se_band()
        tolerances.update(config.tolerances)
        return tolerances

    def run(self, config: ExperimentConfig) -> ResultRecord:
        """
        执行一次实验

        Raises:
            ExperimentError: 实验类型未知、算例无法解析或任何模块错误（附带实验类型与算例名）
        """
        started = time.perf_counter()
        handler = self._handlers.get(config.kind)
        if handler is None:
            raise ExperimentError(f"未知的实验类型: {config.kind}", config.kind, config.fixture)
        try:
            fixture = self.registry.resolve(config.fixture, config.fixture_params)
        except ValidationError as e:
            logger.error(f"算例解析失败 {config.fixture}: {e}")
            raise ExperimentError(f"算例解析失败: {e}", config.kind, config.fixture) from e

        set_chunk_size(config.sampling.get("chunk_size", self.settings.chunk_size()))
        tolerances = self.effective_tolerances(config)
        record = ResultRecord(
            kind=config.kind,
            fixture=fixture.name,
            seed=config.seed,
            inputs={
                "config": _plain(config.to_dict()),
                "fixture": _plain(fixture.to_dict()),
                "tolerances": dict(tolerances),
                "effective": {"workers": get_worker_count(), "chunk_size": get_chunk_size()},
            },
        )
        ctx = ExperimentContext(config, fixture, tolerances, record, self.registry)
        logger.info(f"开始实验 {config.kind}，算例 {fixture.name}，种子 {config.seed}")
        try:
            handler(ctx)
        except ExperimentError:
            raise
        except Exception as e:
            logger.error(f"实验 {config.kind} 在算例 {fixture.name} 上失败: {e}")
            raise ExperimentError(f"{type(e).__name__}: {e}", config.kind, fixture.name) from e
        record.finalize(time.perf_counter() - started)
        failed = [name for name, ok in record.flags.items() if not ok]
        if failed:
            logger.warning(f"实验 {config.kind} 未通过的判定: {failed}")
        logger.info(f"实验 {config.kind} 完成，用时 {record.duration_seconds:.2f}s，"
                    f"{'通过' if record.passed else '未通过'}")
        return record

    def replay(self, path: str, seed: Optional[int] = None) -> ResultRecord:
        """
        按记录中回显的输入重新运行并逐位比较估计、表格与判定

        Args:
            path: 原记录（JSON）
            seed: 可选的替代种子；与原种子不同时只做对照运行，不做逐位比较
        """
        original = load_record(path)
        config = config_from_dict(original.inputs["config"])
        comparison = seed is not None and int(seed) != config.seed
        if comparison:
            config = replace(config, seed=int(seed))
        record = self.run(config)
        record.inputs["replay"] = {"source": os.path.abspath(path), "comparison": bool(comparison)}
        if original.version != TOOLKIT_VERSION:
            record.warn(f"记录版本 {original.version} 与当前版本 {TOOLKIT_VERSION} 不一致，仍尝试重放")
        if comparison:
            record.warn(f"种子 {seed} 与原记录 {original.seed} 不同，本次为对照运行而非重放")
        else:
            identical = _plain(record.stochastic_outputs()) == original.stochastic_outputs()
            if not identical:
                logger.error(f"重放结果与原记录不一致: {path}")
            record.add_flag("replay_identical", identical)
        return record.finalize(record.duration_seconds)

    # ------------------------------------------------------------------
    # 公共构件
    # ------------------------------------------------------------------

    @staticmethod
    def _state_dim(fx: Fixture) -> int:
        if fx.structure == "team_coupled":
            return sum(a.state_dim for a in fx.model.agents)
        return fx.model.state_dim

    @staticmethod
    def _action_box(fx: Fixture):
        lo = tuple(v for ag in fx.action_grids for v in ag.box[0])
        hi = tuple(v for ag in fx.action_grids for v in ag.box[1])
        return lo, hi

    @staticmethod
    def _log_weights(fx: Fixture, policy, n: int, seed: int, bank: NoiseBank) -> np.ndarray:
        """参考测度路径上各信息结构对应的 log 权重（逐路径）"""
        grid, x0, model = fx.time_grid, np.asarray(fx.x0, dtype=float), fx.model
        if fx.structure == "full":
            reference = model.reference()
            pol = as_interpolated(policy, grid)

            def chunk(a, b):
                return log_drift_weights(simulate_range(reference, pol, grid, seed, a, b, x0, bank=bank), model)
        elif fx.structure == "pomdp":
            def chunk(a, b):
                batch = simulate_pomdp_range(model, policy, grid, seed, a, b, x0, bank)
                return log_observation_weights(batch.states, batch.observation_increments, model.observation_at, grid)
        elif fx.structure == "team_local":
            observations = [(lambda i: (lambda x: model.observation_at(i, x)))(i) for i in range(model.n_agents)]

            def chunk(a, b):
                batch = simulate_team_local_meas_range(model, policy, grid, seed, a, b, x0, bank)
                return log_team_observation_weights(batch, observations).sum(axis=1)
        else:
            def chunk(a, b):
                batch = simulate_team_decoupled_range(model, policy, grid, seed, a, b, x0, bank)
                return log_coupling_weights(batch, model).sum(axis=1)
        return concat_samples(map_path_chunks(chunk, n))

    @staticmethod
    def _integrand_cap(fx: Fixture) -> float:
        """非全观测结构下 sup |θ|²：观测权重为 Σ|gⁱ|² 上界，耦合权重为 Σ (bⁱ₀ 上界)² / (2Ĉ₁ⁱ)"""
        model = fx.model
        if fx.structure == "pomdp":
            return float(model.observation_bound ** 2)
        if fx.structure == "team_local":
            return float(sum(b * b for b in model.observation_bounds))
        return float(sum(model.coupling_bound ** 2 / (2.0 * a.ellipticity) for a in model.agents))

    @staticmethod
    def _estimator_pair(fx: Fixture, policy, n: int, seed: int, bank: NoiseBank, self_normalize: bool,
                        freeze: bool) -> Tuple[EstimateWithError, EstimateWithError]:
        """(直接估计, 测度变换估计)，共同噪声"""
        model, cost, grid, x0 = fx.model, fx.cost, fx.time_grid, np.asarray(fx.x0, dtype=float)
        if fx.structure == "full":
            return (mc_cost_direct(model, policy, cost, grid, n, x0, seed, bank),
                    mc_cost_reweighted(model, policy, cost, grid, n, x0, seed, bank, self_normalize))
        if fx.structure == "pomdp":
            return (mc_cost_pomdp_direct(model, policy, cost, grid, n, x0, seed, bank, freeze),
                    mc_cost_pomdp(model, policy, cost, grid, n, x0, seed, bank, self_normalize, freeze))
        if fx.structure == "team_local":
            return (mc_cost_team_local_meas_direct(model, policy, cost, grid, n, x0, seed, bank, freeze),
                    mc_cost_team_local_meas(model, policy, cost, grid, n, x0, seed, bank, self_normalize, freeze))
        return (mc_cost_team_coupled_direct(model, policy, cost, grid, n, x0, seed, bank),
                mc_cost_team_coupled(model, policy, cost, grid, n, x0, seed, bank, self_normalize))

    # ------------------------------------------------------------------
    # 实验类型
    # ------------------------------------------------------------------

    def _run_validate(self, ctx: ExperimentContext) -> None:
        """模型假设（有界、非退化、可逆）与代价上界的抽样校验；全观测算例另做二阶矩界检查"""
        fx, record = ctx.fixture, ctx.record
        probes = int(ctx.option("probes", 256))
        radius = float(ctx.option("probe_radius", 3.0))
        dim = fx.model.state_dim if fx.structure != "team_coupled" else fx.model.agents[0].state_dim
        box = ([-radius] * dim, [radius] * dim)

        if fx.structure == "full":
            report = validate_assumptions(fx.model, probes, box, ctx.seed)
            record.table.append(dict(component=fx.model.name, **report.to_dict()))
            record.add_flag("assumptions", report.passed)
            n = ctx.samples("n_paths", fx.n_paths)
            moment = moment_bound_check(fx.model, as_interpolated(fx.reference_policies()[1], ctx.grid), ctx.grid,
                                        n, ctx.x0, ctx.seed, ctx.band)
            record.add_estimate("max_second_moment", moment["estimate"])
            record.table.append({"component": "moment_bound", "cap": float(moment["cap"]),
                                 "argmax_step": int(moment["argmax_step"]), "passed": bool(moment["passed"])})
            record.add_flag("moment_bound", moment["passed"])
        elif fx.structure == "pomdp":
            obs_radius = float(ctx.option("observation_radius", 3.0))
            report, g_ok = validate_partially_observed(fx.model, probes, box,
                                                       ([-obs_radius] * fx.model.obs_dim, [obs_radius] * fx.model.obs_dim),
                                                       ctx.seed)
            record.table.append(dict(component=fx.model.name, **report.to_dict()))
            record.add_flag("assumptions", report.passed)
            record.add_flag("observation_bound", g_ok)
        elif fx.structure == "team_local":
            obs_radius = float(ctx.option("observation_radius", 3.0))
            report, g_ok = validate_team_local(fx.model, probes, box, ([-obs_radius], [obs_radius]), ctx.seed)
            record.table.append(dict(component=fx.model.name, **report.to_dict()))
            record.add_flag("assumptions", report.passed)
            for i, ok in enumerate(g_ok):
                record.add_flag(f"observation_bound/agent{i}", ok)
        else:
            reports, coupling_ok = validate_coupled_team(fx.model, probes, box, ctx.seed)
            for i, report in enumerate(reports):
                record.table.append(dict(component=fx.model.agents[i].name, **report.to_dict()))
                record.add_flag(f"assumptions/agent{i}", report.passed)
            record.add_flag("coupling_bound", coupling_ok)

        cost_report = check_cost(fx.cost, self._state_dim(fx), self._action_box(fx), probes, radius, ctx.seed)
        record.table.append(dict(component=fx.cost.name, **cost_report))
        record.add_flag("cost_bounds", cost_report["passed"])

    def _run_martingale(self, ctx: ExperimentContext) -> None:
        """参考路径上似然权重的均值应为 1"""
        fx, record = ctx.fixture, ctx.record
        n = ctx.samples("n_paths", fx.n_paths)
        bank = NoiseBank()
        for j, policy in enumerate(fx.reference_policies()):
            if fx.structure == "full":
                est = martingale_mean(fx.model, policy, ctx.grid, n, ctx.x0, ctx.seed, bank)
            else:
                est = estimate_from_samples(np.exp(self._log_weights(fx, policy, n, ctx.seed, bank)), "mean_weight")
            name = f"mean_weight/p{j}"
            record.add_estimate(name, est)
            record.table.append(_estimate_row(name, est, deviation=est.mean - 1.0))
            record.add_flag(f"normalized/p{j}", est.within(1.0, ctx.band))

    def _run_second_moment(self, ctx: ExperimentContext) -> None:
        """E[Z_T²] <= e^{MT}；常值漂移算例另检查等式 E[Z_T²] = e^{μ²T}"""
        fx, record = ctx.fixture, ctx.record
        n = ctx.samples("n_paths", fx.n_paths)
        bank = NoiseBank()
        exact = None
        if fx.structure == "full" and "mu" in fx.params:
            exact = math.exp(float(fx.params["mu"]) ** 2 * ctx.grid.horizon)
        for j, policy in enumerate(fx.reference_policies()):
            name = f"second_moment/p{j}"
            if fx.structure == "full":
                check = second_moment_bound_check(fx.model, policy, ctx.grid, n, ctx.x0, ctx.seed, ctx.band, bank)
                est, cap, m_sup = check["estimate"], float(check["cap"]), float(check["M"])
            else:
                logw = self._log_weights(fx, policy, n, ctx.seed, bank)
                est = estimate_from_samples(np.exp(2.0 * logw), "second_moment")
                m_sup = self._integrand_cap(fx)
                cap = math.exp(m_sup * ctx.grid.horizon)
            record.add_estimate(name, est)
            record.table.append(_estimate_row(name, est, cap=cap, M=m_sup))
            record.add_flag(f"cap/p{j}", est.mean <= cap + ctx.band * est.standard_error)
            if exact is not None:
                record.add_flag(f"exact/p{j}", est.within(exact, ctx.band))

    def _run_l1_continuity(self, ctx: ExperimentContext) -> None:
        """沿扰动序列 ε 配对估计 E|Z^ε - Z⁰|：为正、误差带内单调不增，ε = 0 时恰为 0"""
        ctx.require("full")
        fx, record = ctx.fixture, ctx.record
        n = ctx.samples("n_paths", fx.n_paths)
        epsilons = sorted((float(e) for e in ctx.option("epsilons", list(HarnessDefaults.EPSILON_SCHEDULE))),
                          reverse=True)
        base = fx.reference_policies()[2]
        bank = NoiseBank()
        means, errors = [], []
        for eps in epsilons:
            est = weight_l1_distance(perturb_policy(base, eps), base, fx.model, ctx.grid, n, ctx.x0, ctx.seed, bank)
            record.add_estimate(f"l1/eps={eps:g}", est)
            record.table.append(_estimate_row(f"l1/eps={eps:g}", est, epsilon=eps))
            means.append(est.mean)
            errors.append(est.standard_error)
        zero = weight_l1_distance(base, base, fx.model, ctx.grid, n, ctx.x0, ctx.seed, bank)
        record.add_estimate("l1/eps=0", zero)
        record.table.append(_estimate_row("l1/eps=0", zero, epsilon=0.0))
        record.add_flag("positive", all(m > 0.0 for m in means))
        record.add_flag("non_increasing", non_increasing(means, errors, ctx.band))
        record.add_flag("zero_at_zero", zero.mean == 0.0 and zero.standard_error == 0.0)

    def _run_estimator_equivalence(self, ctx: ExperimentContext) -> None:
        """三个固定策略下直接估计与测度变换估计在合成标准误带内一致"""
        fx, record = ctx.fixture, ctx.record
        n = ctx.samples("n_paths", fx.n_paths)
        freeze = bool(ctx.option("freeze_measurements", True))
        self_normalize = bool(ctx.option("self_normalize", False))
        bank = NoiseBank()
        for j, policy in enumerate(fx.reference_policies()):
            direct, reweighted = self._estimator_pair(fx, policy, n, ctx.seed, bank, False, freeze)
            record.add_estimate(f"direct/p{j}", direct)
            record.add_estimate(f"reweighted/p{j}", reweighted)
            record.table.append({
                "policy": j, "direct": direct.mean, "direct_se": direct.standard_error,
                "reweighted": reweighted.mean, "reweighted_se": reweighted.standard_error,
                "difference": reweighted.mean - direct.mean, "combined_se": combined_se(direct, reweighted),
            })
            record.add_flag(f"agree/p{j}", agree(direct, reweighted, ctx.band))
            if self_normalize:
                _, normalized = self._estimator_pair(fx, policy, n, ctx.seed, bank, True, freeze)
                record.add_estimate(f"self_normalized/p{j}", normalized)
                record.warnings.append(f"p{j}: 自归一化估计仅作方差诊断，不参与判定")

    def _run_dynkin(self, ctx: ExperimentContext) -> None:
        """
        三个测试函数的 Dynkin 残差：|r| <= band·SE + Kδ，且 δ 减半两次不增大

        各个 δ 都在最细网格的同一组布朗路径上粗化模拟。
        """
        ctx.require("full")
        fx, record = ctx.fixture, ctx.record
        n = ctx.samples("n_paths", fx.n_paths)
        refinements = [int(r) for r in ctx.option("refinements", [1, 2, 4])]
        finest = max(refinements)
        if any(r < 1 or finest % r for r in refinements):
            raise ValidationError(f"细化倍数 {refinements} 必须都能整除最大倍数 {finest}")
        noise_grid = ctx.grid.refine(finest)
        bias = float(ctx.option("bias_constant", 1.0))
        names = list(ctx.option("functions", list(DYNKIN_TEST_FUNCTIONS)))
        policy = fx.reference_policies()[2]
        for name in names:
            if name not in DYNKIN_TEST_FUNCTIONS:
                raise ValidationError(f"未知的测试函数: {name}")
            f, grad_f, hess_f = DYNKIN_TEST_FUNCTIONS[name]
            magnitudes, errors, within = [], [], []
            for r in refinements:
                grid = ctx.grid.refine(r)
                est = dynkin_residual(fx.model, as_interpolated(policy, grid), f, grad_f, hess_f, grid, n,
                                      ctx.x0, ctx.seed, noise_grid)
                label = f"{name}/refine={r}"
                record.add_estimate(label, est)
                record.table.append(_estimate_row(label, est, function=name, delta=grid.delta))
                magnitudes.append(abs(est.mean))
                errors.append(est.standard_error)
                within.append(abs(est.mean) <= ctx.band * est.standard_error + bias * grid.delta)
            record.add_flag(f"residual/{name}", all(within))
            record.add_flag(f"refinement/{name}", non_increasing(magnitudes, errors, ctx.band))

    def _run_h_sweep(self, ctx: ExperimentContext) -> None:
        """
        固定 δ、细化 h：离散最优值 J*_h 与插值策略的蒙特卡洛代价

        判定：相邻 J*_h 之差在误差带内不增；最细 h 的插值策略不劣于任何较粗者；
        与算例自身宏步数相同的一行检查 |J* - 插值代价| <= rel·max(|J*|, 0.1) + band·SE。
        """
        ctx.require("full")
        fx, record = ctx.fixture, ctx.record
        steps = [int(v) for v in ctx.option("macro_steps", list(HarnessDefaults.H_SWEEP_DIVISORS))]
        divisor = int(ctx.option("delta_divisor", HarnessDefaults.H_SWEEP_DELTA_DIVISOR))
        n_kernel = ctx.samples("n_kernel", 400)
        n_eval = ctx.samples("n_eval", fx.n_paths)
        start = str(ctx.option("kernel_start", "center"))
        relative = float(ctx.tolerances["lift_relative"])
        bank = NoiseBank()
        values, lifted = [], []
        kernel_ok, rows_ok = True, True
        for N in steps:
            if divisor % N:
                raise ValidationError(f"δ 的分母 {divisor} 不能被宏步数 {N} 整除")
            grid = TimeGrid(ctx.grid.horizon, N, divisor // N)
            sol = solve_discrete(fx.model, fx.cost, SolverGrids(fx.state_grid, fx.action_grid, grid), n_kernel,
                                 ctx.x0, ctx.seed, start, bank=bank)
            kernel_ok &= bool(np.max(np.abs(sol.problem.kernel.sum(axis=2) - 1.0)) <= ctx.tolerances["kernel_row_sum"])
            rows_ok &= all(bool(np.max(np.abs(t.sum(axis=1) - 1.0)) <= ctx.tolerances["row_sum"])
                           for t in sol.markov_policy.tables)
            est = mc_cost_direct(fx.model, sol.policy, fx.cost, grid, n_eval, ctx.x0, ctx.seed, bank)
            record.add_estimate(f"lifted_cost/N={N}", est)
            gap = abs(sol.value - est.mean)
            record.table.append({
                "h": grid.h, "macro_steps": N, "J_star": float(sol.value), "lifted_cost": est.mean,
                "standard_error": est.standard_error, "lift_gap": gap, "out_of_box": int(sol.problem.out_of_box),
            })
            if N == ctx.grid.macro_steps:
                record.add_flag("lift_consistency",
                                gap <= relative * max(abs(sol.value), 0.1) + ctx.band * est.standard_error)
            values.append(float(sol.value))
            lifted.append(est)
        gaps = [abs(values[i] - values[i + 1]) for i in range(len(values) - 1)]
        gap_errors = [combined_se(lifted[i], lifted[i + 1]) for i in range(len(values) - 1)]
        record.add_flag("gaps_non_increasing", non_increasing(gaps, gap_errors, ctx.band))
        finest = lifted[-1]
        record.add_flag("finest_not_worse", all(finest.mean <= e.mean + ctx.band * combined_se(finest, e)
                                                for e in lifted[:-1]))
        record.add_flag("kernel_rows", kernel_ok)
        record.add_flag("policy_rows", rows_ok)
        if sum(r["out_of_box"] for r in record.table):
            record.warnings.append("转移核估计中有终点落在状态盒外，已归入边界格")

    def _pomdp_study(self, ctx: ExperimentContext, fx: Fixture, tag: str) -> None:
        record = ctx.record
        n = ctx.samples("n_paths", fx.n_paths)
        freeze = bool(ctx.option("freeze_measurements", True))
        problem = PomdpProblem(fx.model, fx.cost, fx.time_grid, tuple(fx.x0), n, ctx.seed, freeze)
        bank = NoiseBank()
        wide_policy, wide = enumerate_wide_sense(problem, fx.templates()[0], bank)
        open_policy, open_loop = enumerate_open_loop(problem, fx.action_grid, bank)
        record.add_estimate(f"{tag}/wide_sense", wide)
        record.add_estimate(f"{tag}/open_loop", open_loop)
        margin = open_loop.mean - wide.mean
        se = combined_se(wide, open_loop)
        record.table.append({"fixture": fx.name, "wide_sense": wide.mean, "wide_sense_se": wide.standard_error,
                             "open_loop": open_loop.mean, "open_loop_se": open_loop.standard_error,
                             "margin": margin, "combined_se": se})
        if fx.model.observation_bound > 0:
            record.add_flag(f"{tag}/information_value", margin >= ctx.band * se)
        else:
            record.add_flag(f"{tag}/no_information_value", agree(wide, open_loop, ctx.band))
        policy_dir = ctx.option("policy_out", None)
        if policy_dir:
            os.makedirs(policy_dir, exist_ok=True)
            save_policy(wide_policy, os.path.join(policy_dir, f"{fx.name}_wide_sense_seed{ctx.seed}.json"))
            save_policy(open_policy, os.path.join(policy_dir, f"{fx.name}_open_loop_seed{ctx.seed}.json"))

    def _run_pomdp_enum(self, ctx: ExperimentContext) -> None:
        """有信息通道上宽义最优严格优于最优开环；g ≡ 0 的基线算例上两者一致"""
        ctx.require("pomdp")
        self._pomdp_study(ctx, ctx.fixture, "primary")
        baseline = ctx.option("baseline_fixture", None)
        if baseline:
            fx = ctx.registry.resolve(baseline, ctx.config.fixture_params)
            if fx.structure != "pomdp":
                raise ValidationError(f"基线算例 {baseline} 不是部分观测算例")
            self._pomdp_study(ctx, fx, "baseline")

    def _solo_optimum(self, fx: Fixture, i: int, n: int, seed: int, guard: int, bank: NoiseBank) -> EstimateWithError:
        """解耦算例中智能体 i 单独求解的最优确定性策略代价"""
        template = fx.templates()[i]
        total = enumerate_deterministic(template.action_grid.size, policy_slots(template))
        if total > guard:
            raise ValidationError(f"智能体 {i} 的策略数 {total} 超过穷举上限 {guard}")
        agent, cost, x0 = fx.model.agents[i], fx.solo_costs[i], np.array([fx.x0[i]])
        best = None
        for idx in range(total):
            est = mc_cost_direct(agent, deterministic_from_index(template, idx), cost, fx.time_grid, n, x0, seed, bank)
            if best is None or est.mean < best.mean:
                best = est
        return best

    def _run_team_enum(self, ctx: ExperimentContext) -> None:
        """
        团队穷举：最优策略组不劣于随机挑战者；解耦可分算例上等于各智能体单独最优之和；
        耦合算例附集中式采样 MDP 的值作为参考下界
        """
        ctx.require("team_local", "team_coupled")
        fx, record = ctx.fixture, ctx.record
        n = ctx.samples("n_paths", fx.n_paths)
        guard = int(ctx.option("guard", SolverDefaults.TEAM_ENUMERATION_GUARD))
        count = int(ctx.option("challengers", SolverDefaults.CHALLENGERS))
        problem = TeamProblem(fx.model, fx.cost, fx.time_grid, tuple(fx.x0), n, ctx.seed)
        templates = fx.templates()
        bank = NoiseBank()
        best_team, best = team_brute_force(problem, templates, guard, bank)
        record.add_estimate("team_optimum", best)
        record.table.append({"role": "optimum", "index": -1, "mean": best.mean, "standard_error": best.standard_error})
        challengers = random_team_challengers(problem, templates, count, ctx.seed, bank)
        for idx, est in challengers:
            record.table.append({"role": "challenger", "index": idx, "mean": est.mean,
                                 "standard_error": est.standard_error})
        record.add_flag("beats_challengers", all(best.mean <= est.mean for _, est in challengers))

        # 在独立噪声上复评最优组与挑战者
        holdout = replace(problem, master_seed=_holdout_seed(ctx.seed))
        holdout_bank = NoiseBank()
        best_holdout = holdout.evaluate(best_team, holdout_bank)
        record.add_estimate("team_optimum/holdout", best_holdout)
        record.table.append({"role": "optimum_holdout", "index": -1, "mean": best_holdout.mean,
                             "standard_error": best_holdout.standard_error})
        rivals = []
        for idx, _ in challengers:
            est = holdout.evaluate(team_tuple_from_index(templates, idx), holdout_bank)
            rivals.append(est)
            record.table.append({"role": "challenger_holdout", "index": idx, "mean": est.mean,
                                 "standard_error": est.standard_error})
        record.add_flag("beats_challengers/holdout", not_worse_than(best_holdout, rivals, ctx.band))

        if fx.structure == "team_coupled" and fx.model.coupling_bound == 0.0 and fx.solo_costs:
            solos = [self._solo_optimum(fx, i, n, ctx.seed, guard, bank) for i in range(fx.n_agents)]
            total = EstimateWithError(float(math.fsum(s.mean for s in solos)), combined_se(*solos), n, "solo_sum")
            record.add_estimate("solo_sum", total)
            record.table.append({"role": "solo_sum", "index": -1, "mean": total.mean,
                                 "standard_error": total.standard_error})
            record.add_flag("separable_sum", agree(best, total, ctx.band))

        if fx.structure == "team_coupled" and ctx.option("centralized_bound", True):
            n_kernel = ctx.samples("n_kernel", SolverDefaults.N_KERNEL_MIN)
            central = build_team_mdp(fx.model, fx.state_grids, fx.action_grids, fx.time_grid, n_kernel, fx.cost,
                                     ctx.seed)
            values, _ = backward_induction(central)
            cell = int(product_state_grid(fx.state_grids).cell_of(ctx.x0.reshape(1, -1))[0])
            bound = values.value(0, cell)
            record.table.append({"role": "centralized", "index": cell, "mean": bound, "standard_error": 0.0})
            if bound > best.mean + ctx.band * best.standard_error:
                record.warnings.append(f"集中式采样 MDP 值 {bound:.6g} 高于分散式最优 {best.mean:.6g}（网格过粗）")

        policy_dir = ctx.option("policy_out", None)
        if policy_dir:
            os.makedirs(policy_dir, exist_ok=True)
            save_policy(best_team, os.path.join(policy_dir, f"{fx.name}_team_seed{ctx.seed}.json"))

    @staticmethod
    def _audit_inputs(fx: Fixture, policy, n: int, seed: int, bank: NoiseBank) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        grid, x0, model = fx.time_grid, np.asarray(fx.x0, dtype=float), fx.model
        if fx.structure == "full":
            batch = simulate_paths(model, as_interpolated(policy, grid), grid, n, seed, x0, bank=bank)
            return batch.action_indices, {"W": batch.increments}
        if fx.structure in ("pomdp", "team_local"):
            simulate = simulate_pomdp_range if fx.structure == "pomdp" else simulate_team_local_meas_range
            parts = map_path_chunks(lambda a, b: simulate(model, policy, grid, seed, a, b, x0, bank), n)
            return (np.concatenate([p.action_indices for p in parts]),
                    {"W": np.concatenate([p.state_increments for p in parts]),
                     "Y": np.concatenate([p.observation_increments for p in parts])})
        parts = map_path_chunks(lambda a, b: simulate_team_decoupled_range(model, policy, grid, seed, a, b, x0, bank), n)
        increments = {f"W{i}": np.concatenate([p.increments[i] for p in parts]) for i in range(model.n_agents)}
        return np.concatenate([p.action_indices for p in parts]), increments

    @staticmethod
    def _anticipative_indices(increments: Dict[str, np.ndarray], grid: TimeGrid) -> np.ndarray:
        """测试用的违规策略：第 k 步读取下一个采样时刻 (k+1)h 的通道值并按符号选动作"""
        source = increments["Y"] if "Y" in increments else next(iter(increments.values()))
        n = source.shape[0]
        windows = source.reshape(n, grid.macro_steps, grid.inner_refine, source.shape[2]).sum(axis=2)[:, :, 0]
        return (np.cumsum(windows, axis=1) > 0).astype(np.int64)

    def _run_independence_audit(self, ctx: ExperimentContext) -> None:
        """动作与未来噪声增量的相关性审计；可选地确认违规策略会被标记"""
        fx, record = ctx.fixture, ctx.record
        n = ctx.samples("n_paths", max(fx.n_paths, HarnessDefaults.MIN_AUDIT_PATHS))
        bank = NoiseBank()
        increments = None
        for j, policy in enumerate(fx.reference_policies()):
            indices, increments = self._audit_inputs(fx, policy, n, ctx.seed, bank)
            report = independence_audit(indices, increments, ctx.grid, ctx.band, HarnessDefaults.MIN_AUDIT_PATHS)
            record.table.append(dict(policy=f"p{j}", **report.to_dict()))
            record.add_flag(f"audit/p{j}", report.passed)
        if ctx.option("anticipative", False):
            indices = self._anticipative_indices(increments, ctx.grid)
            report = independence_audit(indices, increments, ctx.grid, ctx.band, HarnessDefaults.MIN_AUDIT_PATHS)
            record.table.append(dict(policy="anticipative", **report.to_dict()))
            record.add_flag("anticipative_detected", not report.passed)


# 全局实验管理器实例
experiment_runner = None


def get_experiment_runner() -> ExperimentRunner:
    """获取全局实验管理器实例"""
    global experiment_runner
    if experiment_runner is None:
        experiment_runner = ExperimentRunner()
    return experiment_runner


def run_experiment(config: ExperimentConfig, output_dir: Optional[str] = None) -> ResultRecord:
    """
    执行实验并把记录写入只追加的结果目录

    Args:
        config: 实验配置
        output_dir: 输出目录；缺省时依次取配置中的 output、持久化设置中的输出目录
    """
    runner = get_experiment_runner()
    record = runner.run(config)
    directory = output_dir or config.output or runner.settings.output_dir()
    ResultWorkspace(directory).save(record)
    return record


def replay(path: str, seed: Optional[int] = None, output_dir: Optional[str] = None) -> ResultRecord:
    """重放一条记录；结果同样写入结果目录"""
    runner = get_experiment_runner()
    record = runner.replay(path, seed)
    directory = output_dir or os.path.dirname(os.path.abspath(path))
    ResultWorkspace(directory).save(record, stem=f"{record.kind}_{record.fixture}_replay")
    return record
