import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import yaml

from utils.errors import ValidationError

logger = logging.getLogger(__name__)


class ConfigFormat:  # 配置文件格式
    SUPPORTED_EXTENSIONS = ['.yaml', '.yml']
    SECTIONS = ('kind', 'seed', 'fixture', 'grid', 'grids', 'sampling', 'tolerances', 'options', 'output')
    GRID_KEYS = ('horizon', 'macro_steps', 'inner_refine')
    GRIDS_KEYS = ('cells', 'state_box', 'levels', 'action_bound', 'obs_levels', 'obs_box', 'history_length')
    SAMPLING_KEYS = ('n_paths', 'n_kernel', 'n_eval', 'chunk_size')
    TOLERANCE_DEFAULTS = {'se_band': 3.0, 'row_sum': 1e-12, 'kernel_row_sum': 1e-9, 'lift_relative': 0.05}


EXPERIMENT_KINDS = (
    "validate", "martingale", "second_moment", "l1_continuity", "estimator_equivalence",
    "dynkin", "h_sweep", "pomdp_enum", "team_enum", "independence_audit",
)


@dataclass
class ExperimentConfig:
    """
    一次实验的全部输入

    fixture_params 汇总 fixture 节的参数覆盖以及 grid / grids 节（它们都作用于算例构造）。
    """

    kind: str
    seed: int
    fixture: str
    fixture_params: Dict[str, Any] = field(default_factory=dict)
    sampling: Dict[str, int] = field(default_factory=dict)
    tolerances: Dict[str, float] = field(default_factory=dict)
    options: Dict[str, Any] = field(default_factory=dict)
    output: Optional[str] = None

    def __post_init__(self):
        validate_config(self)

    def sample_count(self, key: str, default: int) -> int:
        return int(self.sampling.get(key, default))

    def to_dict(self) -> Dict[str, Any]:
        """回显到实验记录中的输入（可直接传回 config_from_dict）"""
        return {
            'kind': self.kind,
            'seed': self.seed,
            'fixture': {'name': self.fixture, 'params': dict(self.fixture_params)},
            'sampling': dict(self.sampling),
            'tolerances': dict(self.tolerances),
            'options': dict(self.options),
            'output': self.output,
        }


def validate_config(config: ExperimentConfig) -> None:
    if config.kind not in EXPERIMENT_KINDS:
        raise ValidationError(f"未知的实验类型: {config.kind}（可用: {', '.join(EXPERIMENT_KINDS)}）")
    if isinstance(config.seed, bool) or not isinstance(config.seed, int) or config.seed < 0:
        raise ValidationError(f"必须显式给出非负整数种子: {config.seed!r}")
    if not config.fixture:
        raise ValidationError("缺少算例名称")
    unknown = sorted(set(config.sampling) - set(ConfigFormat.SAMPLING_KEYS))
    if unknown:
        raise ValidationError(f"sampling 节存在未知参数: {unknown}")
    for key, value in config.sampling.items():
        if int(value) < 1:
            raise ValidationError(f"样本数 {key} 必须 >= 1: {value}")
    unknown = sorted(set(config.tolerances) - set(ConfigFormat.TOLERANCE_DEFAULTS))
    if unknown:
        raise ValidationError(f"tolerances 节存在未知参数: {unknown}")
    for key, value in config.tolerances.items():
        if not float(value) > 0:
            raise ValidationError(f"容差 {key} 必须为正: {value}")


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """
    由 YAML 解析出的字典构造配置

    Args:
        data: 顶层键见 ConfigFormat.SECTIONS

    Returns:
        ExperimentConfig
    """
    if not isinstance(data, dict):
        raise ValidationError("配置文件顶层必须是键值结构")
    unknown = sorted(set(data) - set(ConfigFormat.SECTIONS))
    if unknown:
        raise ValidationError(f"配置文件存在未知节: {unknown}")
    if 'seed' not in data:
        raise ValidationError("配置缺少 seed（不使用隐式熵）")

    fixture = data.get('fixture') or {}
    if isinstance(fixture, str):
        fixture = {'name': fixture}
    params: Dict[str, Any] = dict(fixture.get('params') or {})
    for section, keys in (('grid', ConfigFormat.GRID_KEYS), ('grids', ConfigFormat.GRIDS_KEYS)):
        block = data.get(section) or {}
        bad = sorted(set(block) - set(keys))
        if bad:
            raise ValidationError(f"{section} 节存在未知参数: {bad}")
        params.update(block)

    tolerances = dict(data.get('tolerances') or {})
    return ExperimentConfig(
        kind=str(data.get('kind', '')),
        seed=data['seed'],
        fixture=str(fixture.get('name', '')),
        fixture_params=params,
        sampling=dict(data.get('sampling') or {}),
        tolerances={k: float(v) for k, v in tolerances.items()},
        options=dict(data.get('options') or {}),
        output=data.get('output'),
    )


def load_config(path: str) -> ExperimentConfig:
    """
    安全加载 YAML 配置文件

    Raises:
        ValidationError: 文件不存在、扩展名不支持或内容不合法
    """
    if not os.path.isfile(path):
        raise ValidationError(f"配置文件不存在: {path}")
    _, ext = os.path.splitext(path)
    if ext.lower() not in ConfigFormat.SUPPORTED_EXTENSIONS:
        raise ValidationError(f"不支持的配置文件格式: {ext}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        logger.error(f"解析配置文件失败 {path}: {e}")
        raise ValidationError(f"配置文件不是合法的 YAML: {path}") from e
    config = config_from_dict(data or {})
    logger.info(f"已加载配置 {path}: kind={config.kind}, fixture={config.fixture}, seed={config.seed}")
    return config


def dump_config(config: ExperimentConfig, path: str) -> None:
    data = config.to_dict()
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(_plain(data), f, allow_unicode=True, sort_keys=False)


def _plain(value):
    """元组转列表（safe_dump 只输出基本类型）"""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value
