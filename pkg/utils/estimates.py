"""
蒙特卡洛估计结果与归约工具

所有估计器统一返回 EstimateWithError。逐路径样本先按路径编号拼接，再一次性归约，
因此结果与分块方式、线程数无关。
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Sequence

import numpy as np

from utils.errors import ValidationError


@dataclass(frozen=True)
class EstimateWithError:
    """蒙特卡洛估计：均值、标准误、样本数"""

    mean: float
    standard_error: float
    n: int
    label: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"样本数必须 >= 1，当前为 {self.n}")
        if not self.standard_error >= 0.0:
            raise ValidationError(f"标准误必须非负，当前为 {self.standard_error}")

    def within(self, target: float, band: float = 3.0, slack: float = 0.0) -> bool:
        """判断 |mean - target| <= band * SE + slack"""
        return abs(self.mean - target) <= band * self.standard_error + slack

    def to_dict(self) -> Dict[str, float]:
        return {"mean": float(self.mean), "standard_error": float(self.standard_error), "n": int(self.n)}


def estimate_from_samples(samples: Sequence[float], label: str = "") -> EstimateWithError:
    """
    由逐路径样本构造估计

    Args:
        samples: 一维样本数组，顺序由路径编号决定
        label: 可选标签（写入结果记录）

    Returns:
        EstimateWithError，n = 1 时标准误为 0
    """
    values = np.asarray(samples, dtype=float).ravel()
    n = int(values.size)
    if n < 1:
        raise ValidationError("没有样本，无法估计")
    mean = float(np.sum(values) / n)
    if n == 1:
        return EstimateWithError(mean, 0.0, 1, label)
    centered = values - mean
    var = float(np.sum(centered * centered) / (n - 1))
    return EstimateWithError(mean, math.sqrt(var / n), n, label)


def combined_se(*estimates: EstimateWithError) -> float:
    """独立估计的合成标准误"""
    return math.sqrt(sum(e.standard_error ** 2 for e in estimates))


def agree(a: EstimateWithError, b: EstimateWithError, band: float = 3.0) -> bool:
    """两个估计在 band 倍合成标准误内一致"""
    return abs(a.mean - b.mean) <= band * combined_se(a, b)


def not_worse_than(a: EstimateWithError, others: Iterable[EstimateWithError], band: float = 3.0) -> bool:
    """a 的均值不超过每个 other 的均值加 band 倍合成标准误"""
    return all(a.mean <= o.mean + band * combined_se(a, o) for o in others)


def non_increasing(values: Sequence[float], errors: Sequence[float], band: float = 3.0) -> bool:
    """序列在误差带内单调不增：values[i+1] <= values[i] + band * sqrt(e_i^2 + e_{i+1}^2)"""
    for i in range(len(values) - 1):
        slack = band * math.sqrt(errors[i] ** 2 + errors[i + 1] ** 2)
        if values[i + 1] > values[i] + slack:
            return False
    return True


def concat_samples(chunks: Iterable[np.ndarray]) -> np.ndarray:
    parts = [np.asarray(c, dtype=float) for c in chunks]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts, axis=0)
