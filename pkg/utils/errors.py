"""
工具包统一使用的异常类型

数值核心只抛出这里定义的异常，实验编排层（services.experiment_runner）负责捕获并补充上下文。
"""

from typing import Any, Optional


class ValidationError(ValueError):
    """输入不合法：网格/策略键缺失、长度不匹配、规模保护触发等"""


class KernelBuildError(ValidationError):
    """转移核估计失败（某一行样本数不足）"""

    def __init__(self, message: str, cell: Optional[int] = None, action: Optional[int] = None):
        super().__init__(message)
        self.cell = cell
        self.action = action


class IntegrationError(RuntimeError):
    """Euler–Maruyama 积分过程中出现非有限状态"""

    def __init__(self, message: str, step: int, path_index: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.path_index = path_index


class NumericError(ArithmeticError):
    """数值失败，例如扩散矩阵在路径某点奇异"""

    def __init__(self, message: str, point: Any = None):
        super().__init__(message)
        self.point = point


class ExperimentError(RuntimeError):
    """实验执行失败，携带实验类型与算例名称"""

    def __init__(self, message: str, kind: str = "", fixture: str = ""):
        super().__init__(message)
        self.kind = kind
        self.fixture = fixture
