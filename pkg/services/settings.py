import logging
import os

try:
    from PyQt6.QtCore import QSettings
    QT_SETTINGS_INSTALLED = True
except ImportError:
    QSettings = None
    QT_SETTINGS_INSTALLED = False

logger = logging.getLogger(__name__)


class HarnessDefaults:
    """实验默认参数"""
    WORKERS = 0
    CHUNK_SIZE = 1024
    OUTPUT_DIR = os.path.join(os.getcwd(), "results")
    SE_BAND = 3.0
    ROW_SUM_TOL = 1e-12
    KERNEL_ROW_SUM_TOL = 1e-9
    MIN_AUDIT_PATHS = 10_000
    LIFT_RELATIVE_TOL = 0.05
    H_SWEEP_DIVISORS = (2, 4, 8, 16)
    H_SWEEP_DELTA_DIVISOR = 256
    EPSILON_SCHEDULE = (0.2, 0.1, 0.05)


class SettingsManager:
    """设置管理器：持久化的用户默认值（工作线程数、分块大小、输出目录、SE 带宽）"""

    def __init__(self):
        self.settings = QSettings("CTSample", "Settings") if QT_SETTINGS_INSTALLED else None
        if self.settings is None:
            logger.debug("[SettingsManager] 未安装 PyQt6，使用内置默认值")

    def _value(self, key: str, default, value_type):
        if self.settings is None:
            return default
        try:
            return self.settings.value(key, default, type=value_type)
        except Exception as e:
            logger.warning(f"读取设置 {key} 失败，使用默认值 {default}: {e}")
            return default

    def worker_count(self) -> int:
        return int(self._value("parallel/workers", HarnessDefaults.WORKERS, int))

    def chunk_size(self) -> int:
        return int(self._value("parallel/chunk_size", HarnessDefaults.CHUNK_SIZE, int))

    def output_dir(self) -> str:
        return str(self._value("output/directory", HarnessDefaults.OUTPUT_DIR, str))

    def se_band(self) -> float:
        return float(self._value("tolerances/se_band", HarnessDefaults.SE_BAND, float))

    def set_value(self, key: str, value) -> None:
        if self.settings is None:
            logger.warning(f"未安装 PyQt6，设置 {key} 不会被保存")
            return
        self.settings.setValue(key, value)

    def get_all_settings(self) -> dict:
        """获取全部设置的字典"""
        return {
            "workers": self.worker_count(),
            "chunk_size": self.chunk_size(),
            "output_dir": self.output_dir(),
            "se_band": self.se_band(),
        }


# 全局设置管理器实例
settings_manager = None


def get_settings_manager() -> SettingsManager:
    """获取全局设置管理器实例"""
    global settings_manager
    if settings_manager is None:
        settings_manager = SettingsManager()
    return settings_manager
