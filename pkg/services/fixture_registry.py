import logging
import threading
from typing import Any, Callable, Dict, List, Optional

from models.fixtures import FIXTURE_BUILDERS, Fixture
from utils.errors import ValidationError

logger = logging.getLogger(__name__)


class FixtureRegistry:
    """算例注册表，按 (名称, 参数覆盖) 缓存已构造的算例，供各实验共享"""

    def __init__(self):
        self._builders: Dict[str, Callable[..., Fixture]] = dict(FIXTURE_BUILDERS)
        self._cache: Dict[str, Fixture] = {}
        self._lock = threading.RLock()

    def available(self) -> List[str]:
        with self._lock:
            return sorted(self._builders)

    def register(self, name: str, builder: Callable[..., Fixture]) -> None:
        """注册自定义算例；同名覆盖会清掉该名称的缓存"""
        with self._lock:
            if name in self._builders:
                logger.warning(f"[FixtureRegistry] 覆盖已注册的算例: {name}")
            self._builders[name] = builder
            for key in [k for k in self._cache if k.split("|", 1)[0] == name]:
                del self._cache[key]

    def resolve(self, name: str, overrides: Optional[Dict[str, Any]] = None) -> Fixture:
        """
        取得算例

        Args:
            name: 算例名称
            overrides: 参数覆盖

        Returns:
            Fixture

        Raises:
            ValidationError: 名称未注册或参数不被接受
        """
        overrides = dict(overrides or {})
        key = f"{name}|{sorted(overrides.items())!r}"
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None:
                return cached
            builder = self._builders.get(name)
            if builder is None:
                raise ValidationError(f"未知的算例: {name}（可用: {', '.join(sorted(self._builders))}）")
            fixture = builder(**overrides)
            self._cache[key] = fixture
            logger.debug(f"[FixtureRegistry] 构造算例 {name}，参数覆盖 {overrides}")
            return fixture

    def clear(self) -> None:
        with self._lock:
            self._cache.clear()


# 全局算例注册表实例
fixture_registry = None


def get_fixture_registry() -> FixtureRegistry:
    """获取全局算例注册表实例"""
    global fixture_registry
    if fixture_registry is None:
        fixture_registry = FixtureRegistry()
    return fixture_registry
