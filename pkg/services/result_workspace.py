import logging
import os
import threading
from typing import List, Optional, Tuple

from io_ops.record_io import ResultRecord, write_csv, write_json

logger = logging.getLogger(__name__)


class ResultWorkspace:
    """只追加的结果目录：同名记录不覆盖，追加数字后缀"""

    RECORD_EXTENSION = '.json'
    TABLE_EXTENSION = '.csv'

    def __init__(self, workspace_path: Optional[str] = None):
        self.workspace_path = workspace_path or os.path.join(os.getcwd(), 'results')
        self._lock = threading.Lock()
        self._ensure_workspace_exists()

    def _ensure_workspace_exists(self) -> None:
        try:
            os.makedirs(self.workspace_path, exist_ok=True)
        except OSError as e:
            logger.error(f"创建结果目录失败: {e}")
            raise

    def _taken(self, stem: str) -> bool:
        base = os.path.join(self.workspace_path, stem)
        return os.path.exists(base + self.RECORD_EXTENSION) or os.path.exists(base + self.TABLE_EXTENSION)

    def reserve_stem(self, stem: str) -> str:
        """返回一个尚未使用的文件名主干：stem、stem_1、stem_2 ..."""
        candidate, suffix = stem, 0
        while self._taken(candidate):
            suffix += 1
            candidate = f"{stem}_{suffix}"
        return candidate

    def save(self, record: ResultRecord, stem: Optional[str] = None) -> Tuple[str, str]:
        """
        写出一条记录（JSON）与对应表格（CSV）

        Returns:
            (记录路径, 表格路径)
        """
        stem = stem or f"{record.kind}_{record.fixture}"
        with self._lock:
            stem = self.reserve_stem(stem)
            base = os.path.join(self.workspace_path, stem)
            json_path = write_json(record, base + self.RECORD_EXTENSION)
            csv_path = write_csv(record, base + self.TABLE_EXTENSION)
        logger.info(f"实验记录已写出: {json_path}")
        return json_path, csv_path

    def list_records(self) -> List[str]:
        try:
            names = sorted(f for f in os.listdir(self.workspace_path) if f.endswith(self.RECORD_EXTENSION))
        except OSError as e:
            logger.error(f"扫描结果目录时发生错误: {e}")
            return []
        return [os.path.join(self.workspace_path, f) for f in names]
