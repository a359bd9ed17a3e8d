"""
实验记录的读写：结构化记录（JSON）与表格（CSV）

JSON 字段顺序固定（RECORD_FIELDS），浮点数按 repr 输出，读回后逐位相同。
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List

from utils.errors import ValidationError
from utils.estimates import EstimateWithError

logger = logging.getLogger(__name__)

TOOLKIT_VERSION = "1.0.0"

RECORD_FIELDS = (
    "kind", "fixture", "version", "seed", "inputs", "estimates", "table", "flags", "warnings", "passed",
    "duration_seconds",
)
ESTIMATE_COLUMNS = ("name", "mean", "standard_error", "n")


@dataclass
class ResultRecord:
    """一次实验的结果记录"""

    kind: str
    fixture: str
    seed: int
    inputs: Dict[str, Any]
    version: str = TOOLKIT_VERSION
    estimates: Dict[str, Dict[str, float]] = field(default_factory=dict)
    table: List[Dict[str, Any]] = field(default_factory=list)
    flags: Dict[str, bool] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    passed: bool = True
    duration_seconds: float = 0.0

    def add_estimate(self, name: str, estimate: EstimateWithError) -> None:
        if name in self.estimates:
            raise ValidationError(f"重复的估计名: {name}")
        self.estimates[name] = estimate.to_dict()

    def add_flag(self, name: str, value: bool) -> None:
        self.flags[name] = bool(value)

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def finalize(self, duration_seconds: float) -> "ResultRecord":
        self.passed = all(self.flags.values())
        self.duration_seconds = float(duration_seconds)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in RECORD_FIELDS}

    def stochastic_outputs(self) -> Dict[str, Any]:
        """重放比较的对象：估计、表格与判定（不含耗时）"""
        return {"estimates": self.estimates, "table": self.table, "flags": self.flags}


def record_from_dict(data: Dict[str, Any]) -> ResultRecord:
    missing = [name for name in RECORD_FIELDS if name not in data]
    if missing:
        raise ValidationError(f"实验记录缺少字段: {missing}")
    return ResultRecord(**{name: data[name] for name in RECORD_FIELDS})


def record_to_json(record: ResultRecord) -> str:
    return json.dumps(record.to_dict(), ensure_ascii=False, indent=2)


def write_json(record: ResultRecord, path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(record_to_json(record))
        f.write("\n")
    return path


def load_record(path: str) -> ResultRecord:
    """读取 JSON 实验记录"""
    if not os.path.isfile(path):
        raise ValidationError(f"实验记录不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"解析实验记录失败 {path}: {e}")
        raise ValidationError(f"实验记录不是合法的 JSON: {path}") from e
    return record_from_dict(data)


def table_rows(record: ResultRecord) -> List[Dict[str, Any]]:
    """CSV 行：有表格时输出表格，否则每个估计一行"""
    if record.table:
        return record.table
    return [{"name": name, "mean": est["mean"], "standard_error": est["standard_error"], "n": est["n"]}
            for name, est in record.estimates.items()]


def write_csv(record: ResultRecord, path: str) -> str:
    rows = table_rows(record)
    header = list(dict.fromkeys(k for row in rows for k in row)) if rows else list(ESTIMATE_COLUMNS)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
    return path


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return value
