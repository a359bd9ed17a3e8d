"""
表策略的 JSON 持久化

格式: {"information": ..., "action_grid": {...}, [信息结构参数], "tables": {"k": {"key": [权重...]}}}
权重按 repr 写出，读回后逐位相同。团队策略组写为 {"agents": [策略, ...]}。
"""

import json
import logging
import os
from typing import Any, Dict, Union

import numpy as np

from algorithms.policy import (
    ActionGrid, MarkovTablePolicy, ObservationQuantizer, RelaxedControl, StateGrid, TablePolicy, TeamPolicyTuple,
    WideSensePolicy,
)
from utils.errors import ValidationError

logger = logging.getLogger(__name__)


def policy_to_dict(policy: TablePolicy) -> Dict[str, Any]:
    data: Dict[str, Any] = {
        "information": policy.information,
        "action_grid": {
            "values": [list(v) for v in policy.action_grid.values],
            "box": [list(policy.action_grid.box[0]), list(policy.action_grid.box[1])],
        },
    }
    if isinstance(policy, MarkovTablePolicy):
        data["state_grid"] = policy.state_grid.to_dict()
    elif isinstance(policy, WideSensePolicy):
        data["quantizer"] = policy.quantizer.to_dict()
        data["history_length"] = policy.history_length
    data["tables"] = {
        str(k): {str(key): [float(w) for w in row] for key, row in enumerate(table)}
        for k, table in enumerate(policy.tables)
    }
    return data


def _tables_from_dict(tables: Dict[str, Dict[str, list]]):
    out = []
    for k in range(len(tables)):
        step = tables.get(str(k))
        if step is None:
            raise ValidationError(f"策略文件缺少第 {k} 步")
        rows = [step.get(str(key)) for key in range(len(step))]
        if any(r is None for r in rows):
            raise ValidationError(f"策略文件第 {k} 步的键不连续")
        out.append(np.array(rows, dtype=float))
    return out


def policy_from_dict(data: Dict[str, Any]) -> TablePolicy:
    try:
        grid = data["action_grid"]
        action_grid = ActionGrid(tuple(tuple(float(v) for v in vals) for vals in grid["values"]),
                                 (tuple(float(v) for v in grid["box"][0]), tuple(float(v) for v in grid["box"][1])))
        tables = _tables_from_dict(data["tables"])
        info = data["information"]
        if info == "none":
            return RelaxedControl(action_grid, tables)
        if info == "state":
            sg = data["state_grid"]
            state_grid = StateGrid(tuple(float(v) for v in sg["lo"]), tuple(float(v) for v in sg["hi"]),
                                   tuple(int(c) for c in sg["cells"]))
            return MarkovTablePolicy(action_grid, state_grid, tables)
        if info == "history":
            q = data["quantizer"]
            quantizer = ObservationQuantizer(tuple(float(v) for v in q["lo"]), tuple(float(v) for v in q["hi"]),
                                             tuple(int(c) for c in q["levels"]))
            return WideSensePolicy(action_grid, quantizer, tables, int(data["history_length"]))
    except KeyError as e:
        raise ValidationError(f"策略文件缺少字段: {e}") from e
    raise ValidationError(f"未知的信息模式: {data.get('information')}")


def save_policy(policy: Union[TablePolicy, TeamPolicyTuple], path: str) -> str:
    """保存单个表策略或团队策略组"""
    if isinstance(policy, TeamPolicyTuple):
        data = {"agents": [policy_to_dict(p) for p in policy.policies]}
    else:
        data = policy_to_dict(policy)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False)
    logger.info(f"策略已保存: {path}")
    return path


def load_policy(path: str) -> Union[TablePolicy, TeamPolicyTuple]:
    if not os.path.isfile(path):
        raise ValidationError(f"策略文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if "agents" in data:
        return TeamPolicyTuple(tuple(policy_from_dict(d) for d in data["agents"]))
    return policy_from_dict(data)
