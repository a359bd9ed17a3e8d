"""
ctsample 命令行入口

    python ctsample.py <实验类型> [--config configs/<实验类型>.yaml] [--seed N] [--workers N] [--out DIR] [--strict]
    python ctsample.py replay <记录.json> [--seed N] [--out DIR] [--strict]

退出码: 0 通过，1 存在未通过的判定（--strict 时警告也算），2 出错。
"""

import argparse
import os
import sys

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
if BASE_DIR not in sys.path:
    sys.path.append(BASE_DIR)

import logging
from dataclasses import replace
from typing import List, Optional

from io_ops.config_io import EXPERIMENT_KINDS, load_config
from io_ops.record_io import ResultRecord
from services.experiment_runner import replay, run_experiment
from services.settings import get_settings_manager
from utils.errors import ExperimentError, ValidationError
from utils.parallel import set_worker_count

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXIT_PASSED = 0
EXIT_FAILED = 1
EXIT_ERROR = 2

CONFIG_DIR = os.path.join(BASE_DIR, "configs")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="主种子（覆盖配置文件）")
    parser.add_argument("--workers", type=int, default=None, help="工作线程数（不影响结果）")
    parser.add_argument("--out", default=None, help="结果目录")
    parser.add_argument("--strict", action="store_true", help="出现任何警告即视为未通过")
    parser.add_argument("--verbose", action="store_true", help="输出调试日志")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctsample", description="连续时间随机控制的采样近似实验工具")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"运行 {kind} 实验")
        p.add_argument("--config", default=None, help=f"YAML 配置（默认 configs/{kind}.yaml）")
        _add_common(p)
    p = sub.add_parser("replay", help="按记录重放并逐位比较")
    p.add_argument("record", help="实验记录（JSON）")
    _add_common(p)
    return parser


def exit_code(record: ResultRecord, strict: bool) -> int:
    if not record.passed:
        return EXIT_FAILED
    if strict and record.warnings:
        return EXIT_FAILED
    return EXIT_PASSED


def _apply_workers(requested: Optional[int]) -> None:
    workers = requested if requested is not None else get_settings_manager().worker_count()
    set_worker_count(workers or os.cpu_count() or 1)


def _report(record: ResultRecord) -> None:
    failed = [name for name, ok in record.flags.items() if not ok]
    logger.info(f"{record.kind}/{record.fixture}: {'通过' if record.passed else '未通过'}，"
                f"{len(record.flags)} 项判定，{len(record.warnings)} 条警告")
    for name in failed:
        logger.info(f"  未通过: {name}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    _apply_workers(args.workers)
    try:
        if args.command == "replay":
            record = replay(args.record, args.seed, args.out)
        else:
            config = load_config(args.config or os.path.join(CONFIG_DIR, f"{args.command}.yaml"))
            if config.kind != args.command:
                raise ValidationError(f"配置文件的实验类型 {config.kind} 与子命令 {args.command} 不一致")
            if args.seed is not None:
                config = replace(config, seed=args.seed)
            record = run_experiment(config, args.out)
    except (ExperimentError, ValidationError, OSError) as e:
        logger.error(f"运行失败: {e}")
        return EXIT_ERROR
    _report(record)
    return exit_code(record, args.strict)


if __name__ == '__main__':
    sys.exit(main())
