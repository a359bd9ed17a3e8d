"""
路径编号分块的并行执行

分块大小与线程数无关，结果按块顺序拼接，保证任意线程数下结果逐位一致。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Tuple, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_CHUNK_SIZE = 1024

_worker_count: int = 1
_chunk_size: int = DEFAULT_CHUNK_SIZE


def get_worker_count() -> int:
    return int(_worker_count)


def set_worker_count(workers: int) -> None:
    global _worker_count
    _worker_count = max(1, int(workers))


def get_chunk_size() -> int:
    return int(_chunk_size)


def set_chunk_size(size: int) -> None:
    global _chunk_size
    _chunk_size = max(1, int(size))


def chunk_ranges(n_paths: int, chunk_size: int) -> List[Tuple[int, int]]:
    """把 [0, n_paths) 切成固定大小的区间"""
    return [(start, min(start + chunk_size, n_paths)) for start in range(0, n_paths, chunk_size)]


def map_path_chunks(fn: Callable[[int, int], T], n_paths: int,
                    workers: int = 0, chunk_size: int = 0) -> List[T]:
    """
    对每个路径区间执行 fn(start, stop)，按区间顺序返回结果

    Args:
        fn: 区间计算函数，必须是其输入的纯函数
        n_paths: 路径总数
        workers: 线程数，0 表示使用全局设置
        chunk_size: 分块大小，0 表示使用全局设置

    Returns:
        与区间一一对应的结果列表
    """
    workers = workers or get_worker_count()
    chunk_size = chunk_size or get_chunk_size()
    ranges = chunk_ranges(n_paths, chunk_size)
    if workers <= 1 or len(ranges) <= 1:
        return [fn(a, b) for a, b in ranges]
    logger.debug(f"并行计算 {n_paths} 条路径，{len(ranges)} 块，{workers} 线程")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(fn, a, b) for a, b in ranges]
        return [f.result() for f in futures]
