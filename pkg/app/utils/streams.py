"""基于计数器的可复现随机数流。

每个 (seed, level, purpose) 派生一个 Philox 密钥，流序号写入计数器最高位，
不同序号之间互不重叠，并行 worker 无需共享可变状态。

两种取数方式：
- 分块模式：连续 BLOCK_SIZE 个样本共用一条流，样本 r 位于第 r // BLOCK_SIZE 条流的
  第 r % BLOCK_SIZE 个位置（路径模拟、外层情景）。
- 逐序号模式：每个序号独占一条流，可无限续取（内层条件损失样本，inner / pilot_inner）。
同一 purpose 只使用其中一种方式。
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable

import numpy as np

from app.utils.errors import InvalidArgumentError

BLOCK_SIZE = 4096
_MASK64 = (1 << 64) - 1


class Purpose(str, Enum):
    ESTIMATION = "estimation"
    PILOT = "pilot"
    OPTIMIZER = "optimizer"
    INNER = "inner"
    OUTER = "outer"
    PILOT_INNER = "pilot_inner"


_PURPOSE_CODES = {purpose: code for code, purpose in enumerate(Purpose)}


@dataclass(frozen=True)
class StreamKey:
    """单个样本的随机流标识"""

    seed: int
    level: int
    replicate: int
    purpose: Purpose = Purpose.ESTIMATION

    def __post_init__(self):
        if self.level < 0:
            raise InvalidArgumentError(f"level 不能为负数: {self.level}")
        if self.replicate < 0:
            raise InvalidArgumentError(f"replicate 不能为负数: {self.replicate}")
        if not isinstance(self.purpose, Purpose):
            object.__setattr__(self, "purpose", Purpose(self.purpose))


@lru_cache(maxsize=4096)
def _philox_key(seed: int, level: int, purpose_code: int) -> tuple[int, int]:
    sequence = np.random.SeedSequence(entropy=seed & _MASK64, spawn_key=(level, purpose_code))
    words = sequence.generate_state(2, dtype=np.uint64)
    return int(words[0]), int(words[1])


def stream_generator(seed: int, level: int, purpose: Purpose, index: int) -> np.random.Generator:
    """返回 (seed, level, purpose, index) 对应的独立生成器。"""
    if level < 0 or index < 0:
        raise InvalidArgumentError(f"level/index 不能为负数: level={level} index={index}")
    key = np.array(_philox_key(int(seed), int(level), _PURPOSE_CODES[Purpose(purpose)]), dtype=np.uint64)
    counter = np.array([0, 0, 0, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def generator_for(key: StreamKey) -> np.random.Generator:
    """逐序号模式：key.replicate 独占一条流。"""
    return stream_generator(key.seed, key.level, key.purpose, key.replicate)


def block_draws(
    seed: int,
    level: int,
    purpose: Purpose,
    start: int,
    count: int,
    draw: Callable[[np.random.Generator, int], np.ndarray],
) -> np.ndarray:
    """分块模式：取样本序号 [start, start + count) 的随机量。

    draw(rng, m) 必须按样本顺序消耗随机数（前缀一致），
    这样样本 r 的取值与本次请求的范围无关。
    """
    if count < 0 or start < 0:
        raise InvalidArgumentError(f"非法样本区间: start={start} count={count}")
    pieces: list[np.ndarray] = []
    position = start
    end = start + count
    while position < end:
        block, offset = divmod(position, BLOCK_SIZE)
        take = min(BLOCK_SIZE - offset, end - position)
        rng = stream_generator(seed, level, purpose, block)
        pieces.append(np.asarray(draw(rng, offset + take))[offset:])
        position += take
    if not pieces:
        return np.asarray(draw(stream_generator(seed, level, purpose, 0), 0))
    return np.concatenate(pieces, axis=0)


def block_normals(
    seed: int,
    level: int,
    purpose: Purpose,
    start: int,
    count: int,
    shape: tuple[int, ...],
) -> np.ndarray:
    """分块模式的标准正态样本，形状为 (count, *shape)。"""
    return block_draws(
        seed,
        level,
        purpose,
        start,
        count,
        lambda rng, m: rng.standard_normal((m, *shape)),
    )


def block_ranges(start: int, count: int) -> list[tuple[int, int]]:
    """按 BLOCK_SIZE 边界切分 [start, start + count)，返回 (起点, 数量) 列表。"""
    ranges: list[tuple[int, int]] = []
    position = start
    end = start + count
    while position < end:
        stop = min((position // BLOCK_SIZE + 1) * BLOCK_SIZE, end)
        ranges.append((position, stop - position))
        position = stop
    return ranges
