"""耦合 Euler–Maruyama 路径模拟

第 l 层细网格 n_l = base_steps·M^(l−1) 步，粗网格 n_{l−1} 步，
粗网格增量由 M 个连续细网格增量求和得到（不重新抽样）。
批量接口按样本序号从分块随机流取数，单个样本的结果与批大小、线程数无关。
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from app.services.sde import MlmcConfig, Payoff, SdeModel
from app.utils.errors import InvalidArgumentError
from app.utils.streams import Purpose, StreamKey, block_normals


@dataclass(frozen=True)
class CoupledSample:
    x_fine: np.ndarray
    x_coarse: np.ndarray | None
    w_T: np.ndarray
    level: int
    cost: float


@dataclass(frozen=True)
class CoupledBatch:
    """一批耦合样本，行序即样本序号顺序"""

    x_fine: np.ndarray  # (n, d)
    x_coarse: np.ndarray | None  # (n, d)，第 1 层为 None
    w_T: np.ndarray  # (n, q)
    level: int
    cost_per_sample: float

    def __len__(self) -> int:
        return self.x_fine.shape[0]


@dataclass(frozen=True)
class LevelPayoffBatch:
    """fine/coarse 为加权后的收益，payoff_fine/payoff_coarse 为未加权的 G 值"""

    fine: np.ndarray
    coarse: np.ndarray | None
    payoff_fine: np.ndarray
    payoff_coarse: np.ndarray | None
    w_T: np.ndarray
    cost_per_sample: float

    def differences(self) -> np.ndarray:
        """第 1 层返回 fine，其余返回 fine − coarse"""
        if self.coarse is None:
            return self.fine
        return self.fine - self.coarse

    def raw_differences(self) -> np.ndarray:
        if self.payoff_coarse is None:
            return self.payoff_fine
        return self.payoff_fine - self.payoff_coarse


def level_cost(cfg: MlmcConfig, level: int) -> float:
    """单个耦合样本的步数开销 n_l + n_{l−1}（第 1 层为 n_1）"""
    cost = cfg.n_steps(level)
    if level > 1:
        cost += cfg.n_steps(level - 1)
    return float(cost)


def _check_level(cfg: MlmcConfig, level: int) -> None:
    if not 1 <= level <= cfg.max_level:
        raise InvalidArgumentError(f"level 必须在 1~{cfg.max_level} 之间: {level}")


def _check_theta(model: SdeModel, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape != (model.dim_noise,):
        raise InvalidArgumentError(f"theta 长度必须为 {model.dim_noise}，实际为 {theta.shape[0]}")
    if not np.all(np.isfinite(theta)):
        raise InvalidArgumentError("theta 包含非有限值")
    return theta


def draw_increments(
    model: SdeModel,
    cfg: MlmcConfig,
    level: int,
    start: int,
    count: int,
    purpose: Purpose = Purpose.ESTIMATION,
    seed: int | None = None,
) -> np.ndarray:
    """样本序号 [start, start + count) 的细网格布朗增量，形状 (count, n_l, q)"""
    _check_level(cfg, level)
    seed = cfg.seed if seed is None else seed
    n_fine = cfg.n_steps(level)
    h_fine = model.horizon / n_fine
    return block_normals(seed, level, purpose, start, count, (n_fine, model.dim_noise)) * math.sqrt(h_fine)


def _euler(model: SdeModel, theta: np.ndarray | None, x: np.ndarray, dw: np.ndarray, h: float) -> np.ndarray:
    """对 dw (n, steps, q) 逐步推进 Euler 格式，θ 为 None 时不做漂移平移。"""
    for step in range(dw.shape[1]):
        drift = model.drift(x)
        if theta is not None:
            drift = drift + np.sum(model.diffusion(x) * theta, axis=-1)
        x = x + drift * h + model.apply_diffusion(x, dw[:, step, :])
    return x


def simulate_increments(model: SdeModel, cfg: MlmcConfig, theta, level: int, dw: np.ndarray) -> CoupledBatch:
    """用给定细网格增量模拟 θ 平移后的耦合路径"""
    _check_level(cfg, level)
    theta = _check_theta(model, theta)
    count, n_fine = dw.shape[0], dw.shape[1]
    if n_fine != cfg.n_steps(level) or dw.shape[2] != model.dim_noise:
        raise InvalidArgumentError(f"增量形状 {dw.shape} 与第 {level} 层不匹配")
    shift = theta if np.any(theta != 0.0) else None
    x_start = np.broadcast_to(model.x0, (count, model.dim_state)).astype(float)
    x_fine = _euler(model, shift, x_start, dw, model.horizon / n_fine)

    x_coarse = None
    if level > 1:
        m = cfg.refine_factor
        n_coarse = n_fine // m
        dw_coarse = dw.reshape(count, n_coarse, m, model.dim_noise).sum(axis=2)
        x_coarse = _euler(model, shift, x_start, dw_coarse, model.horizon / n_coarse)

    return CoupledBatch(
        x_fine=x_fine,
        x_coarse=x_coarse,
        w_T=dw.sum(axis=1),
        level=level,
        cost_per_sample=level_cost(cfg, level),
    )


def simulate_coupled_batch(
    model: SdeModel,
    cfg: MlmcConfig,
    theta,
    level: int,
    start: int,
    count: int,
    purpose: Purpose = Purpose.ESTIMATION,
    seed: int | None = None,
) -> CoupledBatch:
    """模拟样本序号 [start, start + count) 的耦合路径。"""
    theta = _check_theta(model, theta)
    dw = draw_increments(model, cfg, level, start, count, purpose, seed)
    return simulate_increments(model, cfg, theta, level, dw)


def simulate_coupled(model: SdeModel, cfg: MlmcConfig, theta, key: StreamKey) -> CoupledSample:
    """单个 StreamKey 的耦合样本，与批量接口中同序号样本逐位一致"""
    batch = simulate_coupled_batch(
        model, cfg, theta, key.level, key.replicate, 1, purpose=key.purpose, seed=key.seed
    )
    return CoupledSample(
        x_fine=batch.x_fine[0],
        x_coarse=None if batch.x_coarse is None else batch.x_coarse[0],
        w_T=batch.w_T[0],
        level=key.level,
        cost=batch.cost_per_sample,
    )


def evaluate_payoffs(model: SdeModel, payoff: Payoff, theta, batch: CoupledBatch) -> LevelPayoffBatch:
    """计算 G 值并乘以 Girsanov 权重，细粗两端共用同一个 w_T 与权重"""
    theta = _check_theta(model, theta)
    payoff_fine = payoff(batch.x_fine)
    payoff_coarse = None if batch.x_coarse is None else payoff(batch.x_coarse)
    fine, coarse = payoff_fine, payoff_coarse
    if np.any(theta != 0.0):
        exponent = -np.sum(batch.w_T * theta, axis=-1) - 0.5 * float(np.sum(theta * theta)) * model.horizon
        weight = np.exp(exponent)
        fine = payoff_fine * weight
        coarse = None if payoff_coarse is None else payoff_coarse * weight
    return LevelPayoffBatch(
        fine=fine,
        coarse=coarse,
        payoff_fine=payoff_fine,
        payoff_coarse=payoff_coarse,
        w_T=batch.w_T,
        cost_per_sample=batch.cost_per_sample,
    )


def level_payoff_batch(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    theta,
    level: int,
    start: int,
    count: int,
    purpose: Purpose = Purpose.ESTIMATION,
    seed: int | None = None,
) -> LevelPayoffBatch:
    batch = simulate_coupled_batch(model, cfg, theta, level, start, count, purpose, seed)
    return evaluate_payoffs(model, payoff, theta, batch)


def level_payoff_difference(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    theta,
    key: StreamKey,
) -> tuple[float, float | None, np.ndarray, float]:
    """单样本形式：(fine_value, coarse_value 或 None, w_T, cost)"""
    batch = level_payoff_batch(
        model, payoff, cfg, theta, key.level, key.replicate, 1, purpose=key.purpose, seed=key.seed
    )
    coarse = None if batch.coarse is None else float(batch.coarse[0])
    return float(batch.fine[0]), coarse, batch.w_T[0], batch.cost_per_sample
