"""多层蒙特卡洛（MLMC）驱动

流程：
1. 试探：在初始若干层上各取 N₀ 个样本，得到方差与单样本开销
2. 分配：按 N_l = ⌈2ε⁻²·√(V_l/C_l)·Σ√(V_m C_m)⌉ 补足样本（方差占 MSE 的一半）
3. 偏差检验：用最后两层均值外推剩余偏差，超过 ε/√2 则加一层并回到 2
4. 汇总：各层均值求和，拟合 α/β/γ 并给出复杂度区间

驱动只依赖"层采样器"接口（first_level + sample），定价与嵌套风险共用同一套逻辑。
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from app.services.paths import level_payoff_batch
from app.services.sde import MlmcConfig, Payoff, SdeModel
from app.utils.errors import BiasTargetUnreachableError, InvalidArgumentError, StateError
from app.utils.streams import Purpose, block_ranges

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# 常量
# ---------------------------------------------------------------------------
KURTOSIS_WARNING = 100.0
MIN_FITTED_ALPHA = 0.5
DEFAULT_ALPHA = 1.0
REGIME_TOLERANCE = 0.2


# ---------------------------------------------------------------------------
# 层统计量
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class LevelStats:
    """单层修正项的流式矩统计（可合并）"""

    level: int
    count: int = 0
    sum: float = 0.0
    sum_sq: float = 0.0
    sum_cubed: float = 0.0
    sum_quart: float = 0.0
    cost_total: float = 0.0

    @classmethod
    def from_values(cls, level: int, values, cost) -> "LevelStats":
        """由样本值构造；cost 为单样本开销（标量）或逐样本开销数组。"""
        values = np.asarray(values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError(f"第 {level} 层样本中出现非有限值")
        squares = values * values
        if np.ndim(cost) == 0:
            cost_total = float(cost) * values.size
        else:
            cost_total = float(np.sum(np.asarray(cost, dtype=float)))
        return cls(
            level=level,
            count=int(values.size),
            sum=float(np.sum(values)),
            sum_sq=float(np.sum(squares)),
            sum_cubed=float(np.sum(squares * values)),
            sum_quart=float(np.sum(squares * squares)),
            cost_total=cost_total,
        )

    def merge(self, other: "LevelStats") -> "LevelStats":
        if other.level != self.level:
            raise InvalidArgumentError(f"不能合并不同层的统计量: {self.level} vs {other.level}")
        return LevelStats(
            level=self.level,
            count=self.count + other.count,
            sum=self.sum + other.sum,
            sum_sq=self.sum_sq + other.sum_sq,
            sum_cubed=self.sum_cubed + other.sum_cubed,
            sum_quart=self.sum_quart + other.sum_quart,
            cost_total=self.cost_total + other.cost_total,
        )

    def mean(self) -> float:
        if self.count == 0:
            raise StateError(f"第 {self.level} 层没有样本")
        return self.sum / self.count

    def variance(self) -> float:
        if self.count < 2:
            raise StateError(f"第 {self.level} 层样本数不足 2，无法估计方差")
        mean = self.sum / self.count
        return max(0.0, self.sum_sq / self.count - mean * mean)

    def mean_cost(self) -> float:
        if self.count == 0:
            raise StateError(f"第 {self.level} 层没有样本")
        return self.cost_total / self.count

    def kurtosis(self) -> float:
        """修正项的峰度 E[(Y−μ)⁴]/Var²；方差为 0 时返回 0"""
        variance = self.variance()
        if variance <= 0.0:
            return 0.0
        n = self.count
        mu = self.sum / n
        fourth = (
            self.sum_quart / n
            - 4.0 * mu * self.sum_cubed / n
            + 6.0 * mu * mu * self.sum_sq / n
            - 3.0 * mu**4
        )
        return max(0.0, fourth) / (variance * variance)


@dataclass(frozen=True)
class RateEstimates:
    """log₂ 最小二乘拟合的弱收敛率 α、方差衰减率 β 与开销增长率 γ，无法拟合的项为 nan"""

    alpha: float
    beta: float
    gamma: float
    fit_levels: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "alpha": _finite_or_none(self.alpha),
            "beta": _finite_or_none(self.beta),
            "gamma": _finite_or_none(self.gamma),
            "fit_levels": list(self.fit_levels),
            **complexity_regime(self),
        }


@dataclass(frozen=True)
class MlmcEstimate:
    value: float
    levels: list[LevelStats]
    eps: float
    total_cost: float
    rates: RateEstimates | None
    std_error: float
    bias_estimate: float
    alpha_used: float
    thetas: dict[int, list[float]] | None = None
    diagnostics: dict = field(default_factory=dict)

    def level_table(self) -> list[dict]:
        """逐层诊断记录（level, N, mean, var, cost, kurtosis, theta_norm）"""
        rows = []
        for stats in self.levels:
            theta = None if self.thetas is None else self.thetas.get(stats.level)
            rows.append(
                {
                    "level": stats.level,
                    "N": stats.count,
                    "mean": stats.mean(),
                    "var": stats.variance(),
                    "cost": stats.mean_cost(),
                    "kurtosis": stats.kurtosis(),
                    "theta_norm": None if theta is None else float(np.linalg.norm(theta)),
                }
            )
        return rows


def _finite_or_none(value: float) -> float | None:
    return float(value) if value is not None and math.isfinite(value) else None


# ---------------------------------------------------------------------------
# 分块并行采样
# ---------------------------------------------------------------------------
class LevelSampler(Protocol):
    first_level: int

    def sample(self, level: int, start: int, count: int) -> LevelStats: ...


def sample_in_blocks(
    level: int,
    fn: Callable[[int, int], LevelStats],
    start: int,
    count: int,
    workers: int = 1,
) -> LevelStats:
    """按随机流分块切分 [start, start + count)，并行执行后按块顺序合并。

    切分只取决于区间本身，合并顺序固定，因此结果与 workers 无关（逐位一致）。
    """
    total = LevelStats(level=level)
    ranges = block_ranges(start, count)
    if not ranges:
        return total
    if workers <= 1 or len(ranges) == 1:
        parts = [fn(chunk_start, chunk_count) for chunk_start, chunk_count in ranges]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(ranges))) as executor:
            parts = list(executor.map(lambda r: fn(*r), ranges))
    for part in parts:
        total = total.merge(part)
    return total


class PricingLevelSampler:
    """期权定价的层采样器：第 l 层样本为 (G_f − G_c)·权重，θ 由 theta_for(l) 给出"""

    first_level = 1

    def __init__(
        self,
        model: SdeModel,
        payoff: Payoff,
        cfg: MlmcConfig,
        theta_for: Callable[[int], np.ndarray] | None = None,
        purpose: Purpose = Purpose.ESTIMATION,
    ):
        self.model = model
        self.payoff = payoff
        self.cfg = cfg
        self.purpose = purpose
        self.max_level = cfg.max_level
        zero = np.zeros(model.dim_noise)
        self.theta_for = theta_for or (lambda level: zero)

    def sample(self, level: int, start: int, count: int) -> LevelStats:
        theta = self.theta_for(level)

        def chunk(chunk_start: int, chunk_count: int) -> LevelStats:
            batch = level_payoff_batch(
                self.model,
                self.payoff,
                self.cfg,
                theta,
                level,
                chunk_start,
                chunk_count,
                purpose=self.purpose,
            )
            return LevelStats.from_values(level, batch.differences(), batch.cost_per_sample)

        return sample_in_blocks(level, chunk, start, count, self.cfg.workers)


def accumulate_level(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    theta_l,
    level: int,
    n_new: int,
    existing: LevelStats | None = None,
) -> LevelStats:
    """在 existing 基础上追加 n_new 个新样本（样本序号接续 existing.count）"""
    if n_new < 0:
        raise InvalidArgumentError(f"n_new 不能为负数: {n_new}")
    existing = existing or LevelStats(level=level)
    if existing.level != level:
        raise InvalidArgumentError(f"existing 属于第 {existing.level} 层，而非第 {level} 层")
    if n_new == 0:
        return existing
    theta = np.asarray(theta_l, dtype=float)
    sampler = PricingLevelSampler(model, payoff, cfg, lambda _: theta)
    return existing.merge(sampler.sample(level, existing.count, n_new))


# ---------------------------------------------------------------------------
# 分配、偏差检验与速率拟合
# ---------------------------------------------------------------------------
def allocate_samples(levels: list[LevelStats], eps: float) -> list[int]:
    """最优样本分配，保证 Σ V_l/N_l ≤ ε²/2"""
    if not eps > 0:
        raise InvalidArgumentError(f"eps 必须为正数: {eps}")
    if not levels:
        raise StateError("没有任何层的试探统计量")
    for stats in levels:
        if stats.count < 2:
            raise StateError(f"第 {stats.level} 层缺少试探样本（至少 2 个）")
    variances = np.array([stats.variance() for stats in levels])
    costs = np.array([stats.mean_cost() for stats in levels])
    total = float(np.sum(np.sqrt(variances * costs)))
    raw = 2.0 / eps**2 * np.sqrt(variances / costs) * total
    return [int(math.ceil(value)) for value in raw]


def bias_estimate(levels: list[LevelStats], alpha: float) -> float:
    """最后两层均值按 2^(−α) 几何衰减外推的剩余偏差"""
    if len(levels) < 2:
        raise StateError("偏差检验至少需要 2 层")
    ratio = 2.0**alpha
    top = len(levels) - 1
    return max(
        abs(levels[i].mean()) / (ratio ** (top - i) * (ratio - 1.0))
        for i in (top - 1, top)
    )


def bias_converged(levels: list[LevelStats], eps: float, alpha: float) -> bool:
    return bias_estimate(levels, alpha) <= eps / math.sqrt(2.0)


def fit_rates(levels: list[LevelStats]) -> RateEstimates:
    """对 log₂|mean|、log₂ var、log₂ cost 关于层号做最小二乘，首层不参与拟合"""
    if len(levels) < 3:
        raise StateError(f"拟合速率至少需要 3 层，当前 {len(levels)} 层")
    fitted = levels[1:]
    for stats in fitted:
        if stats.count < 2:
            raise StateError(f"第 {stats.level} 层样本数不足 2")
    index = np.array([stats.level for stats in fitted], dtype=float)
    means = np.array([abs(stats.mean()) for stats in fitted])
    variances = np.array([stats.variance() for stats in fitted])
    costs = np.array([stats.mean_cost() for stats in fitted])
    return RateEstimates(
        alpha=-_log2_slope(index, means),
        beta=-_log2_slope(index, variances),
        gamma=_log2_slope(index, costs),
        fit_levels=(int(index[0]), int(index[-1])),
    )


def _log2_slope(index: np.ndarray, values: np.ndarray) -> float:
    keep = values > 0
    if np.count_nonzero(keep) < 2:
        return math.nan
    slope, _ = np.polyfit(index[keep], np.log2(values[keep]), 1)
    return float(slope)


def alpha_for_bias(levels: list[LevelStats], rates: RateEstimates | None) -> float:
    """至少 3 个差分层时使用拟合的 α（下限 0.5），否则取 1"""
    if rates is None or len(levels) < 4 or not math.isfinite(rates.alpha):
        return DEFAULT_ALPHA
    return max(MIN_FITTED_ALPHA, rates.alpha)


def complexity_regime(rates: RateEstimates, tolerance: float = REGIME_TOLERANCE) -> dict:
    """按 β 与 γ 的大小关系给出复杂度区间与预测的开销指数（cost ∝ ε^exponent）"""
    beta, gamma, alpha = rates.beta, rates.gamma, rates.alpha
    if not (math.isfinite(beta) and math.isfinite(gamma)):
        return {"regime": None, "cost_exponent": None}
    if abs(beta - gamma) <= tolerance:
        return {"regime": "beta=gamma", "cost_exponent": -2.0}
    if beta > gamma:
        return {"regime": "beta>gamma", "cost_exponent": -2.0}
    alpha = alpha if math.isfinite(alpha) and alpha > 0 else DEFAULT_ALPHA
    return {"regime": "beta<gamma", "cost_exponent": -(2.0 + (gamma - beta) / alpha)}


# ---------------------------------------------------------------------------
# 驱动
# ---------------------------------------------------------------------------
def _build_estimate(
    levels: list[LevelStats],
    eps: float,
    alpha: float,
    thetas: dict[int, list[float]] | None,
    diagnostics: dict,
) -> MlmcEstimate:
    rates = fit_rates(levels) if len(levels) >= 3 else None
    variance = sum(stats.variance() / stats.count for stats in levels)
    return MlmcEstimate(
        value=float(sum(stats.mean() for stats in levels)),
        levels=list(levels),
        eps=eps,
        total_cost=float(sum(stats.cost_total for stats in levels)),
        rates=rates,
        std_error=math.sqrt(variance),
        bias_estimate=bias_estimate(levels[1:], alpha) if len(levels) >= 3 else math.nan,
        alpha_used=alpha,
        thetas=thetas,
        diagnostics=diagnostics,
    )


def run_multilevel(
    sampler: LevelSampler,
    eps: float,
    pilot_samples: int,
    initial_levels: int,
    max_level: int,
    label: str = "mlmc",
    thetas: Callable[[int], list[float]] | None = None,
    diagnostics: dict | None = None,
) -> MlmcEstimate:
    """通用 MLMC 驱动，sampler.first_level 为起始层号（定价为 1，嵌套风险为 0）"""
    if not eps > 0:
        raise InvalidArgumentError(f"eps 必须为正数: {eps}")
    first = sampler.first_level
    top = min(first + initial_levels - 1, max_level)
    levels = [sampler.sample(level, 0, pilot_samples) for level in range(first, top + 1)]
    logger.info("%s: 试探完成 levels=%d..%d N0=%d eps=%g", label, first, top, pilot_samples, eps)

    while True:
        targets = allocate_samples(levels, eps)
        for i, (stats, target) in enumerate(zip(levels, targets)):
            extra = target - stats.count
            if extra > 0:
                levels[i] = stats.merge(sampler.sample(stats.level, stats.count, extra))

        rates = fit_rates(levels) if len(levels) >= 3 else None
        alpha = alpha_for_bias(levels, rates)
        # 首层是基础估计而非差分，偏差检验只看差分层
        differences = levels[1:]
        if len(differences) >= 2 and bias_converged(differences, eps, alpha):
            break
        if top >= max_level:
            if len(differences) < 2:
                logger.warning("%s: 最大层数 %d 下差分层不足 2 个，跳过偏差检验", label, max_level)
                break
            partial = _build_estimate(levels, eps, alpha, _theta_table(thetas, levels), dict(diagnostics or {}))
            raise BiasTargetUnreachableError(
                f"{label}: 达到最大层数 {max_level} 仍未满足偏差目标 "
                f"(bias≈{partial.bias_estimate:.3g} > {eps / math.sqrt(2.0):.3g})",
                partial=partial,
            )
        top += 1
        logger.info("%s: 偏差未收敛，加入第 %d 层", label, top)
        levels.append(sampler.sample(top, 0, pilot_samples))

    for stats in levels:
        if stats.count >= 2 and stats.kurtosis() > KURTOSIS_WARNING:
            logger.warning(
                "%s: 第 %d 层峰度 %.1f 过大，方差估计可能不可靠", label, stats.level, stats.kurtosis()
            )

    estimate = _build_estimate(levels, eps, alpha, _theta_table(thetas, levels), dict(diagnostics or {}))
    logger.info(
        "%s: 完成 value=%.6g std_error=%.3g levels=%d cost=%.4g",
        label,
        estimate.value,
        estimate.std_error,
        len(levels),
        estimate.total_cost,
    )
    return estimate


def _theta_table(thetas, levels: list[LevelStats]) -> dict[int, list[float]] | None:
    if thetas is None:
        return None
    return {stats.level: [float(v) for v in thetas(stats.level)] for stats in levels}


def run_mlmc(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    eps: float,
    theta_schedule=None,
) -> MlmcEstimate:
    """（可选 θ 重加权的）MLMC 定价；theta_schedule 需提供 theta_for(level)"""
    theta_for = None if theta_schedule is None else theta_schedule.theta_for
    sampler = PricingLevelSampler(model, payoff, cfg, theta_for)
    return run_multilevel(
        sampler,
        eps,
        pilot_samples=cfg.pilot_samples,
        initial_levels=cfg.initial_levels,
        max_level=cfg.max_level,
        label=f"mlmc[{payoff.label}]",
        thetas=theta_for,
    )


def profile_levels(sampler: LevelSampler, levels: list[int], samples: int) -> list[LevelStats]:
    """固定样本数的逐层剖析，用于速率研究"""
    if samples < 2:
        raise InvalidArgumentError(f"samples 必须 ≥ 2: {samples}")
    return [sampler.sample(level, 0, samples) for level in levels]
