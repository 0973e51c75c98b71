"""嵌套期望风险引擎

η = P(E[X|Y] > L) = E[H(E[X|Y] − L)]，外层情景 Y，内层条件损失 X|Y。

- nested_mc：固定内层样本数 N 的两层嵌套蒙特卡洛
- nested_mc_iterative：单层嵌套 MC，逐情景倍增内层样本直到 N·|μ̂| ≥ σ̂·ε^{−1/2}
- nested_mlmc_uniform：以内层样本数 N_l = N₀·2^l 为离散化参数的 MLMC，粗层取细层前一半样本
- nested_mlmc_adaptive：按情景离阈值的远近自适应决定内层样本数
- var_cvar：在自适应估计之上二分求 VaR，再用正部泛函估计 CVaR

随机流：外层情景按 (seed, level, outer) 分块取数；内层样本按 (seed, level, inner, 情景序号)
逐序号取数，同一情景多次续取得到同一序列的前缀。
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import gaussian_kde

from app.services.mlmc import (
    LevelStats,
    MlmcEstimate,
    fit_rates,
    run_multilevel,
    sample_in_blocks,
)
from app.utils import oracles
from app.utils.errors import BracketError, InvalidArgumentError
from app.utils.streams import Purpose, StreamKey, block_draws, generator_for, stream_generator

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# 常量
# ---------------------------------------------------------------------------
FUNCTIONALS = ("indicator", "excess")
CI_Z = 1.96
MAX_BISECTIONS = 60
MIN_DENSITY = 1e-3


def apply_functional(name: str, differences):
    """indicator: H(x) = 1{x > 0}（H(0) = 0）；excess: max(x, 0)"""
    differences = np.asarray(differences, dtype=float)
    if name == "indicator":
        return (differences > 0.0).astype(float)
    if name == "excess":
        return np.maximum(differences, 0.0)
    raise InvalidArgumentError(f"未知泛函: {name}")


# ---------------------------------------------------------------------------
# 问题定义
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RiskOracle:
    """测试问题的解析对照：条件均值/标准差与 η、VaR、CVaR"""

    conditional_mean: Callable[[np.ndarray], np.ndarray]
    conditional_std: Callable[[np.ndarray], np.ndarray]
    eta: Callable[[float], float]
    var_cvar: Callable[[float], tuple[float, float]] | None = None


@dataclass(frozen=True, eq=False)
class RiskProblem:
    """outer_sampler(rng, m) 抽 m 个情景；inner_sampler(y, rng, n) 抽情景 y 下 n 个组合损失样本。

    inner_sampler 必须按顺序消耗随机数，使多次续取等价于一次取足。
    """

    outer_sampler: Callable[[np.random.Generator, int], np.ndarray]
    inner_sampler: Callable[[object, np.random.Generator, int], np.ndarray]
    threshold: float
    portfolio_size: int = 1
    oracle: RiskOracle | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.portfolio_size < 1:
            raise InvalidArgumentError(f"portfolio_size 必须为正整数: {self.portfolio_size}")
        if math.isnan(self.threshold):
            raise InvalidArgumentError("threshold 不能为 nan")

    def with_threshold(self, threshold: float) -> "RiskProblem":
        return replace(self, threshold=float(threshold))


def gaussian_problem(threshold: float = 1.0, portfolio_size: int = 1) -> RiskProblem:
    """Y ~ N(0,1)，X|Y=y ~ N(y,1)；组合为 K 个在同一噪声上的相同头寸取平均"""

    def outer(rng, m):
        return rng.standard_normal(m)

    def inner(y, rng, n):
        noise = rng.standard_normal(n)
        losses = np.broadcast_to((float(y) + noise)[:, np.newaxis], (n, portfolio_size))
        return losses.mean(axis=1) if portfolio_size > 1 else losses[:, 0].copy()

    oracle = RiskOracle(
        conditional_mean=lambda y: np.asarray(y, dtype=float),
        conditional_std=lambda y: np.ones_like(np.asarray(y, dtype=float)),
        eta=oracles.gaussian_eta,
        var_cvar=lambda a: (oracles.gaussian_var(a), oracles.gaussian_cvar(a)),
    )
    return RiskProblem(
        outer_sampler=outer,
        inner_sampler=inner,
        threshold=float(threshold),
        portfolio_size=portfolio_size,
        oracle=oracle,
        name="gaussian",
        params={"threshold": threshold, "portfolio_size": portfolio_size},
    )


def put_portfolio_problem(
    threshold: float = 0.0,
    spot: float = 100.0,
    rate: float = 0.05,
    sigma: float = 0.2,
    risk_horizon: float = 1.0 / 12.0,
    maturity: float = 1.0,
    strikes: tuple[float, ...] = (90.0, 100.0, 110.0),
) -> RiskProblem:
    """卖出 K 份欧式看跌的组合：风险期 τ 的情景 S_τ 下，组合损失为
    (1/K)Σ_k e^{−r(T−τ)}(K_k − S_T)₊ − 期初价格，条件均值由 Black–Scholes 给出。"""
    if not 0 < risk_horizon < maturity:
        raise InvalidArgumentError("必须满足 0 < risk_horizon < maturity")
    strikes = tuple(float(k) for k in strikes)
    if not strikes:
        raise InvalidArgumentError("strikes 不能为空")
    strike_array = np.asarray(strikes)
    remaining = maturity - risk_horizon
    discount = math.exp(-rate * remaining)
    initial = float(np.mean([oracles.black_scholes_price(spot, k, rate, sigma, maturity, "put") for k in strikes]))
    drift_outer = (rate - 0.5 * sigma * sigma) * risk_horizon
    drift_inner = (rate - 0.5 * sigma * sigma) * remaining

    def scenario(z):
        return spot * np.exp(drift_outer + sigma * math.sqrt(risk_horizon) * np.asarray(z, dtype=float))

    def outer(rng, m):
        return scenario(rng.standard_normal(m))

    def inner(y, rng, n):
        terminal = float(y) * np.exp(drift_inner + sigma * math.sqrt(remaining) * rng.standard_normal(n))
        payoffs = np.maximum(strike_array[np.newaxis, :] - terminal[:, np.newaxis], 0.0)
        return discount * payoffs.mean(axis=1) - initial

    def conditional_mean(y):
        values = [oracles.black_scholes_price(y, k, rate, sigma, remaining, "put") for k in strikes]
        return np.mean(values, axis=0) - initial

    def conditional_std(y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        second = discount**2 * oracles.put_second_moment(y, strike_array, rate, sigma, remaining)
        first = np.atleast_1d(conditional_mean(y) + initial)
        return np.sqrt(np.maximum(second - first * first, 0.0))

    def loss_of_z(z):
        return float(conditional_mean(scenario(z)))

    oracle = RiskOracle(
        conditional_mean=conditional_mean,
        conditional_std=conditional_std,
        eta=lambda level: oracles.monotone_eta(loss_of_z, level),
        var_cvar=lambda a: oracles.monotone_var_cvar(loss_of_z, a),
    )
    return RiskProblem(
        outer_sampler=outer,
        inner_sampler=inner,
        threshold=float(threshold),
        portfolio_size=len(strikes),
        oracle=oracle,
        name="put_portfolio",
        params={
            "threshold": threshold,
            "spot": spot,
            "rate": rate,
            "sigma": sigma,
            "risk_horizon": risk_horizon,
            "maturity": maturity,
            "strikes": list(strikes),
        },
    )


PROBLEM_BUILDERS: dict[str, Callable[..., RiskProblem]] = {
    "gaussian": lambda threshold, p: gaussian_problem(threshold, int(p.get("portfolio_size", 1))),
    "put_portfolio": lambda threshold, p: put_portfolio_problem(
        threshold,
        spot=float(p.get("spot", 100.0)),
        rate=float(p.get("rate", 0.05)),
        sigma=float(p.get("sigma", 0.2)),
        risk_horizon=float(p.get("risk_horizon", 1.0 / 12.0)),
        maturity=float(p.get("maturity", 1.0)),
        strikes=tuple(p.get("strikes", (90.0, 100.0, 110.0))),
    ),
}


def build_problem(name: str, threshold: float, params: dict | None = None) -> RiskProblem:
    builder = PROBLEM_BUILDERS.get(name)
    if builder is None:
        raise InvalidArgumentError(f"未知风险问题: {name}（可选 {', '.join(PROBLEM_BUILDERS)}）")
    return builder(float(threshold), params or {})


# ---------------------------------------------------------------------------
# 配置
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AdaptiveConfig:
    """自适应内层抽样参数，mode 为 estimated（样本矩）或 perfect（解析矩）"""

    confidence_const: float = 3.0
    exponent_r: float = 1.25
    moment_q: float = 6.0
    eps_cap_const: float = 1.0
    n0_inner: int = 16
    mode: str = "estimated"

    def __post_init__(self):
        if self.mode not in ("estimated", "perfect"):
            raise InvalidArgumentError(f"mode 必须为 estimated 或 perfect: {self.mode}")
        if not self.moment_q > 2:
            raise InvalidArgumentError(f"moment_q 必须大于 2: {self.moment_q}")
        if not self.confidence_const > 0 or not self.eps_cap_const > 0:
            raise InvalidArgumentError("confidence_const 与 eps_cap_const 必须为正数")
        if self.n0_inner < 2:
            raise InvalidArgumentError(f"n0_inner 必须 ≥ 2: {self.n0_inner}")
        upper = self.max_exponent()
        if not 1.0 < self.exponent_r < upper:
            raise InvalidArgumentError(f"exponent_r 必须满足 1 < r < {upper:.6g}（{self.mode} 模式）")

    def max_exponent(self) -> float:
        q = self.moment_q
        if self.mode == "perfect":
            return 2.0 - 2.0 / q
        return 2.0 - (math.sqrt(4.0 * q + 1.0) - 1.0) / q


@dataclass(frozen=True)
class NestedConfig:
    n0_inner: int = 16
    pilot_outer: int = 2000
    pilot_scenarios: int = 2000
    pilot_inner: int = 256
    initial_levels: int = 3
    max_level: int = 12
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n0_inner < 2:
            raise InvalidArgumentError(f"n0_inner 必须 ≥ 2: {self.n0_inner}")
        if self.pilot_outer < 2 or self.pilot_scenarios < 2 or self.pilot_inner < 2:
            raise InvalidArgumentError("pilot_outer、pilot_scenarios、pilot_inner 必须 ≥ 2")
        if not 1 <= self.initial_levels <= self.max_level + 1:
            raise InvalidArgumentError(f"initial_levels 必须在 1~max_level+1 之间: {self.initial_levels}")
        if self.workers < 1:
            raise InvalidArgumentError(f"workers 必须为正整数: {self.workers}")

    def inner_samples(self, level: int) -> int:
        return self.n0_inner * 2**level


# ---------------------------------------------------------------------------
# 结果
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class InnerSchedule:
    """一层中各情景内层样本数的汇总"""

    scenarios: int = 0
    total: int = 0
    minimum: int | None = None
    maximum: int | None = None

    @classmethod
    def from_counts(cls, counts) -> "InnerSchedule":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size == 0:
            return cls()
        return cls(int(counts.size), int(counts.sum()), int(counts.min()), int(counts.max()))

    def merge(self, other: "InnerSchedule") -> "InnerSchedule":
        if other.scenarios == 0:
            return self
        if self.scenarios == 0:
            return other
        return InnerSchedule(
            self.scenarios + other.scenarios,
            self.total + other.total,
            min(self.minimum, other.minimum),
            max(self.maximum, other.maximum),
        )

    def mean(self) -> float | None:
        return self.total / self.scenarios if self.scenarios else None


@dataclass(frozen=True)
class RiskLevel:
    level: int
    outer_count: int
    inner: InnerSchedule
    stats: LevelStats

    def to_row(self) -> dict:
        return {
            "level": self.level,
            "N": self.outer_count,
            "mean": self.stats.mean(),
            "var": self.stats.variance() if self.stats.count >= 2 else None,
            "cost": self.stats.mean_cost(),
            "kurtosis": self.stats.kurtosis() if self.stats.count >= 2 else None,
            "inner_min": self.inner.minimum,
            "inner_mean": self.inner.mean(),
            "inner_max": self.inner.maximum,
        }


@dataclass(frozen=True)
class VarCvarResult:
    quantile: float
    value_at_risk: float
    cvar: float
    excess: float
    eta_at_var: float | None
    iterations: int
    stop_reason: str
    bracket: tuple[float, float]
    evaluations: list[dict]
    tolerances: dict
    total_cost: float

    def to_dict(self) -> dict:
        return {
            "quantile": self.quantile,
            "var": self.value_at_risk,
            "cvar": self.cvar,
            "excess": self.excess,
            "eta_at_var": self.eta_at_var,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "bracket": list(self.bracket),
            "evaluations": self.evaluations,
            "tolerances": self.tolerances,
            "total_cost": self.total_cost,
        }


@dataclass(frozen=True)
class RiskEstimate:
    eta: float
    std_error: float
    levels: list[RiskLevel]
    total_inner_samples: float
    total_outer_samples: int
    total_cost: float
    method: str
    functional: str = "indicator"
    threshold: float = 0.0
    eps: float | None = None
    variance_slope: float | None = None
    estimate: MlmcEstimate | None = None
    var_result: VarCvarResult | None = None
    diagnostics: dict = field(default_factory=dict)

    def level_table(self) -> list[dict]:
        return [level.to_row() for level in self.levels]


def _clamp(functional: str, value: float) -> float:
    if functional == "indicator":
        return min(1.0, max(0.0, value))
    return max(0.0, value)


# ---------------------------------------------------------------------------
# 内层抽样
# ---------------------------------------------------------------------------
class _InnerStream:
    """单个情景的内层样本缓冲，按需向后续取"""

    def __init__(self, problem: RiskProblem, scenario, rng: np.random.Generator):
        self.problem = problem
        self.scenario = scenario
        self.rng = rng
        self.values = np.empty(0)

    def take(self, n: int) -> np.ndarray:
        if n > self.values.size:
            extra = np.asarray(self.problem.inner_sampler(self.scenario, self.rng, n - self.values.size), dtype=float)
            if not np.all(np.isfinite(extra)):
                raise InvalidArgumentError("inner_sampler 返回了非有限值")
            self.values = np.concatenate([self.values, extra])
        return self.values[:n]


def inner_mean(problem: RiskProblem, y, n: int, key: StreamKey) -> tuple[float, float]:
    """(Ẑ, σ̂)：n 个内层样本的均值与样本标准差"""
    if n < 2:
        raise InvalidArgumentError(f"内层样本数必须 ≥ 2: {n}")
    samples = _InnerStream(problem, y, generator_for(key)).take(n)
    return float(np.mean(samples)), float(np.std(samples, ddof=1))


def _outer_scenarios(problem: RiskProblem, seed: int, level: int, start: int, count: int, purpose=Purpose.OUTER):
    return block_draws(seed, level, purpose, start, count, problem.outer_sampler)


def required_samples(mu: float, sigma: float, level: int, cfg: AdaptiveConfig, eps: float) -> int:
    """情景所需的内层样本数。

    目标 N₀4^l·max(2^{−l}, min(1, (√N₀·2^l·|μ|/(Cσ))^{−r}))，
    上限 max(c_N/ε, C²σ²/μ²)，结果夹在 [N₀2^l, N₀4^l] 内。
    μ = 0 时取 N₀4^l，σ = 0（μ ≠ 0）时取 N₀2^l。
    """
    n0 = cfg.n0_inner
    n_min = n0 * 2**level
    n_max = n0 * 4**level
    if mu == 0.0:
        return n_max
    if sigma == 0.0:
        return n_min
    scaled = cfg.confidence_const * sigma / abs(mu)
    if scaled == 0.0:
        return n_min
    ratio = math.sqrt(n0) * 2.0**level / scaled
    fraction = 1.0 if ratio <= 1.0 else max(2.0**-level, ratio ** (-cfg.exponent_r))
    target = n0 * 4.0**level * fraction
    cap = max(cfg.eps_cap_const / eps, scaled * scaled)
    required = min(target, cap, float(n_max))
    return max(n_min, int(math.ceil(required)))


def _adaptive_count(stream: _InnerStream, problem: RiskProblem, level: int, cfg: AdaptiveConfig, eps: float) -> int:
    """在 N₀·2^k 网格上倍增，直到样本数不小于第 level 层规则的要求"""
    if cfg.mode == "perfect":
        mu = float(np.squeeze(problem.oracle.conditional_mean(stream.scenario))) - problem.threshold
        sigma = float(np.squeeze(problem.oracle.conditional_std(stream.scenario)))
        n = required_samples(mu, sigma, level, cfg, eps)
        stream.take(n)
        return n
    n = cfg.n0_inner
    while True:
        samples = stream.take(n)
        mu = float(np.mean(samples)) - problem.threshold
        sigma = float(np.std(samples, ddof=1))
        if n >= required_samples(mu, sigma, level, cfg, eps):
            return n
        n *= 2


def _adaptive_pair(
    problem: RiskProblem,
    y,
    level: int,
    cfg: AdaptiveConfig,
    key: StreamKey,
    eps: float,
) -> tuple[_InnerStream, int, int]:
    if level < 0:
        raise InvalidArgumentError(f"level 不能为负数: {level}")
    if not eps > 0:
        raise InvalidArgumentError(f"eps 必须为正数: {eps}")
    if cfg.mode == "perfect" and problem.oracle is None:
        raise InvalidArgumentError("perfect 模式需要解析 oracle")
    stream = _InnerStream(problem, y, generator_for(key))
    n_fine = _adaptive_count(stream, problem, level, cfg, eps)
    n_coarse = 0
    if level > 0:
        # required_samples 对层号单调，两条规则又走同一网格，粗层不会越过细层
        n_coarse = min(_adaptive_count(stream, problem, level - 1, cfg, eps), n_fine)
    return stream, n_fine, n_coarse


def adaptive_inner_counts(
    problem: RiskProblem,
    y,
    level: int,
    cfg: AdaptiveConfig,
    key: StreamKey,
    eps: float,
) -> tuple[int, int]:
    """(n_fine, n_coarse)：情景在第 level 层的细/粗内层样本数，第 0 层 n_coarse = 0"""
    _, n_fine, n_coarse = _adaptive_pair(problem, y, level, cfg, key, eps)
    return n_fine, n_coarse


def adaptive_inner(
    problem: RiskProblem,
    y,
    level: int,
    cfg: AdaptiveConfig,
    key: StreamKey,
    eps: float,
) -> tuple[float, float, float]:
    """(h_fine, h_coarse, cost)。

    细层按第 level 层规则在情景的内层流上倍增样本；粗层对同一条流的前缀按第 level−1 层规则决定
    样本数（第 0 层粗层恒为 0），两者都停在最小样本数时粗层恰为细层的前一半。
    cost = 细层内层样本数 × 组合规模。
    """
    stream, n_fine, n_coarse = _adaptive_pair(problem, y, level, cfg, key, eps)
    values = stream.take(n_fine)
    h_fine = 1.0 if float(np.mean(values)) - problem.threshold > 0.0 else 0.0
    h_coarse = 0.0
    if level > 0:
        h_coarse = 1.0 if float(np.mean(values[:n_coarse])) - problem.threshold > 0.0 else 0.0
    return h_fine, h_coarse, float(n_fine * problem.portfolio_size)


# ---------------------------------------------------------------------------
# 层采样器
# ---------------------------------------------------------------------------
class _NestedSamplerBase:
    first_level = 0

    def __init__(self, problem: RiskProblem, cfg: NestedConfig):
        self.problem = problem
        self.cfg = cfg
        self.max_level = cfg.max_level
        self._lock = threading.Lock()
        self.schedules: dict[int, InnerSchedule] = {}

    def _record(self, level: int, counts) -> None:
        schedule = InnerSchedule.from_counts(counts)
        with self._lock:
            self.schedules[level] = self.schedules.get(level, InnerSchedule()).merge(schedule)

    def _scenario_values(self, level: int, index: int, scenario) -> tuple[float, int]:
        raise NotImplementedError

    def sample(self, level: int, start: int, count: int) -> LevelStats:
        if not 0 <= level <= self.max_level:
            raise InvalidArgumentError(f"level 必须在 0~{self.max_level} 之间: {level}")

        def chunk(chunk_start: int, chunk_count: int) -> LevelStats:
            scenarios = _outer_scenarios(self.problem, self.cfg.seed, level, chunk_start, chunk_count)
            values = np.empty(chunk_count)
            drawn = np.empty(chunk_count, dtype=np.int64)
            for i in range(chunk_count):
                values[i], drawn[i] = self._scenario_values(level, chunk_start + i, scenarios[i])
            self._record(level, drawn)
            return LevelStats.from_values(level, values, drawn * float(self.problem.portfolio_size))

        return sample_in_blocks(level, chunk, start, count, self.cfg.workers)

    def risk_levels(self, estimate: MlmcEstimate) -> list[RiskLevel]:
        return [
            RiskLevel(stats.level, stats.count, self.schedules.get(stats.level, InnerSchedule()), stats)
            for stats in estimate.levels
        ]


class UniformNestedSampler(_NestedSamplerBase):
    """第 l 层：同一情景的 N_l 个内层样本给细层，前 N_l/2 个给粗层"""

    def __init__(self, problem: RiskProblem, cfg: NestedConfig, functional: str = "indicator"):
        super().__init__(problem, cfg)
        if functional not in FUNCTIONALS:
            raise InvalidArgumentError(f"未知泛函: {functional}")
        self.functional = functional

    def _scenario_values(self, level: int, index: int, scenario) -> tuple[float, int]:
        n = self.cfg.inner_samples(level)
        rng = stream_generator(self.cfg.seed, level, Purpose.INNER, index)
        samples = _InnerStream(self.problem, scenario, rng).take(n)
        threshold = self.problem.threshold
        fine = float(apply_functional(self.functional, float(np.mean(samples)) - threshold))
        if level == 0:
            return fine, n
        coarse = float(apply_functional(self.functional, float(np.mean(samples[: n // 2])) - threshold))
        return fine - coarse, n


class AdaptiveNestedSampler(_NestedSamplerBase):
    def __init__(self, problem: RiskProblem, cfg: NestedConfig, adaptive: AdaptiveConfig, eps: float):
        super().__init__(problem, cfg)
        if adaptive.mode == "perfect" and problem.oracle is None:
            raise InvalidArgumentError("perfect 模式需要解析 oracle")
        self.adaptive = adaptive
        self.eps = eps

    def _scenario_values(self, level: int, index: int, scenario) -> tuple[float, int]:
        key = StreamKey(self.cfg.seed, level, index, Purpose.INNER)
        fine, coarse, cost = adaptive_inner(self.problem, scenario, level, self.adaptive, key, self.eps)
        return fine - coarse, int(round(cost / self.problem.portfolio_size))


# ---------------------------------------------------------------------------
# 估计器
# ---------------------------------------------------------------------------
def nested_mc(
    problem: RiskProblem,
    outer: int,
    inner: int,
    level: int = 0,
    seed: int = 0,
    functional: str = "indicator",
    workers: int = 1,
) -> RiskEstimate:
    """η̂ = (1/M)Σ_m H(Ẑ_N(y_m) − L)，随机流与多层采样器第 level 层一致"""
    if outer < 1:
        raise InvalidArgumentError(f"外层样本数必须 ≥ 1: {outer}")
    if inner < 2:
        raise InvalidArgumentError(f"内层样本数必须 ≥ 2: {inner}")
    schedule = InnerSchedule()
    lock = threading.Lock()

    def chunk(chunk_start: int, chunk_count: int) -> LevelStats:
        nonlocal schedule
        scenarios = _outer_scenarios(problem, seed, level, chunk_start, chunk_count)
        values = np.empty(chunk_count)
        for i in range(chunk_count):
            z_hat, _ = inner_mean(problem, scenarios[i], inner, StreamKey(seed, level, chunk_start + i, Purpose.INNER))
            values[i] = apply_functional(functional, z_hat - problem.threshold)
        with lock:
            schedule = schedule.merge(InnerSchedule.from_counts(np.full(chunk_count, inner)))
        return LevelStats.from_values(level, values, float(inner * problem.portfolio_size))

    stats = sample_in_blocks(level, chunk, 0, outer, workers)
    std_error = math.sqrt(stats.variance() / stats.count) if stats.count >= 2 else math.nan
    return RiskEstimate(
        eta=_clamp(functional, stats.mean()),
        std_error=std_error,
        levels=[RiskLevel(level, stats.count, schedule, stats)],
        total_inner_samples=float(outer) * inner * problem.portfolio_size,
        total_outer_samples=outer,
        total_cost=stats.cost_total,
        method="nested_mc",
        functional=functional,
        threshold=problem.threshold,
    )


def iterative_inner_count(stream: _InnerStream, threshold: float, eps: float, n0: int, n_max: int) -> int:
    """单层迭代自适应：倍增内层样本直到 N·|μ̂| ≥ σ̂·ε^{−1/2}，不超过 n_max。μ̂ = 0 时取满 n_max。"""
    n = min(n0, n_max)
    while n < n_max:
        samples = stream.take(n)
        mu = float(np.mean(samples)) - threshold
        sigma = float(np.std(samples, ddof=1))
        if mu != 0.0 and n * abs(mu) * math.sqrt(eps) >= sigma:
            break
        n = min(2 * n, n_max)
    return n


def nested_mc_iterative(
    problem: RiskProblem,
    eps: float,
    outer_const: float = 1.0,
    inner_const: float = 1.0,
    n0_inner: int = 16,
    level: int = 0,
    seed: int = 0,
    workers: int = 1,
) -> RiskEstimate:
    """迭代自适应的单层嵌套 MC：M = ⌈c_M ε⁻²⌉ 个情景，每个情景的内层样本从 N₀ 起倍增，
    上限 max(N₀, ⌈c_N/ε⌉)，期望开销 O(ε^{−5/2})。随机流与 nested_mc 相同。"""
    if not eps > 0:
        raise InvalidArgumentError(f"eps 必须为正数: {eps}")
    if n0_inner < 2:
        raise InvalidArgumentError(f"n0_inner 必须 ≥ 2: {n0_inner}")
    outer = math.ceil(outer_const * eps**-2)
    n_max = max(n0_inner, math.ceil(inner_const / eps))
    schedule = InnerSchedule()
    lock = threading.Lock()

    def chunk(chunk_start: int, chunk_count: int) -> LevelStats:
        nonlocal schedule
        scenarios = _outer_scenarios(problem, seed, level, chunk_start, chunk_count)
        values = np.empty(chunk_count)
        drawn = np.empty(chunk_count, dtype=np.int64)
        for i in range(chunk_count):
            key = StreamKey(seed, level, chunk_start + i, Purpose.INNER)
            stream = _InnerStream(problem, scenarios[i], generator_for(key))
            drawn[i] = iterative_inner_count(stream, problem.threshold, eps, n0_inner, n_max)
            values[i] = 1.0 if float(np.mean(stream.take(int(drawn[i])))) - problem.threshold > 0.0 else 0.0
        with lock:
            schedule = schedule.merge(InnerSchedule.from_counts(drawn))
        return LevelStats.from_values(level, values, drawn * float(problem.portfolio_size))

    stats = sample_in_blocks(level, chunk, 0, outer, workers)
    std_error = math.sqrt(stats.variance() / stats.count) if stats.count >= 2 else math.nan
    logger.info(
        "迭代嵌套 MC[%s]: eps=%g M=%d N∈[%s, %s] cost=%.4g",
        problem.name,
        eps,
        outer,
        schedule.minimum,
        schedule.maximum,
        stats.cost_total,
    )
    return RiskEstimate(
        eta=_clamp("indicator", stats.mean()),
        std_error=std_error,
        levels=[RiskLevel(level, stats.count, schedule, stats)],
        total_inner_samples=float(schedule.total) * problem.portfolio_size,
        total_outer_samples=outer,
        total_cost=stats.cost_total,
        method="nested_mc_iterative",
        threshold=problem.threshold,
        eps=eps,
    )


def _risk_estimate(
    sampler: _NestedSamplerBase,
    estimate: MlmcEstimate,
    method: str,
    functional: str,
    eps: float,
) -> RiskEstimate:
    levels = sampler.risk_levels(estimate)
    slope = None
    if estimate.rates is not None and math.isfinite(estimate.rates.beta):
        slope = -estimate.rates.beta
    return RiskEstimate(
        eta=_clamp(functional, estimate.value),
        std_error=estimate.std_error,
        levels=levels,
        total_inner_samples=float(sum(level.inner.total for level in levels)) * sampler.problem.portfolio_size,
        total_outer_samples=int(sum(level.outer_count for level in levels)),
        total_cost=estimate.total_cost,
        method=method,
        functional=functional,
        threshold=sampler.problem.threshold,
        eps=eps,
        variance_slope=slope,
        estimate=estimate,
    )


def nested_mlmc_uniform(
    problem: RiskProblem,
    eps: float,
    cfg: NestedConfig | None = None,
    functional: str = "indicator",
) -> RiskEstimate:
    cfg = cfg or NestedConfig()
    sampler = UniformNestedSampler(problem, cfg, functional)
    estimate = run_multilevel(
        sampler,
        eps,
        pilot_samples=cfg.pilot_outer,
        initial_levels=cfg.initial_levels,
        max_level=cfg.max_level,
        label=f"nested-uniform[{problem.name},{functional}]",
    )
    return _risk_estimate(sampler, estimate, "uniform", functional, eps)


def nested_mlmc_adaptive(
    problem: RiskProblem,
    eps: float,
    adaptive: AdaptiveConfig | None = None,
    cfg: NestedConfig | None = None,
) -> RiskEstimate:
    cfg = cfg or NestedConfig()
    adaptive = adaptive or AdaptiveConfig()
    sampler = AdaptiveNestedSampler(problem, cfg, adaptive, eps)
    estimate = run_multilevel(
        sampler,
        eps,
        pilot_samples=cfg.pilot_outer,
        initial_levels=cfg.initial_levels,
        max_level=cfg.max_level,
        label=f"nested-adaptive[{problem.name},{adaptive.mode}]",
    )
    return _risk_estimate(sampler, estimate, f"adaptive_{adaptive.mode}", "indicator", eps)


def profile_risk_levels(sampler: _NestedSamplerBase, levels: list[int], samples: int) -> list[LevelStats]:
    """固定外层样本数的逐层剖析（方差衰减率研究）"""
    if samples < 2:
        raise InvalidArgumentError(f"samples 必须 ≥ 2: {samples}")
    return [sampler.sample(level, 0, samples) for level in levels]


def variance_slope(levels: list[LevelStats]) -> float:
    """log₂ Var_l 关于 l 的拟合斜率（首层不参与）"""
    return -fit_rates(levels).beta


# ---------------------------------------------------------------------------
# VaR / CVaR
# ---------------------------------------------------------------------------
def _pilot_means(problem: RiskProblem, cfg: NestedConfig) -> np.ndarray:
    scenarios = _outer_scenarios(problem, cfg.seed, 0, 0, cfg.pilot_scenarios, purpose=Purpose.PILOT)
    means = np.empty(cfg.pilot_scenarios)
    for i in range(cfg.pilot_scenarios):
        means[i], _ = inner_mean(problem, scenarios[i], cfg.pilot_inner, StreamKey(cfg.seed, 0, i, Purpose.PILOT_INNER))
    return means


def var_cvar(
    problem: RiskProblem,
    quantile_a: float,
    eps: float,
    adaptive: AdaptiveConfig | None = None,
    cfg: NestedConfig | None = None,
) -> VarCvarResult:
    """二分法求 η(L) = a 的根得到 VaR，再以正部泛函估计 CVaR = VaR + E[(E[X|Y] − VaR)₊]/a。

    每次 η(L) 评估用自适应嵌套 MLMC，精度 (eps/2)·ρ̂(L)（ρ̂ 为试探情景条件均值的核密度），
    所有评估共用同一 seed 的随机流。
    """
    if not 0.0 < quantile_a < 1.0:
        raise InvalidArgumentError(f"quantile_a 必须在 (0, 1) 内: {quantile_a}")
    if not eps > 0:
        raise InvalidArgumentError(f"eps 必须为正数: {eps}")
    cfg = cfg or NestedConfig()
    adaptive = adaptive or AdaptiveConfig()

    pilot = _pilot_means(problem, cfg)
    n_pilot = pilot.size
    diagnostics = {"pilot_min": float(pilot.min()), "pilot_max": float(pilot.max()), "quantile": quantile_a}
    if not 1.0 / n_pilot <= quantile_a <= 1.0 - 1.0 / n_pilot:
        raise BracketError(f"分位水平 {quantile_a} 超出试探样本可分辨范围（{n_pilot} 个情景）", diagnostics)
    density = gaussian_kde(pilot)
    evaluations: list[dict] = []
    total_cost = 0.0

    def eta_at(level: float) -> RiskEstimate:
        nonlocal total_cost
        rho = max(float(density(level)[0]), MIN_DENSITY)
        estimate = nested_mlmc_adaptive(problem.with_threshold(level), 0.5 * eps * rho, adaptive, cfg)
        total_cost += estimate.total_cost
        evaluations.append({"L": level, "eta": estimate.eta, "std_error": estimate.std_error, "density": rho})
        logger.debug("VaR 二分: L=%.6g η=%.6g ± %.3g", level, estimate.eta, estimate.std_error)
        return estimate

    center = 1.0 - quantile_a
    width = max(0.5 * min(quantile_a, 1.0 - quantile_a), 4.0 * math.sqrt(quantile_a * (1.0 - quantile_a) / n_pilot))
    lo = float(np.quantile(pilot, max(0.0, center - width)))
    hi = float(np.quantile(pilot, min(1.0, center + width)))
    if not (eta_at(lo).eta >= quantile_a and eta_at(hi).eta <= quantile_a):
        logger.warning("VaR 初始区间 [%.6g, %.6g] 未包含根，扩展到试探样本范围", lo, hi)
        lo, hi = float(pilot.min()), float(pilot.max())
        if not (eta_at(lo).eta >= quantile_a and eta_at(hi).eta <= quantile_a):
            raise BracketError(
                f"无法为分位水平 {quantile_a} 建立二分区间",
                {**diagnostics, "evaluations": evaluations},
            )

    stop_reason = "bracket_width"
    value_at_risk = 0.5 * (lo + hi)
    eta_at_var = None
    iterations = 0
    while hi - lo > eps:
        if iterations >= MAX_BISECTIONS:
            stop_reason = "max_iterations"
            break
        iterations += 1
        mid = 0.5 * (lo + hi)
        estimate = eta_at(mid)
        if abs(estimate.eta - quantile_a) <= CI_Z * estimate.std_error:
            stop_reason = "ci_contains_quantile"
            value_at_risk, eta_at_var = mid, estimate.eta
            break
        if estimate.eta > quantile_a:
            lo = mid
        else:
            hi = mid
        value_at_risk = 0.5 * (lo + hi)

    excess_tolerance = 0.5 * quantile_a * eps
    excess = nested_mlmc_uniform(problem.with_threshold(value_at_risk), excess_tolerance, cfg, functional="excess")
    total_cost += excess.total_cost
    cvar = value_at_risk + max(0.0, excess.eta) / quantile_a
    logger.info(
        "VaR/CVaR[%s] a=%g: VaR=%.6g CVaR=%.6g（%s，%d 次二分）",
        problem.name,
        quantile_a,
        value_at_risk,
        cvar,
        stop_reason,
        iterations,
    )
    return VarCvarResult(
        quantile=quantile_a,
        value_at_risk=value_at_risk,
        cvar=max(cvar, value_at_risk),
        excess=excess.eta,
        eta_at_var=eta_at_var,
        iterations=iterations,
        stop_reason=stop_reason,
        bracket=(lo, hi),
        evaluations=evaluations,
        tolerances={"var": eps, "excess": excess_tolerance},
        total_cost=total_cost,
    )
