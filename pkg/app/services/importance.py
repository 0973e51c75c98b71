"""逐层重要性抽样参数 θ_l 的优化与 IS-MLMC 估计

两种优化方式：
- SAA：固定一批试探样本，对样本平均目标做带回溯的 Newton 迭代
- Robbins–Monro：带投影的随机逼近，可离线运行，也可与估计同时进行（自适应 IS-MLMC）

目标函数为第 l 层修正项在 θ 下的二阶矩
    V(θ) = E[s²·exp(−⟨θ, W_T⟩ + ½|θ|²T)]
第 1 层 s² = G²，第 l ≥ 2 层 s² = M^l/((M−1)T)·(G_f − G_c)²。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from app.services.mlmc import (
    LevelStats,
    MlmcEstimate,
    run_mlmc,
    run_multilevel,
    sample_in_blocks,
)
from app.services.paths import (
    draw_increments,
    evaluate_payoffs,
    level_cost,
    level_payoff_batch,
    simulate_increments,
)
from app.services.sde import MlmcConfig, Payoff, SdeModel
from app.utils.errors import (
    ConvergenceError,
    DegenerateObjectiveError,
    InvalidArgumentError,
    StateError,
)
from app.utils.streams import Purpose

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# 常量
# ---------------------------------------------------------------------------
METHODS = ("saa", "robbins_monro", "zero")
DEFAULT_PILOT_SIZE = 10_000
NEWTON_TOL = 1e-6
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 60
TRACKER_EXPONENT = 0.6
PROJECTION_SLACK = 1e-12


# ---------------------------------------------------------------------------
# θ 计划表
# ---------------------------------------------------------------------------
@dataclass
class ThetaSchedule:
    """各层 θ_l 及其来源。超出最深优化层时复用最深层的 θ。"""

    dim: int
    thetas: dict[int, np.ndarray] = field(default_factory=dict)
    method: str = "zero"
    diagnostics: dict[int, dict] = field(default_factory=dict)
    radius: float | None = None
    _extended: set = field(default_factory=set, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"未知的优化方法: {self.method}")
        for level, theta in self.thetas.items():
            theta = np.asarray(theta, dtype=float).reshape(-1)
            if theta.shape != (self.dim,) or not np.all(np.isfinite(theta)):
                raise InvalidArgumentError(f"第 {level} 层 θ 非法: {theta}")
            if self.radius is not None and np.linalg.norm(theta) > self.radius * (1 + PROJECTION_SLACK):
                raise InvalidArgumentError(f"第 {level} 层 θ 超出投影半径 {self.radius}")
            self.thetas[level] = theta

    @classmethod
    def zero(cls, dim: int) -> "ThetaSchedule":
        return cls(dim=dim, method="zero")

    def theta_for(self, level: int) -> np.ndarray:
        if level in self.thetas:
            return self.thetas[level]
        if not self.thetas:
            return np.zeros(self.dim)
        deepest = max(self.thetas)
        if level < deepest:
            return np.zeros(self.dim)
        if level not in self._extended:
            self._extended.add(level)
            logger.warning("θ 计划表未覆盖第 %d 层，复用第 %d 层的 θ", level, deepest)
        return self.thetas[deepest]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "thetas": {str(level): theta.tolist() for level, theta in sorted(self.thetas.items())},
            "diagnostics": {str(level): info for level, info in sorted(self.diagnostics.items())},
        }


# ---------------------------------------------------------------------------
# SAA
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SaaProblem:
    level: int
    fine: np.ndarray
    coarse: np.ndarray | None
    w_T: np.ndarray
    normalization: float
    horizon: float

    def __post_init__(self):
        if self.w_T.ndim != 2 or self.w_T.shape[0] != self.fine.shape[0]:
            raise InvalidArgumentError("w_T 必须为 (Ñ, q) 且与收益样本数一致")
        if not np.any(self.second_moment_terms() != 0.0):
            raise DegenerateObjectiveError(f"第 {self.level} 层试探样本的收益贡献全部为 0")

    def second_moment_terms(self) -> np.ndarray:
        """逐样本 s_k²（已含层归一化因子）"""
        difference = self.fine if self.coarse is None else self.fine - self.coarse
        return self.normalization * difference * difference


def collect_saa_problem(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    level: int,
    pilot_size: int = DEFAULT_PILOT_SIZE,
) -> SaaProblem:
    """在 θ = 0 下用 optimizer 随机流采集 Ñ_l 个试探样本"""
    if pilot_size < 1:
        raise InvalidArgumentError(f"pilot_size 必须为正整数: {pilot_size}")
    batch = level_payoff_batch(
        model, payoff, cfg, np.zeros(model.dim_noise), level, 0, pilot_size, purpose=Purpose.OPTIMIZER
    )
    return SaaProblem(
        level=level,
        fine=batch.payoff_fine,
        coarse=batch.payoff_coarse,
        w_T=batch.w_T,
        normalization=cfg.saa_normalization(level, model.horizon),
        horizon=model.horizon,
    )


def _saa_terms(problem: SaaProblem, theta: np.ndarray) -> np.ndarray:
    exponent = -problem.w_T @ theta + 0.5 * float(theta @ theta) * problem.horizon
    return problem.second_moment_terms() * np.exp(exponent)


def _saa_value(problem: SaaProblem, theta: np.ndarray) -> float:
    return float(np.mean(_saa_terms(problem, theta)))


def saa_objective(problem: SaaProblem, theta) -> tuple[float, np.ndarray, np.ndarray]:
    """样本平均目标 V(θ) 及其解析梯度与 Hessian"""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if not np.all(np.isfinite(theta)):
        raise InvalidArgumentError("theta 包含非有限值")
    if theta.shape != (problem.w_T.shape[1],):
        raise InvalidArgumentError(f"theta 长度必须为 {problem.w_T.shape[1]}")
    terms = _saa_terms(problem, theta)
    count = terms.shape[0]
    value = float(np.mean(terms))
    u = theta * problem.horizon - problem.w_T
    weighted = terms[:, np.newaxis] * u
    gradient = weighted.sum(axis=0) / count
    hessian = problem.horizon * value * np.eye(theta.shape[0]) + weighted.T @ u / count
    return value, gradient, hessian


def _newton(problem: SaaProblem, tol: float, max_iter: int) -> tuple[np.ndarray, dict]:
    theta = np.zeros(problem.w_T.shape[1])
    for iteration in range(max_iter + 1):
        value, gradient, hessian = saa_objective(problem, theta)
        relative = float(np.linalg.norm(gradient)) / value
        logger.debug("SAA level=%d iter=%d |θ|=%.6g V=%.6g |∇V|/V=%.3g",
                     problem.level, iteration, np.linalg.norm(theta), value, relative)
        if relative <= tol:
            return theta, {"iterations": iteration, "gradient_norm": relative, "objective": value}
        if iteration == max_iter:
            break
        step = np.linalg.solve(hessian, gradient)
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = theta - scale * step
            if _saa_value(problem, candidate) < value:
                break
            scale *= 0.5
        else:
            # 已到浮点精度下的最小值，无法继续下降
            logger.debug("SAA level=%d 线搜索停滞，|∇V|/V=%.3g", problem.level, relative)
            return theta, {"iterations": iteration, "gradient_norm": relative, "objective": value}
        theta = candidate
    raise ConvergenceError(
        f"第 {problem.level} 层 SAA Newton 迭代 {max_iter} 次未收敛", last_iterate=theta
    )


def solve_saa(problem: SaaProblem, tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
    """Newton–Raphson 求 argmin V(θ)；以 |∇V|/V ≤ tol 作为停止条件（对收益缩放不变）"""
    if not tol > 0 or max_iter < 1:
        raise InvalidArgumentError(f"非法的 tol/max_iter: {tol}, {max_iter}")
    theta, _ = _newton(problem, tol, max_iter)
    return theta


# ---------------------------------------------------------------------------
# Robbins–Monro
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RmConfig:
    """γ_n = gamma0/(n + n0)，投影集合为半径 radius 的闭球"""

    radius: float = 5.0
    gamma0: float = 1.0
    n0: float = 100.0
    iterations: int = 10_000
    averaging: bool = False
    normalize: bool = True

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidArgumentError(f"radius 必须为正数: {self.radius}")
        if not self.gamma0 >= 0:
            raise InvalidArgumentError(f"gamma0 不能为负数: {self.gamma0}")
        if not self.n0 > 0:
            raise InvalidArgumentError(f"n0 必须为正数: {self.n0}")
        if self.iterations < 1:
            raise InvalidArgumentError(f"iterations 必须为正整数: {self.iterations}")

    def step_size(self, n: int) -> float:
        return self.gamma0 / (n + self.n0)


@dataclass(frozen=True)
class RmSample:
    """一次 RM 更新所用的样本。

    s2 为已归一化的 s²，w_T 为该样本驱动布朗运动的终值；
    样本在漂移平移 phi 下生成（None 表示原测度）。
    """

    s2: float
    w_T: np.ndarray
    horizon: float
    phi: np.ndarray | None = None


def project_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(theta))
    if norm > radius:
        return theta * (radius / norm)
    return theta


def rm_direction(theta: np.ndarray, sample: RmSample) -> np.ndarray:
    """H_l(θ, ·)，样本在 φ 下生成时乘以似然比还原到原测度"""
    if sample.s2 == 0.0:
        return np.zeros_like(theta)
    horizon = sample.horizon
    w = sample.w_T
    log_ratio = 0.0
    if sample.phi is not None and np.any(sample.phi != 0.0):
        phi = sample.phi
        log_ratio = -float(phi @ w) - 0.5 * float(phi @ phi) * horizon
        w = w + phi * horizon
    exponent = -float(theta @ w) + 0.5 * float(theta @ theta) * horizon + log_ratio
    return (theta * horizon - w) * sample.s2 * math.exp(exponent)


def tracker_sample(sample: RmSample) -> float:
    """V(φ) 的单样本无偏估计 s²·exp(−2⟨φ, w⟩ − |φ|²T)"""
    if sample.phi is None:
        return sample.s2
    phi = sample.phi
    return sample.s2 * math.exp(-2.0 * float(phi @ sample.w_T) - float(phi @ phi) * sample.horizon)


def rm_step(
    level: int,
    theta_n,
    sample: RmSample,
    n: int,
    rmc: RmConfig,
    scale: float = 1.0,
) -> np.ndarray:
    """θ_{n+1} = Proj[θ_n − γ_{n+1}·H_l(θ_n, ·)/scale]"""
    theta_n = np.asarray(theta_n, dtype=float).reshape(-1)
    if np.linalg.norm(theta_n) > rmc.radius * (1 + PROJECTION_SLACK):
        raise InvalidArgumentError(f"第 {level} 层 θ_n 超出投影半径 {rmc.radius}")
    if not scale > 0:
        raise InvalidArgumentError(f"scale 必须为正数: {scale}")
    direction = rm_direction(theta_n, sample)
    if not np.any(direction != 0.0):
        return theta_n
    return project_ball(theta_n - rmc.step_size(n + 1) * direction / scale, rmc.radius)


class RobbinsMonroState:
    """单层 RM 递推的可变状态：当前迭代、步数、V(θ_n) 跟踪量与 Polyak 平均"""

    def __init__(self, level: int, dim: int, rmc: RmConfig):
        self.level = level
        self.rmc = rmc
        self.theta = np.zeros(dim)
        self.n = 0
        self.tracker: float | None = None
        self.average = np.zeros(dim)
        self.last_step = 0.0

    def update(self, sample: RmSample) -> np.ndarray:
        scale = 1.0
        if self.rmc.normalize:
            estimate = tracker_sample(sample)
            if self.tracker is None:
                if estimate > 0.0:
                    self.tracker = estimate
            else:
                self.tracker += (self.n + 1) ** -TRACKER_EXPONENT * (estimate - self.tracker)
            if self.tracker is not None and self.tracker > 0.0:
                scale = self.tracker
        previous = self.theta
        self.theta = rm_step(self.level, previous, sample, self.n, self.rmc, scale)
        if np.linalg.norm(self.theta) > self.rmc.radius * (1 + PROJECTION_SLACK):
            raise StateError(f"第 {self.level} 层 RM 迭代越出投影球")
        self.last_step = float(np.linalg.norm(self.theta - previous))
        self.n += 1
        self.average += (self.theta - self.average) / self.n
        return self.theta

    def frozen(self) -> np.ndarray:
        return self.average.copy() if self.rmc.averaging and self.n > 0 else self.theta.copy()

    def diagnostics(self) -> dict:
        return {
            "iterations": self.n,
            "theta_norm": float(np.linalg.norm(self.frozen())),
            "final_step": self.last_step,
            "step_size": self.rmc.step_size(self.n),
            "tracker": self.tracker,
        }


def _level_s2(cfg: MlmcConfig, level: int, horizon: float, raw_difference: float) -> float:
    return cfg.saa_normalization(level, horizon) * raw_difference * raw_difference


def run_robbins_monro(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    level: int,
    rmc: RmConfig,
    iterations: int | None = None,
) -> tuple[np.ndarray, dict]:
    """离线运行第 level 层的投影 RM 递推（optimizer 随机流），返回冻结的 θ 与诊断"""
    iterations = rmc.iterations if iterations is None else iterations
    state = RobbinsMonroState(level, model.dim_noise, rmc)
    dw = draw_increments(model, cfg, level, 0, iterations, purpose=Purpose.OPTIMIZER)
    for k in range(iterations):
        phi = state.theta
        batch = evaluate_payoffs(model, payoff, phi, simulate_increments(model, cfg, phi, level, dw[k : k + 1]))
        sample = RmSample(
            s2=_level_s2(cfg, level, model.horizon, float(batch.raw_differences()[0])),
            w_T=batch.w_T[0],
            horizon=model.horizon,
            phi=phi,
        )
        state.update(sample)
    logger.info("RM level=%d 完成 %d 次迭代 |θ|=%.4g", level, iterations, np.linalg.norm(state.frozen()))
    return state.frozen(), state.diagnostics()


# ---------------------------------------------------------------------------
# 计划表构建
# ---------------------------------------------------------------------------
def build_saa_schedule(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    levels: list[int],
    pilot_size: int = DEFAULT_PILOT_SIZE,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> ThetaSchedule:
    thetas, diagnostics = {}, {}
    for level in levels:
        try:
            problem = collect_saa_problem(model, payoff, cfg, level, pilot_size)
        except DegenerateObjectiveError:
            logger.warning("第 %d 层试探样本全部为 0，θ 取 0", level)
            thetas[level] = np.zeros(model.dim_noise)
            diagnostics[level] = {"degenerate": True}
            continue
        theta, info = _newton(problem, tol, max_iter)
        thetas[level] = theta
        diagnostics[level] = {**info, "pilot_size": pilot_size}
        logger.info("SAA level=%d θ=%s (%d 次迭代)", level, np.round(theta, 6).tolist(), info["iterations"])
    return ThetaSchedule(dim=model.dim_noise, thetas=thetas, method="saa", diagnostics=diagnostics)


def build_rm_schedule(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    levels: list[int],
    rmc: RmConfig,
) -> ThetaSchedule:
    thetas, diagnostics = {}, {}
    for level in levels:
        thetas[level], diagnostics[level] = run_robbins_monro(model, payoff, cfg, level, rmc)
    return ThetaSchedule(
        dim=model.dim_noise,
        thetas=thetas,
        method="robbins_monro",
        diagnostics=diagnostics,
        radius=rmc.radius,
    )


# ---------------------------------------------------------------------------
# IS-MLMC
# ---------------------------------------------------------------------------
def measure_level_variance(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    level: int,
    theta,
    samples: int,
) -> float:
    """在 pilot 随机流的新样本上测量 v_l(θ)"""
    batch = level_payoff_batch(model, payoff, cfg, theta, level, 0, samples, purpose=Purpose.PILOT)
    return LevelStats.from_values(level, batch.differences(), batch.cost_per_sample).variance()


def run_is_mlmc(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    eps: float,
    schedule: ThetaSchedule,
    baseline_samples: int = 0,
) -> MlmcEstimate:
    """按 schedule 逐层重加权的 MLMC；baseline_samples > 0 时附带 v_l(0) 与 v_l(θ_l) 对照"""
    if schedule.dim != model.dim_noise:
        raise InvalidArgumentError(f"θ 计划表维度 {schedule.dim} 与噪声维度 {model.dim_noise} 不一致")
    estimate = run_mlmc(model, payoff, cfg, eps, theta_schedule=schedule)
    estimate.diagnostics["schedule"] = schedule.to_dict()
    if baseline_samples > 0:
        zero = np.zeros(model.dim_noise)
        estimate.diagnostics["baseline"] = {
            str(stats.level): {
                "var_zero": measure_level_variance(model, payoff, cfg, stats.level, zero, baseline_samples),
                "var_theta": measure_level_variance(
                    model, payoff, cfg, stats.level, schedule.theta_for(stats.level), baseline_samples
                ),
            }
            for stats in estimate.levels
        }
    return estimate


class AdaptiveIsLevelSampler:
    """边估计边优化的层采样器。

    每层前 burn_in 个样本顺序生成：样本 k 在 θ^{k−1} 下模拟并加权，随后用它推进 RM 递推；
    之后冻结 θ，其余样本按块并行。统计量按与普通 MLMC 相同的块边界累计。
    """

    first_level = 1

    def __init__(self, model: SdeModel, payoff: Payoff, cfg: MlmcConfig, rmc: RmConfig):
        self.model = model
        self.payoff = payoff
        self.cfg = cfg
        self.rmc = rmc
        self.burn_in = min(rmc.iterations, cfg.pilot_samples // 2)
        self.states: dict[int, RobbinsMonroState] = {}
        self.burn_values: dict[int, np.ndarray] = {}
        self.frozen: dict[int, np.ndarray] = {}

    def _run_burn_in(self, level: int) -> None:
        model, cfg = self.model, self.cfg
        state = RobbinsMonroState(level, model.dim_noise, self.rmc)
        values = np.empty(self.burn_in)
        dw = draw_increments(model, cfg, level, 0, self.burn_in)
        for k in range(self.burn_in):
            theta = state.theta
            batch = evaluate_payoffs(model, self.payoff, theta, simulate_increments(model, cfg, theta, level, dw[k : k + 1]))
            values[k] = batch.differences()[0]
            state.update(
                RmSample(
                    s2=_level_s2(cfg, level, model.horizon, float(batch.raw_differences()[0])),
                    w_T=batch.w_T[0],
                    horizon=model.horizon,
                    phi=theta,
                )
            )
        self.states[level] = state
        self.burn_values[level] = values
        self.frozen[level] = state.frozen()
        logger.info("自适应 IS level=%d 冻结 θ=%s", level, np.round(self.frozen[level], 6).tolist())

    def theta_for(self, level: int) -> np.ndarray:
        return self.frozen.get(level, np.zeros(self.model.dim_noise))

    def sample(self, level: int, start: int, count: int) -> LevelStats:
        if level not in self.states:
            if start != 0:
                raise StateError(f"第 {level} 层尚未完成顺序阶段，不能从序号 {start} 开始")
            self._run_burn_in(level)
        burn_values = self.burn_values[level]
        theta = self.frozen[level]

        def chunk(chunk_start: int, chunk_count: int) -> LevelStats:
            stop = chunk_start + chunk_count
            pieces = []
            if chunk_start < self.burn_in:
                pieces.append(burn_values[chunk_start : min(stop, self.burn_in)])
            rest_start = max(chunk_start, self.burn_in)
            if rest_start < stop:
                batch = level_payoff_batch(
                    self.model, self.payoff, self.cfg, theta, level, rest_start, stop - rest_start
                )
                pieces.append(batch.differences())
            values = pieces[0] if len(pieces) == 1 else np.concatenate(pieces)
            return LevelStats.from_values(level, values, level_cost(self.cfg, level))

        return sample_in_blocks(level, chunk, start, count, self.cfg.workers)

    def diagnostics(self) -> dict:
        return {str(level): state.diagnostics() for level, state in sorted(self.states.items())}


def run_adaptive_is_mlmc(
    model: SdeModel,
    payoff: Payoff,
    cfg: MlmcConfig,
    eps: float,
    rmc: RmConfig,
) -> MlmcEstimate:
    sampler = AdaptiveIsLevelSampler(model, payoff, cfg, rmc)
    estimate = run_multilevel(
        sampler,
        eps,
        pilot_samples=cfg.pilot_samples,
        initial_levels=cfg.initial_levels,
        max_level=cfg.max_level,
        label=f"adaptive-is[{payoff.label}]",
        thetas=sampler.theta_for,
    )
    estimate.diagnostics["robbins_monro"] = sampler.diagnostics()
    estimate.diagnostics["burn_in"] = sampler.burn_in
    return estimate
