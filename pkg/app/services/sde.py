"""SDE 模型、收益函数与 Girsanov 测度变换。

dX = b(X)dt + Σ_j σ_j(X) dW^j，状态维度 d，噪声维度 q。
所有函数按批量向量化：输入 (n, d) 数组，返回 (n, d) 或 (n,)。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from app.utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

StateFunction = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# 模型定义
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class SdeModel:
    """SDE 动力学定义（构造后不可变，可在线程间共享）"""

    dim_state: int
    dim_noise: int
    drift: StateFunction
    diffusion_cols: tuple[StateFunction, ...]
    x0: np.ndarray
    horizon: float
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise InvalidArgumentError("dim_state 与 dim_noise 必须为正整数")
        if len(self.diffusion_cols) != self.dim_noise:
            raise InvalidArgumentError(
                f"扩散列数 {len(self.diffusion_cols)} 与噪声维度 {self.dim_noise} 不一致"
            )
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise InvalidArgumentError(f"horizon 必须为正的有限值: {self.horizon}")
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.dim_state,):
            raise InvalidArgumentError(f"x0 长度必须为 {self.dim_state}")
        if not np.all(np.isfinite(x0)):
            raise InvalidArgumentError("x0 必须为有限值")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "diffusion_cols", tuple(self.diffusion_cols))

    def diffusion(self, x: np.ndarray) -> np.ndarray:
        """扩散矩阵 σ(x)，形状 (n, d, q)。"""
        return np.stack([column(x) for column in self.diffusion_cols], axis=-1)

    def apply_diffusion(self, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """σ(x)·dw，dw 形状 (n, q)。

        逐元素相乘后沿最后一维求和，结果与批大小无关（逐位一致）。
        """
        return np.sum(self.diffusion(x) * dw[:, np.newaxis, :], axis=-1)


@dataclass(frozen=True, eq=False)
class Payoff:
    """终端收益函数 G(X_T)"""

    eval: Callable[[np.ndarray], np.ndarray]
    label: str

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.eval(np.atleast_2d(x))


@dataclass(frozen=True)
class MlmcConfig:
    """层级离散化与驱动参数"""

    refine_factor: int = 2
    base_steps: int = 1
    max_level: int = 10
    seed: int = 0
    pilot_samples: int = 10_000
    initial_levels: int = 3
    workers: int = 1

    def __post_init__(self):
        if self.refine_factor < 2:
            raise InvalidArgumentError(f"refine_factor 必须 ≥ 2: {self.refine_factor}")
        if self.base_steps < 1:
            raise InvalidArgumentError(f"base_steps 必须为正整数: {self.base_steps}")
        if self.max_level < 1:
            raise InvalidArgumentError(f"max_level 必须为正整数: {self.max_level}")
        if self.pilot_samples < 2:
            raise InvalidArgumentError(f"pilot_samples 必须 ≥ 2: {self.pilot_samples}")
        if not 1 <= self.initial_levels <= self.max_level:
            raise InvalidArgumentError(
                f"initial_levels 必须在 1~max_level 之间: {self.initial_levels}"
            )
        if self.workers < 1:
            raise InvalidArgumentError(f"workers 必须为正整数: {self.workers}")

    def n_steps(self, level: int) -> int:
        """第 level 层的时间步数 base_steps·M^(level−1)"""
        return self.base_steps * self.refine_factor ** (level - 1)

    def step_size(self, level: int, horizon: float) -> float:
        return horizon / self.n_steps(level)

    def saa_normalization(self, level: int, horizon: float) -> float:
        """层修正的方差归一化因子：第 1 层为 1，其余为 M^l / ((M−1)T)"""
        if level <= 1:
            return 1.0
        m = self.refine_factor
        return m**level / ((m - 1) * horizon)


# ---------------------------------------------------------------------------
# Girsanov 机制
# ---------------------------------------------------------------------------
def _as_vector(name: str, value, length: int | None = None) -> np.ndarray:
    array = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(array)):
        raise InvalidArgumentError(f"{name} 包含非有限值")
    if length is not None and array.shape[-1:] != (length,):
        raise InvalidArgumentError(f"{name} 的长度必须为 {length}，实际形状 {array.shape}")
    return array


def girsanov_weight(theta, w_T, horizon: float):
    """似然比权重 exp(−⟨θ, W_T⟩ − ½|θ|²T)。

    w_T 可以是 (q,) 或批量 (n, q)；批量输入返回 (n,) 数组。
    """
    if not math.isfinite(horizon) or horizon <= 0:
        raise InvalidArgumentError(f"horizon 必须为正的有限值: {horizon}")
    theta = _as_vector("theta", theta).reshape(-1)
    w_T = _as_vector("w_T", w_T, theta.shape[0])
    exponent = -np.sum(w_T * theta, axis=-1) - 0.5 * np.sum(theta * theta) * horizon
    weight = np.exp(exponent)
    return float(weight) if np.ndim(weight) == 0 else weight


def shifted_drift(model: SdeModel, theta) -> StateFunction:
    """返回 x ↦ b(x) + σ(x)·θ。θ = 0 时逐点等于 b。"""
    theta = _as_vector("theta", theta).reshape(-1)
    if theta.shape != (model.dim_noise,):
        raise InvalidArgumentError(f"theta 长度必须为 {model.dim_noise}，实际为 {theta.shape[0]}")

    def drift(x: np.ndarray) -> np.ndarray:
        return model.drift(x) + np.sum(model.diffusion(x) * theta, axis=-1)

    return drift


def lipschitz_estimate(
    model: SdeModel,
    half_width: float = 1.0,
    n_pairs: int = 2000,
    seed: int = 0,
) -> float:
    """在以 x0 为中心的盒子内经验估计 Lipschitz 常数 K（仅作参考）。"""
    rng = np.random.default_rng(seed)
    d = model.dim_state
    x = model.x0 + rng.uniform(-half_width, half_width, size=(n_pairs, d))
    y = model.x0 + rng.uniform(-half_width, half_width, size=(n_pairs, d))
    distance = np.linalg.norm(x - y, axis=1)
    keep = distance > 1e-12
    spread = np.linalg.norm(model.drift(x) - model.drift(y), axis=1)
    for column in model.diffusion_cols:
        spread = spread + np.linalg.norm(column(x) - column(y), axis=1)
    if not np.all(np.isfinite(spread)):
        raise InvalidArgumentError("drift/diffusion 在测试区域内出现非有限值")
    ratio = spread[keep] / distance[keep]
    constant = float(ratio.max()) if ratio.size else 0.0
    logger.debug("Lipschitz 估计: model=%s K=%.6g", model.name, constant)
    return constant


# ---------------------------------------------------------------------------
# 模型目录
# ---------------------------------------------------------------------------
def gbm(x0: float = 1.0, mu: float = 0.05, sigma: float = 0.2, horizon: float = 1.0) -> SdeModel:
    """一维几何布朗运动 dX = μX dt + σX dW"""
    return SdeModel(
        dim_state=1,
        dim_noise=1,
        drift=lambda x: mu * x,
        diffusion_cols=(lambda x: sigma * x,),
        x0=np.array([x0]),
        horizon=horizon,
        name="gbm",
        params={"x0": x0, "mu": mu, "sigma": sigma, "T": horizon},
    )


def basket_gbm(
    dim: int = 2,
    x0: float | list[float] = 1.0,
    mu: float | list[float] = 0.05,
    sigma: float | list[float] = 0.2,
    rho: float = 0.0,
    horizon: float = 1.0,
) -> SdeModel:
    """d 维常相关几何布朗运动，σ_j(x) = σ ⊙ x ⊙ L[:, j]，L 为相关阵的 Cholesky 因子"""
    if dim < 1:
        raise InvalidArgumentError(f"dim 必须为正整数: {dim}")
    if not -1.0 / max(dim - 1, 1) < rho < 1.0 and dim > 1:
        raise InvalidArgumentError(f"rho={rho} 使相关矩阵非正定")
    mu_vec = np.broadcast_to(np.asarray(mu, dtype=float), (dim,)).copy()
    sigma_vec = np.broadcast_to(np.asarray(sigma, dtype=float), (dim,)).copy()
    x0_vec = np.broadcast_to(np.asarray(x0, dtype=float), (dim,)).copy()
    correlation = np.full((dim, dim), rho) + (1.0 - rho) * np.eye(dim)
    chol = np.linalg.cholesky(correlation)

    def make_column(j: int) -> StateFunction:
        loading = sigma_vec * chol[:, j]
        return lambda x: loading * x

    return SdeModel(
        dim_state=dim,
        dim_noise=dim,
        drift=lambda x: mu_vec * x,
        diffusion_cols=tuple(make_column(j) for j in range(dim)),
        x0=x0_vec,
        horizon=horizon,
        name="basket_gbm",
        params={"dim": dim, "x0": x0, "mu": mu, "sigma": sigma, "rho": rho, "T": horizon},
    )


def european_call(strike: float, discount: float = 1.0, asset: int = 0) -> Payoff:
    return Payoff(
        eval=lambda x: discount * np.maximum(x[:, asset] - strike, 0.0),
        label=f"call(K={strike})",
    )


def european_put(strike: float, discount: float = 1.0, asset: int = 0) -> Payoff:
    return Payoff(
        eval=lambda x: discount * np.maximum(strike - x[:, asset], 0.0),
        label=f"put(K={strike})",
    )


def basket_call(strike: float, weights=None, discount: float = 1.0) -> Payoff:
    """算术平均篮子看涨"""

    def evaluate(x: np.ndarray) -> np.ndarray:
        w = np.full(x.shape[1], 1.0 / x.shape[1]) if weights is None else np.asarray(weights, dtype=float)
        return discount * np.maximum(np.sum(x * w, axis=1) - strike, 0.0)

    return Payoff(eval=evaluate, label=f"basket_call(K={strike})")


def digital(strike: float, payout: float = 1.0, discount: float = 1.0, asset: int = 0) -> Payoff:
    """有界数字期权 payout·1{X > K}"""
    return Payoff(
        eval=lambda x: discount * payout * (x[:, asset] > strike).astype(float),
        label=f"digital(K={strike})",
    )


def constant_payoff(value: float = 1.0) -> Payoff:
    return Payoff(eval=lambda x: np.full(x.shape[0], float(value)), label=f"constant({value})")


MODEL_BUILDERS: dict[str, Callable[..., SdeModel]] = {
    "gbm": lambda p: gbm(
        x0=float(p.get("x0", 1.0)),
        mu=float(p.get("mu", 0.05)),
        sigma=float(p.get("sigma", 0.2)),
        horizon=float(p.get("T", 1.0)),
    ),
    "basket_gbm": lambda p: basket_gbm(
        dim=int(p.get("dim", 2)),
        x0=p.get("x0", 1.0),
        mu=p.get("mu", 0.05),
        sigma=p.get("sigma", 0.2),
        rho=float(p.get("rho", 0.0)),
        horizon=float(p.get("T", 1.0)),
    ),
}

PAYOFF_BUILDERS: dict[str, Callable[..., Payoff]] = {
    "call": lambda p, df: european_call(float(p.get("strike", 1.0)), df, int(p.get("asset", 0))),
    "put": lambda p, df: european_put(float(p.get("strike", 1.0)), df, int(p.get("asset", 0))),
    "basket_call": lambda p, df: basket_call(float(p.get("strike", 1.0)), p.get("weights"), df),
    "digital": lambda p, df: digital(
        float(p.get("strike", 1.0)), float(p.get("payout", 1.0)), df, int(p.get("asset", 0))
    ),
    "constant": lambda p, df: constant_payoff(float(p.get("value", 1.0))),
}


def build_model(name: str, params: dict | None = None) -> SdeModel:
    """按名称与参数构建目录模型"""
    builder = MODEL_BUILDERS.get(name)
    if builder is None:
        raise InvalidArgumentError(f"未知模型: {name}（可选 {', '.join(MODEL_BUILDERS)}）")
    return builder(params or {})


def build_payoff(name: str, params: dict | None = None, model: SdeModel | None = None) -> Payoff:
    """按名称构建收益函数。

    GBM 目录模型下默认按 exp(−μT) 贴现（风险中性定价），params["discounted"]=false 可关闭。
    """
    builder = PAYOFF_BUILDERS.get(name)
    if builder is None:
        raise InvalidArgumentError(f"未知收益函数: {name}（可选 {', '.join(PAYOFF_BUILDERS)}）")
    params = params or {}
    discount = 1.0
    if model is not None and params.get("discounted", True) and model.name in MODEL_BUILDERS:
        rate = np.mean(np.asarray(model.params.get("mu", 0.0), dtype=float))
        discount = math.exp(-float(rate) * model.horizon)
    return builder(params, discount)
