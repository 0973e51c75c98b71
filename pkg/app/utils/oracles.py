"""解析解（测试与报告中的对照值）"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, optimize
from scipy.stats import norm

from app.utils.errors import InvalidArgumentError


def _d1_d2(spot, strike, rate, sigma, tau):
    spot = np.asarray(spot, dtype=float)
    vol = sigma * math.sqrt(tau)
    d1 = (np.log(spot / strike) + (rate + 0.5 * sigma * sigma) * tau) / vol
    return d1, d1 - vol


def black_scholes_price(spot, strike: float, rate: float, sigma: float, tau: float, kind: str = "call"):
    """欧式看涨/看跌与现金数字期权的 Black–Scholes 价格，spot 可为数组"""
    if tau <= 0 or sigma <= 0 or strike <= 0:
        raise InvalidArgumentError("tau、sigma、strike 必须为正数")
    d1, d2 = _d1_d2(spot, strike, rate, sigma, tau)
    discount = math.exp(-rate * tau)
    if kind == "call":
        price = spot * norm.cdf(d1) - strike * discount * norm.cdf(d2)
    elif kind == "put":
        price = strike * discount * norm.cdf(-d2) - spot * norm.cdf(-d1)
    elif kind == "digital":
        price = discount * norm.cdf(d2)
    else:
        raise InvalidArgumentError(f"未知期权类型: {kind}")
    return float(price) if np.ndim(price) == 0 else price


def gbm_mean(x0: float, mu: float, horizon: float) -> float:
    return x0 * math.exp(mu * horizon)


def put_second_moment(spot, strikes, rate: float, sigma: float, tau: float) -> np.ndarray:
    """E[(K̄ − S_τ)₊ 的平均)²]：等权看跌组合到期收益的二阶矩（未贴现），spot 为数组"""
    spot = np.atleast_1d(np.asarray(spot, dtype=float))
    strikes = np.asarray(strikes, dtype=float)
    forward = spot * math.exp(rate * tau)
    vol = sigma * math.sqrt(tau)
    total = np.zeros_like(spot)
    for k_i in strikes:
        for k_j in strikes:
            low = min(k_i, k_j)
            d1 = (np.log(forward / low) + 0.5 * vol * vol) / vol
            d2 = d1 - vol
            total += (
                k_i * k_j * norm.cdf(-d2)
                - (k_i + k_j) * forward * norm.cdf(-d1)
                + forward * forward * math.exp(vol * vol) * norm.cdf(-d1 - vol)
            )
    return total / strikes.size**2


# ---------------------------------------------------------------------------
# 高斯风险测试问题：Y ~ N(0,1)，X|Y ~ N(Y,1)
# ---------------------------------------------------------------------------
def gaussian_eta(threshold: float) -> float:
    return float(norm.sf(threshold))


def gaussian_var(quantile: float) -> float:
    return float(norm.isf(quantile))


def gaussian_cvar(quantile: float) -> float:
    return float(norm.pdf(norm.isf(quantile)) / quantile)


# ---------------------------------------------------------------------------
# 单调条件损失的风险度量：E[X|Y] = g(Y)，g 关于标准正态驱动量 z 单调递减
# ---------------------------------------------------------------------------
def monotone_eta(loss_of_z, threshold: float, lower: float = -12.0, upper: float = 12.0) -> float:
    """η = P(g(Z) > L)，g 递减，Z ~ N(0,1)"""
    if loss_of_z(lower) <= threshold:
        return 0.0
    if loss_of_z(upper) > threshold:
        return 1.0
    root = optimize.brentq(lambda z: loss_of_z(z) - threshold, lower, upper, xtol=1e-12)
    return float(norm.cdf(root))


def monotone_var_cvar(loss_of_z, quantile: float) -> tuple[float, float]:
    """递减情形下 VaR = g(z_a)，CVaR = (1/a)∫_{z<z_a} g(z)φ(z)dz"""
    z_a = float(norm.ppf(quantile))
    value_at_risk = float(loss_of_z(z_a))
    tail, _ = integrate.quad(lambda z: float(loss_of_z(z)) * norm.pdf(z), -np.inf, z_a, limit=200)
    return value_at_risk, tail / quantile
