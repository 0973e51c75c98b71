import math
from dataclasses import replace

import numpy as np
import pytest

from app.services.mlmc import (
    LevelStats,
    PricingLevelSampler,
    RateEstimates,
    accumulate_level,
    allocate_samples,
    alpha_for_bias,
    bias_converged,
    bias_estimate,
    complexity_regime,
    fit_rates,
    profile_levels,
    run_mlmc,
    run_multilevel,
    sample_in_blocks,
)
from app.services.sde import MlmcConfig, build_payoff, european_call, gbm
from app.utils.errors import BiasTargetUnreachableError, InvalidArgumentError, StateError
from app.utils.oracles import black_scholes_price

BS_ATM_CALL = black_scholes_price(1.0, 1.0, 0.05, 0.2, 1.0, "call")


def stats_with(level, mean, var, cost, count=1000):
    """构造给定均值/方差/单样本开销的统计量"""
    return LevelStats(
        level=level,
        count=count,
        sum=mean * count,
        sum_sq=(var + mean * mean) * count,
        cost_total=cost * count,
    )


class GeometricSampler:
    """确定性层采样器：第 l 层样本取 ±√v_l 交替加均值 m_l，方差 v_l"""

    first_level = 1

    def __init__(self, means, variances, costs):
        self.means, self.variances, self.costs = means, variances, costs
        self.calls = []

    def sample(self, level, start, count):
        self.calls.append((level, start, count))
        signs = np.where((np.arange(start, start + count) % 2) == 0, 1.0, -1.0)
        values = self.means(level) + signs * math.sqrt(self.variances(level))
        return LevelStats.from_values(level, values, self.costs(level))


def test_level_stats_moments_and_merge():
    values = np.array([1.0, 2.0, 4.0, 7.0])
    stats = LevelStats.from_values(2, values[:2], 3.0).merge(LevelStats.from_values(2, values[2:], 3.0))
    assert stats.count == 4
    assert stats.mean() == pytest.approx(3.5)
    assert stats.variance() == pytest.approx(np.var(values))
    assert stats.mean_cost() == 3.0
    centered = values - values.mean()
    assert stats.kurtosis() == pytest.approx(np.mean(centered**4) / np.var(values) ** 2)


def test_level_stats_errors():
    with pytest.raises(StateError):
        LevelStats(level=1).mean()
    with pytest.raises(StateError):
        LevelStats.from_values(1, [1.0], 1.0).variance()
    with pytest.raises(InvalidArgumentError):
        LevelStats(level=1).merge(LevelStats(level=2))
    with pytest.raises(InvalidArgumentError):
        LevelStats.from_values(1, [math.nan], 1.0)


def test_constant_level_has_zero_kurtosis():
    assert LevelStats.from_values(1, np.ones(10), 1.0).kurtosis() == 0.0


def test_allocation_meets_variance_budget():
    levels = [stats_with(1, 0.1, 0.04, 1.0), stats_with(2, 0.01, 0.004, 3.0), stats_with(3, 0.005, 0.001, 6.0)]
    eps = 0.01
    counts = allocate_samples(levels, eps)
    variance = sum(stats.variance() / n for stats, n in zip(levels, counts))
    assert variance <= eps**2 / 2 * (1 + 1e-12)
    assert counts[0] > counts[1] > counts[2]


def test_allocation_needs_pilot():
    with pytest.raises(StateError):
        allocate_samples([LevelStats(level=1)], 0.1)
    with pytest.raises(InvalidArgumentError):
        allocate_samples([stats_with(1, 0.0, 1.0, 1.0)], 0.0)


def test_allocation_examples():
    assert allocate_samples([stats_with(1, 0.0, 1.0, 1.0)], 0.1) == [200]
    # Σ√(V_l C_l) = 1 + 1 = 2
    assert allocate_samples([stats_with(1, 0.0, 1.0, 1.0), stats_with(2, 0.0, 0.25, 4.0)], 0.1) == [400, 100]


def test_allocation_is_locally_cost_optimal():
    levels = [stats_with(1, 0.1, 0.04, 1.0), stats_with(2, 0.01, 0.004, 3.0), stats_with(3, 0.005, 0.001, 6.0)]
    counts = np.array(allocate_samples(levels, 1e-4), dtype=float)
    variances = np.array([stats.variance() for stats in levels])
    costs = np.array([stats.mean_cost() for stats in levels])
    budget = np.sum(variances / counts)
    cost = counts @ costs
    for i in range(3):
        for j in range(3):
            if i == j:
                continue
            perturbed = counts.copy()
            perturbed[i] *= 1.05
            perturbed[j] *= 0.95
            # 缩放回同一方差预算
            perturbed *= np.sum(variances / perturbed) / budget
            assert perturbed @ costs >= cost * (1 - 1e-6)


def test_bias_test_uses_last_two_levels():
    levels = [stats_with(1, 1.0, 1.0, 1.0), stats_with(2, 0.02, 1.0, 1.0), stats_with(3, 0.004, 1.0, 1.0)]
    # max(0.02/(2·1), 0.004/1) = 0.01
    assert bias_estimate(levels, 1.0) == pytest.approx(0.01)
    assert bias_converged(levels, 0.015, 1.0)
    assert not bias_converged(levels, 0.014, 1.0)


def test_fit_rates_excludes_first_level():
    levels = [stats_with(1, 5.0, 5.0, 100.0)] + [
        stats_with(l, 2.0**-l, 4.0**-l, 2.0**l) for l in range(2, 7)
    ]
    rates = fit_rates(levels)
    assert rates.alpha == pytest.approx(1.0)
    assert rates.beta == pytest.approx(2.0)
    assert rates.gamma == pytest.approx(1.0)
    assert rates.fit_levels == (2, 6)
    assert rates.to_dict()["regime"] == "beta>gamma"


def test_fit_rates_zero_means_give_nan():
    levels = [stats_with(l, 0.0, 2.0**-l, 2.0**l) for l in range(1, 5)]
    rates = fit_rates(levels)
    assert math.isnan(rates.alpha)
    assert rates.to_dict()["alpha"] is None
    with pytest.raises(StateError):
        fit_rates(levels[:2])


def test_alpha_for_bias_needs_three_difference_levels():
    rates = RateEstimates(alpha=0.2, beta=1.0, gamma=1.0, fit_levels=(2, 4))
    levels = [stats_with(l, 1.0, 1.0, 1.0) for l in range(1, 4)]
    assert alpha_for_bias(levels, rates) == 1.0
    levels.append(stats_with(4, 1.0, 1.0, 1.0))
    assert alpha_for_bias(levels, rates) == 0.5
    assert alpha_for_bias(levels, replace(rates, alpha=1.7)) == 1.7


@pytest.mark.parametrize(
    ("beta", "gamma", "regime", "exponent"),
    [
        (2.0, 1.0, "beta>gamma", -2.0),
        (1.05, 1.0, "beta=gamma", -2.0),
        (0.5, 1.0, "beta<gamma", -2.5),
    ],
)
def test_complexity_regime(beta, gamma, regime, exponent):
    result = complexity_regime(RateEstimates(alpha=1.0, beta=beta, gamma=gamma, fit_levels=(2, 5)))
    assert result["regime"] == regime
    assert result["cost_exponent"] == pytest.approx(exponent)


def test_sample_in_blocks_is_worker_independent():
    def fn(start, count):
        values = np.sin(np.arange(start, start + count, dtype=float))
        return LevelStats.from_values(1, values, 1.0)

    serial = sample_in_blocks(1, fn, 17, 20_000, workers=1)
    parallel = sample_in_blocks(1, fn, 17, 20_000, workers=4)
    assert serial == parallel


def test_driver_adds_levels_until_bias_target():
    sampler = GeometricSampler(
        means=lambda l: 2.0**-l if l > 1 else 1.0,
        variances=lambda l: 4.0**-l,
        costs=lambda l: 2.0**l,
    )
    estimate = run_multilevel(sampler, 0.01, pilot_samples=100, initial_levels=2, max_level=12)
    assert estimate.bias_estimate <= 0.01 / math.sqrt(2)
    assert estimate.levels[-1].level >= 7
    assert estimate.std_error**2 <= 0.01**2 / 2 * (1 + 1e-9)
    assert estimate.value == pytest.approx(sum(s.mean() for s in estimate.levels))


def test_driver_reports_partial_estimate_at_max_level():
    sampler = GeometricSampler(means=lambda l: 1.0, variances=lambda l: 1e-4, costs=lambda l: 1.0)
    with pytest.raises(BiasTargetUnreachableError) as excinfo:
        run_multilevel(sampler, 0.1, pilot_samples=10, initial_levels=2, max_level=3)
    partial = excinfo.value.partial
    assert [s.level for s in partial.levels] == [1, 2, 3]
    assert excinfo.value.last_iterate is partial


def test_bias_test_skips_base_level():
    # 第 1 层是基础估计；它的均值为 0 不能让两层时就判定收敛
    sampler = GeometricSampler(
        means=lambda l: 0.0 if l == 1 else 0.02 * 2.0**-l,
        variances=lambda l: 1e-6,
        costs=lambda l: 2.0**l,
    )
    estimate = run_multilevel(sampler, 0.1, pilot_samples=20, initial_levels=2, max_level=8)
    assert [s.level for s in estimate.levels] == [1, 2, 3]
    assert estimate.bias_estimate == pytest.approx(bias_estimate(estimate.levels[1:], 1.0))

    single = run_multilevel(sampler, 0.1, pilot_samples=20, initial_levels=1, max_level=1)
    assert [s.level for s in single.levels] == [1]
    assert math.isnan(single.bias_estimate)


def test_accumulate_level_continues_sample_indices(gbm_model, small_cfg, atm_call):
    first = accumulate_level(gbm_model, atm_call, small_cfg, [0.0], 2, 300)
    both = accumulate_level(gbm_model, atm_call, small_cfg, [0.0], 2, 200, existing=first)
    direct = PricingLevelSampler(gbm_model, atm_call, small_cfg).sample(2, 0, 500)
    assert both.count == 500
    assert both.sum == pytest.approx(direct.sum, rel=1e-9, abs=1e-12)
    assert accumulate_level(gbm_model, atm_call, small_cfg, [0.0], 2, 0, existing=first) is first
    with pytest.raises(InvalidArgumentError):
        accumulate_level(gbm_model, atm_call, small_cfg, [0.0], 3, 10, existing=first)


def test_profile_levels_shows_variance_decay(gbm_model, small_cfg, atm_call):
    sampler = PricingLevelSampler(gbm_model, atm_call, small_cfg)
    stats = profile_levels(sampler, [1, 2, 3, 4, 5, 6], 20_000)
    rates = fit_rates(stats)
    assert rates.gamma == pytest.approx(1.0, abs=0.05)
    assert rates.beta > 0.7


def test_run_mlmc_prices_gbm_call(gbm_model):
    cfg = MlmcConfig(max_level=10, pilot_samples=2000, seed=11)
    payoff = build_payoff("call", {"strike": 1.0}, gbm_model)
    eps = 0.004
    estimate = run_mlmc(gbm_model, payoff, cfg, eps)
    assert abs(estimate.value - BS_ATM_CALL) < 4 * eps
    assert estimate.total_cost == pytest.approx(sum(s.cost_total for s in estimate.levels))
    rows = estimate.level_table()
    assert [row["level"] for row in rows] == [s.level for s in estimate.levels]
    assert all(row["theta_norm"] is None for row in rows)


def test_run_mlmc_is_bit_identical_across_workers(gbm_model):
    payoff = european_call(1.0)
    base = MlmcConfig(max_level=8, pilot_samples=5000, seed=2)
    serial = run_mlmc(gbm_model, payoff, base, 0.005)
    parallel = run_mlmc(gbm_model, payoff, replace(base, workers=4), 0.005)
    assert serial.value == parallel.value
    assert [s.count for s in serial.levels] == [s.count for s in parallel.levels]


def test_run_mlmc_rejects_non_positive_eps(gbm_model, small_cfg, atm_call):
    with pytest.raises(InvalidArgumentError):
        run_mlmc(gbm_model, atm_call, small_cfg, 0.0)


def test_zero_volatility_mlmc_is_deterministic():
    model = gbm(x0=1.0, mu=0.05, sigma=0.0, horizon=1.0)
    cfg = MlmcConfig(max_level=10, pilot_samples=100, seed=3)
    estimate = run_mlmc(model, european_call(1.0), cfg, 0.001)
    assert all(stats.variance() == pytest.approx(0.0, abs=1e-15) for stats in estimate.levels)
    n = cfg.n_steps(estimate.levels[-1].level)
    assert estimate.value == pytest.approx((1.0 + 0.05 / n) ** n - 1.0, rel=1e-9)
    assert abs(estimate.value - (math.exp(0.05) - 1.0)) <= 0.001


@pytest.mark.slow
def test_rms_error_within_tolerance_over_seeds():
    model = gbm(x0=1.0, mu=0.05, sigma=0.2, horizon=1.0)
    payoff = build_payoff("call", {"strike": 1.0}, model)
    for eps in (0.02, 0.01, 0.005):
        errors = [
            run_mlmc(model, payoff, MlmcConfig(pilot_samples=2000, seed=seed), eps).value - BS_ATM_CALL
            for seed in range(50)
        ]
        assert math.sqrt(np.mean(np.square(errors))) <= 1.25 * eps
