import math
from dataclasses import replace

import numpy as np
import pytest

from app.services.risk import (
    AdaptiveConfig,
    AdaptiveNestedSampler,
    NestedConfig,
    UniformNestedSampler,
    adaptive_inner,
    adaptive_inner_counts,
    apply_functional,
    build_problem,
    gaussian_problem,
    inner_mean,
    nested_mc,
    nested_mc_iterative,
    nested_mlmc_adaptive,
    nested_mlmc_uniform,
    profile_risk_levels,
    put_portfolio_problem,
    required_samples,
    var_cvar,
    variance_slope,
)
from app.utils.errors import BracketError, InvalidArgumentError
from app.utils.oracles import gaussian_cvar, gaussian_eta, gaussian_var
from app.utils.streams import Purpose, StreamKey

ADAPTIVE = AdaptiveConfig(confidence_const=3.0, exponent_r=1.25, n0_inner=16)


@pytest.mark.parametrize(
    ("mu", "sigma", "level", "eps", "expected"),
    [
        (1.0, 1.0, 2, 0.01, 64),  # 远离阈值：停在 N₀2^l
        (0.1, 1.0, 2, 0.01, 256),  # 贴近阈值：取满 N₀4^l
        (0.0, 1.0, 2, 0.01, 256),
        (1.0, 0.0, 2, 0.01, 64),
        (0.25, 1.0, 2, 0.05, 144),  # 受 max(c_N/ε, C²σ²/μ²) 截断
        (0.25, 1.0, 0, 0.01, 16),
    ],
)
def test_required_samples(mu, sigma, level, eps, expected):
    assert required_samples(mu, sigma, level, ADAPTIVE, eps) == expected


def test_required_samples_interpolates_between_bounds():
    assert required_samples(0.25, 1.0, 2, ADAPTIVE, 0.001) == math.ceil(256 * (16 / 12) ** -1.25)


def test_adaptive_config_exponent_bounds():
    # q = 6：estimated 模式上界 4/3，perfect 模式上界 5/3
    with pytest.raises(InvalidArgumentError):
        AdaptiveConfig(exponent_r=1.4)
    assert AdaptiveConfig(exponent_r=1.4, mode="perfect").max_exponent() == pytest.approx(5 / 3)
    with pytest.raises(InvalidArgumentError):
        AdaptiveConfig(exponent_r=1.0)
    with pytest.raises(InvalidArgumentError):
        AdaptiveConfig(mode="oracle")


def test_nested_config_validation():
    with pytest.raises(InvalidArgumentError):
        NestedConfig(n0_inner=1)
    with pytest.raises(InvalidArgumentError):
        NestedConfig(initial_levels=14, max_level=12)
    assert NestedConfig(n0_inner=8).inner_samples(3) == 64


def test_apply_functional():
    np.testing.assert_array_equal(apply_functional("indicator", [-1.0, 0.0, 2.0]), [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(apply_functional("excess", [-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])
    with pytest.raises(InvalidArgumentError):
        apply_functional("square", [1.0])


def test_build_problem():
    problem = build_problem("gaussian", 0.5, {"portfolio_size": 3})
    assert problem.portfolio_size == 3
    assert problem.with_threshold(1.5).threshold == 1.5
    with pytest.raises(InvalidArgumentError):
        build_problem("credit", 0.0)
    with pytest.raises(InvalidArgumentError):
        build_problem("put_portfolio", 0.0, {"risk_horizon": 2.0})


def test_inner_stream_continuation_is_a_prefix(gaussian):
    key = StreamKey(1, 2, 5, Purpose.INNER)
    short, _ = inner_mean(gaussian, 0.3, 16, key)
    long_mean, _ = inner_mean(gaussian, 0.3, 32, key)
    again, _ = inner_mean(gaussian, 0.3, 16, key)
    assert short == again
    assert long_mean != short


def test_inner_mean_needs_two_samples(gaussian):
    with pytest.raises(InvalidArgumentError):
        inner_mean(gaussian, 0.0, 1, StreamKey(0, 0, 0, Purpose.INNER))


def test_put_portfolio_oracle_matches_inner_samples():
    problem = put_portfolio_problem()
    n = 200_000
    mean, sd = inner_mean(problem, 100.0, n, StreamKey(0, 0, 0, Purpose.INNER))
    assert abs(mean - float(problem.oracle.conditional_mean(100.0))) < 5 * sd / math.sqrt(n)
    assert sd == pytest.approx(float(problem.oracle.conditional_std(100.0)[0]), rel=0.02)
    assert problem.portfolio_size == 3


def test_put_portfolio_loss_decreases_in_spot():
    problem = put_portfolio_problem()
    losses = problem.oracle.conditional_mean(np.array([80.0, 100.0, 120.0]))
    assert losses[0] > losses[1] > losses[2]
    assert 0.0 < problem.oracle.eta(0.0) < 1.0


def test_nested_mc_shares_streams_with_uniform_level(gaussian):
    cfg = NestedConfig(n0_inner=16, seed=5)
    direct = nested_mc(gaussian, 600, 16, level=0, seed=5)
    stats = UniformNestedSampler(gaussian, cfg).sample(0, 0, 600)
    assert direct.eta == stats.mean()
    assert direct.total_inner_samples == 600 * 16
    assert direct.levels[0].inner.minimum == direct.levels[0].inner.maximum == 16


def test_nested_mc_validation(gaussian):
    with pytest.raises(InvalidArgumentError):
        nested_mc(gaussian, 0, 16)
    with pytest.raises(InvalidArgumentError):
        nested_mc(gaussian, 10, 1)


def test_adaptive_inner_far_from_threshold():
    problem = gaussian_problem(threshold=-50.0)
    key = StreamKey(0, 2, 0, Purpose.INNER)
    fine, coarse, cost = adaptive_inner(problem, 0.2, 2, ADAPTIVE, key, 0.01)
    assert (fine, coarse) == (1.0, 1.0)
    assert cost == 64.0
    fine, coarse, cost = adaptive_inner(problem, 0.2, 0, ADAPTIVE, key, 0.01)
    assert (fine, coarse, cost) == (1.0, 0.0, 16.0)


def test_adaptive_inner_cost_scales_with_portfolio():
    problem = gaussian_problem(threshold=-50.0, portfolio_size=4)
    _, _, cost = adaptive_inner(problem, 0.0, 1, ADAPTIVE, StreamKey(0, 1, 0, Purpose.INNER), 0.01)
    assert cost == 32.0 * 4


def test_adaptive_coarse_count_is_a_prefix_of_fine():
    problem = gaussian_problem(threshold=1.0)
    scenarios = 1.0 + 0.3 * np.random.default_rng(11).standard_normal(150)
    eps = 1e-3
    for level in range(1, 7):
        for index, y in enumerate(scenarios):
            key = StreamKey(0, level, index, Purpose.INNER)
            n_fine, n_coarse = adaptive_inner_counts(problem, y, level, ADAPTIVE, key, eps)
            assert n_coarse <= n_fine
            assert n_coarse == adaptive_inner_counts(problem, y, level - 1, ADAPTIVE, key, eps)[0]
            assert 16 * 2**level <= n_fine <= 16 * 4**level
            h_fine, _, cost = adaptive_inner(problem, y, level, ADAPTIVE, key, eps)
            z_hat, _ = inner_mean(problem, y, n_fine, key)
            assert h_fine == (1.0 if z_hat - 1.0 > 0.0 else 0.0)
            assert cost == n_fine


def test_adaptive_level_zero_matches_nested_mc(gaussian):
    # 第 0 层 N₀2^0 = N₀4^0，自适应规则被迫取 N₀
    sampler = AdaptiveNestedSampler(gaussian, NestedConfig(n0_inner=16, seed=5), ADAPTIVE, 0.01)
    stats = sampler.sample(0, 0, 600)
    assert stats.mean() == nested_mc(gaussian, 600, 16, level=0, seed=5).eta


def test_adaptive_cost_per_scenario_grows_like_two_to_the_level(gaussian):
    sampler = AdaptiveNestedSampler(gaussian, NestedConfig(seed=4), ADAPTIVE, 1e-3)
    profile_risk_levels(sampler, [2, 3, 4, 5, 6], 2000)
    ratios = [sampler.schedules[level].mean() / 2**level for level in range(2, 7)]
    assert max(ratios) <= 2 * min(ratios)


def test_exceedance_estimate_is_monotone_in_threshold():
    thresholds = (-1.0, 0.0, 0.5, 1.0, 2.0)
    etas = [nested_mc(gaussian_problem(threshold=level), 800, 32, seed=9).eta for level in thresholds]
    assert etas == sorted(etas, reverse=True)
    assert etas[0] > etas[-1]
    level_zero = [
        UniformNestedSampler(gaussian_problem(threshold=level), NestedConfig(seed=9)).sample(0, 0, 800).mean()
        for level in thresholds
    ]
    assert level_zero == sorted(level_zero, reverse=True)


def test_iterative_nested_mc(gaussian):
    eps = 0.05
    result = nested_mc_iterative(gaussian, eps, n0_inner=4, seed=2)
    inner = result.levels[0].inner
    assert result.method == "nested_mc_iterative"
    assert result.total_outer_samples == 400
    # 上限 max(N₀, ⌈1/ε⌉) = 20
    assert 4 <= inner.minimum <= inner.maximum <= 20
    assert result.total_inner_samples == inner.total
    assert result.total_cost == inner.total
    assert abs(result.eta - gaussian_eta(1.0)) < 2 * eps


def test_iterative_nested_mc_with_fixed_count_matches_nested_mc(gaussian):
    # 上限 max(16, ⌈1/0.1⌉) = 16，与 N₀ 相同，每个情景恰取 16 个内层样本
    iterative = nested_mc_iterative(gaussian, 0.1, n0_inner=16, seed=3)
    plain = nested_mc(gaussian, 100, 16, seed=3)
    assert iterative.eta == plain.eta
    assert iterative.total_cost == plain.total_cost


def test_iterative_nested_mc_validation(gaussian):
    with pytest.raises(InvalidArgumentError):
        nested_mc_iterative(gaussian, 0.0)
    with pytest.raises(InvalidArgumentError):
        nested_mc_iterative(gaussian, 0.1, n0_inner=1)


def test_perfect_mode_needs_oracle(gaussian, nested_cfg):
    blind = replace(gaussian, oracle=None)
    perfect = AdaptiveConfig(mode="perfect")
    with pytest.raises(InvalidArgumentError):
        adaptive_inner(blind, 0.0, 1, perfect, StreamKey(0, 1, 0, Purpose.INNER), 0.01)
    with pytest.raises(InvalidArgumentError):
        AdaptiveNestedSampler(blind, nested_cfg, perfect, 0.01)


def test_uniform_nested_mlmc_estimates_exceedance(gaussian, nested_cfg):
    eps = 0.02
    result = nested_mlmc_uniform(gaussian, eps, nested_cfg)
    assert abs(result.eta - gaussian_eta(1.0)) < 3 * eps
    assert result.method == "uniform"
    assert result.variance_slope is not None
    rows = result.level_table()
    assert rows[0]["level"] == 0
    for row in rows:
        assert row["inner_min"] == row["inner_max"] == 16 * 2 ** row["level"]
    assert result.total_outer_samples == sum(level.outer_count for level in result.levels)


def test_adaptive_nested_mlmc_estimates_exceedance(gaussian, nested_cfg):
    eps = 0.02
    result = nested_mlmc_adaptive(gaussian, eps, ADAPTIVE, nested_cfg)
    assert abs(result.eta - gaussian_eta(1.0)) < 3 * eps
    assert result.method == "adaptive_estimated"
    deeper = result.levels[-1]
    # 自适应层的内层样本数落在 [N₀2^l, N₀4^l] 内
    assert deeper.inner.minimum >= 16 * 2**deeper.level
    assert deeper.inner.maximum <= 16 * 4**deeper.level


def test_uniform_variance_decays_with_level(gaussian):
    sampler = UniformNestedSampler(gaussian, NestedConfig(seed=2))
    slope = variance_slope(profile_risk_levels(sampler, [0, 1, 2, 3, 4], 4000))
    assert -1.0 < slope < -0.2


def test_var_cvar_argument_checks(gaussian):
    with pytest.raises(InvalidArgumentError):
        var_cvar(gaussian, 1.5, 0.05)
    with pytest.raises(InvalidArgumentError):
        var_cvar(gaussian, 0.05, 0.0)


def test_var_cvar_rejects_unresolvable_quantile(gaussian):
    with pytest.raises(BracketError) as excinfo:
        var_cvar(gaussian, 1e-5, 0.05, cfg=NestedConfig(pilot_scenarios=100))
    assert "pilot_min" in excinfo.value.diagnostics


@pytest.mark.slow
def test_var_cvar_gaussian():
    eps = 0.02
    problem = gaussian_problem(threshold=0.0)
    result = var_cvar(problem, 0.05, eps, ADAPTIVE, NestedConfig(pilot_outer=1000, max_level=10, seed=4))
    assert abs(result.value_at_risk - gaussian_var(0.05)) <= eps
    assert abs(result.cvar - gaussian_cvar(0.05)) <= eps
    assert result.cvar >= result.value_at_risk
    assert result.evaluations
