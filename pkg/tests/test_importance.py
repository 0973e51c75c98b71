import math
from dataclasses import replace

import numpy as np
import pytest

from app.services.importance import (
    AdaptiveIsLevelSampler,
    RmConfig,
    RmSample,
    RobbinsMonroState,
    SaaProblem,
    ThetaSchedule,
    build_rm_schedule,
    build_saa_schedule,
    collect_saa_problem,
    measure_level_variance,
    project_ball,
    rm_direction,
    rm_step,
    run_adaptive_is_mlmc,
    run_is_mlmc,
    run_robbins_monro,
    saa_objective,
    solve_saa,
)
from app.services.mlmc import run_mlmc
from app.services.sde import MlmcConfig, basket_call, basket_gbm, constant_payoff, european_call, gbm
from app.utils.errors import ConvergenceError, DegenerateObjectiveError, InvalidArgumentError, StateError
from app.utils.oracles import black_scholes_price

# 未贴现的 E[(S_T − 1.5)₊]
OTM_CALL = black_scholes_price(1.0, 1.5, 0.05, 0.2, 1.0, "call") * math.exp(0.05)


@pytest.fixture()
def otm_call():
    return european_call(strike=1.5)


@pytest.fixture()
def otm_problem(gbm_model, otm_call):
    return collect_saa_problem(gbm_model, otm_call, MlmcConfig(seed=3), 1, pilot_size=20_000)


def test_saa_gradient_matches_finite_differences(otm_problem):
    theta = np.array([0.8])
    value, gradient, hessian = saa_objective(otm_problem, theta)
    h = 1e-5
    plus, grad_plus, _ = saa_objective(otm_problem, theta + h)
    minus, grad_minus, _ = saa_objective(otm_problem, theta - h)
    assert gradient[0] == pytest.approx((plus - minus) / (2 * h), rel=1e-5)
    assert hessian[0, 0] == pytest.approx((grad_plus[0] - grad_minus[0]) / (2 * h), rel=1e-5)
    assert value > 0


def test_saa_hessian_positive_definite_in_two_dimensions():
    model = basket_gbm(dim=2, rho=0.5)
    problem = collect_saa_problem(model, basket_call(1.2), MlmcConfig(seed=1), 2, pilot_size=5000)
    _, _, hessian = saa_objective(problem, np.array([0.3, -0.2]))
    np.testing.assert_allclose(hessian, hessian.T, rtol=1e-12, atol=1e-12 * np.abs(hessian).max())
    assert np.linalg.eigvalsh(hessian).min() > 0


def test_saa_solution_is_stationary(otm_problem):
    theta = solve_saa(otm_problem)
    value, gradient, _ = saa_objective(otm_problem, theta)
    assert np.linalg.norm(gradient) / value <= 1e-6
    # 虚值看涨的最优平移把路径推向行权价方向
    assert theta[0] > 0.5


def test_saa_argmin_is_invariant_to_payoff_scale(otm_problem):
    theta = solve_saa(otm_problem)
    # 2 的幂次缩放在浮点下精确，Newton 迭代逐位相同
    np.testing.assert_array_equal(solve_saa(replace(otm_problem, fine=4.0 * otm_problem.fine)), theta)
    np.testing.assert_allclose(solve_saa(replace(otm_problem, fine=7.0 * otm_problem.fine)), theta, rtol=1e-4)


def test_saa_reports_non_convergence(otm_problem):
    with pytest.raises(ConvergenceError) as excinfo:
        solve_saa(otm_problem, tol=1e-12, max_iter=1)
    assert excinfo.value.last_iterate is not None


def test_degenerate_pilot_is_rejected(gbm_model):
    with pytest.raises(DegenerateObjectiveError):
        collect_saa_problem(gbm_model, constant_payoff(0.0), MlmcConfig(), 1, pilot_size=100)


def test_saa_problem_shape_check():
    with pytest.raises(InvalidArgumentError):
        SaaProblem(level=1, fine=np.ones(3), coarse=None, w_T=np.ones(3), normalization=1.0, horizon=1.0)


def test_saa_variance_reduction_on_held_out_samples(gbm_model, otm_call):
    cfg = MlmcConfig(seed=9)
    schedule = build_saa_schedule(gbm_model, otm_call, cfg, [1], pilot_size=10_000)
    theta = schedule.theta_for(1)
    plain = measure_level_variance(gbm_model, otm_call, cfg, 1, [0.0], 100_000)
    weighted = measure_level_variance(gbm_model, otm_call, cfg, 1, theta, 100_000)
    assert weighted <= 0.5 * plain


def test_degenerate_level_falls_back_to_zero(gbm_model):
    schedule = build_saa_schedule(gbm_model, constant_payoff(0.0), MlmcConfig(), [1, 2], pilot_size=50)
    np.testing.assert_array_equal(schedule.theta_for(2), [0.0])
    assert schedule.diagnostics[1] == {"degenerate": True}


def test_schedule_reuses_deepest_theta():
    schedule = ThetaSchedule(dim=1, thetas={1: [0.2], 3: [0.5]}, method="saa")
    np.testing.assert_array_equal(schedule.theta_for(2), [0.0])
    np.testing.assert_array_equal(schedule.theta_for(6), [0.5])
    np.testing.assert_array_equal(ThetaSchedule.zero(2).theta_for(4), [0.0, 0.0])
    assert schedule.to_dict()["thetas"] == {"1": [0.2], "3": [0.5]}


def test_schedule_validation():
    with pytest.raises(InvalidArgumentError):
        ThetaSchedule(dim=1, thetas={1: [0.2, 0.1]}, method="saa")
    with pytest.raises(InvalidArgumentError):
        ThetaSchedule(dim=1, thetas={1: [3.0]}, method="robbins_monro", radius=1.0)
    with pytest.raises(InvalidArgumentError):
        ThetaSchedule(dim=1, method="cross_entropy")


def test_project_ball():
    np.testing.assert_allclose(project_ball(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
    np.testing.assert_array_equal(project_ball(np.array([0.1, 0.1]), 1.0), [0.1, 0.1])


def test_rm_direction_matches_unshifted_form_at_zero_phi():
    sample = RmSample(s2=2.0, w_T=np.array([0.3]), horizon=1.0)
    shifted = RmSample(s2=2.0, w_T=np.array([0.3]), horizon=1.0, phi=np.zeros(1))
    theta = np.array([0.5])
    expected = (0.5 - 0.3) * 2.0 * math.exp(-0.15 + 0.125)
    assert rm_direction(theta, sample)[0] == pytest.approx(expected)
    np.testing.assert_array_equal(rm_direction(theta, shifted), rm_direction(theta, sample))


def test_rm_step_stays_in_ball():
    rmc = RmConfig(radius=0.5, gamma0=50.0, n0=1.0)
    sample = RmSample(s2=10.0, w_T=np.array([3.0]), horizon=1.0)
    theta = rm_step(1, [0.0], sample, 0, rmc)
    assert np.linalg.norm(theta) <= 0.5 + 1e-12
    with pytest.raises(InvalidArgumentError):
        rm_step(1, [2.0], sample, 0, rmc)


def test_rm_state_zero_sample_keeps_theta():
    state = RobbinsMonroState(1, 1, RmConfig())
    state.update(RmSample(s2=0.0, w_T=np.array([1.0]), horizon=1.0))
    np.testing.assert_array_equal(state.theta, [0.0])
    assert state.n == 1
    assert state.tracker is None


def test_rm_averaging_returns_running_mean():
    state = RobbinsMonroState(1, 1, RmConfig(averaging=True, normalize=False, gamma0=10.0, n0=1.0))
    iterates = [state.update(RmSample(s2=1.0, w_T=np.array([1.0]), horizon=1.0)).copy() for _ in range(5)]
    np.testing.assert_allclose(state.frozen(), np.mean(iterates, axis=0))


def test_rm_moves_towards_strike(gbm_model):
    rmc = RmConfig(iterations=3000)
    theta, diagnostics = run_robbins_monro(gbm_model, european_call(1.2), MlmcConfig(seed=4), 1, rmc)
    assert theta[0] > 0.0
    assert np.linalg.norm(theta) <= rmc.radius
    assert diagnostics["iterations"] == 3000


def test_rm_schedule_records_radius(gbm_model):
    schedule = build_rm_schedule(gbm_model, european_call(1.2), MlmcConfig(seed=4), [1, 2], RmConfig(iterations=200))
    assert schedule.method == "robbins_monro"
    assert schedule.radius == 5.0
    assert set(schedule.thetas) == {1, 2}


def test_is_mlmc_reports_thetas_and_baseline(gbm_model, otm_call):
    cfg = MlmcConfig(max_level=8, pilot_samples=2000, seed=6)
    schedule = build_saa_schedule(gbm_model, otm_call, cfg, [1, 2, 3], pilot_size=5000)
    estimate = run_is_mlmc(gbm_model, otm_call, cfg, 0.002, schedule, baseline_samples=2000)
    assert abs(estimate.value - OTM_CALL) < 4 * 0.002
    assert estimate.thetas[1] == pytest.approx(schedule.theta_for(1).tolist())
    assert set(estimate.diagnostics["baseline"]["1"]) == {"var_zero", "var_theta"}
    assert estimate.diagnostics["schedule"]["method"] == "saa"
    assert all(row["theta_norm"] is not None for row in estimate.level_table())


def test_is_mlmc_rejects_wrong_dimension(gbm_model, otm_call, small_cfg):
    with pytest.raises(InvalidArgumentError):
        run_is_mlmc(gbm_model, otm_call, small_cfg, 0.01, ThetaSchedule.zero(2))


def test_adaptive_with_zero_step_equals_plain_mlmc(gbm_model, otm_call):
    cfg = MlmcConfig(max_level=8, pilot_samples=3000, seed=12)
    plain = run_mlmc(gbm_model, otm_call, cfg, 0.003)
    adaptive = run_adaptive_is_mlmc(gbm_model, otm_call, cfg, 0.003, RmConfig(gamma0=0.0, iterations=500))
    assert adaptive.value == plain.value
    assert adaptive.total_cost == plain.total_cost
    assert adaptive.diagnostics["burn_in"] == 500


def test_adaptive_sampler_requires_sequential_start(gbm_model, otm_call, small_cfg):
    sampler = AdaptiveIsLevelSampler(gbm_model, otm_call, small_cfg, RmConfig(iterations=100))
    with pytest.raises(StateError):
        sampler.sample(1, 10, 5)
    stats = sampler.sample(1, 0, 300)
    assert stats.count == 300
    assert sampler.burn_in == 100


def test_adaptive_is_prices_otm_call():
    model = gbm(x0=1.0, mu=0.05, sigma=0.2, horizon=1.0)
    payoff = european_call(1.5)
    cfg = MlmcConfig(max_level=8, pilot_samples=4000, seed=21)
    adaptive = run_adaptive_is_mlmc(model, payoff, cfg, 0.001, RmConfig(iterations=2000))
    assert abs(adaptive.value - OTM_CALL) < 4 * 0.001
    assert set(adaptive.diagnostics["robbins_monro"]) >= {"1", "2", "3"}


@pytest.mark.slow
def test_rm_converges_to_saa_solution(gbm_model):
    payoff = european_call(1.2)
    cfg = MlmcConfig(seed=8)
    saa = build_saa_schedule(gbm_model, payoff, cfg, [1], pilot_size=100_000).theta_for(1)
    rm, _ = run_robbins_monro(gbm_model, payoff, cfg, 1, RmConfig(iterations=10_000))
    assert np.linalg.norm(rm - saa) <= 0.1


@pytest.mark.slow
def test_is_lowers_cost_for_deep_otm_call():
    model = gbm(x0=1.0, mu=0.05, sigma=0.4, horizon=1.0)
    payoff = european_call(2.0)
    cheaper = 0
    for seed in range(20):
        cfg = MlmcConfig(max_level=8, pilot_samples=2000, seed=seed)
        schedule = build_saa_schedule(model, payoff, cfg, [1, 2, 3], pilot_size=10_000)
        plain = run_mlmc(model, payoff, cfg, 0.0005)
        weighted = run_is_mlmc(model, payoff, cfg, 0.0005, schedule)
        cheaper += weighted.total_cost < plain.total_cost
    assert cheaper >= 18
