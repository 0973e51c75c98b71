import math

import numpy as np
import pytest
from scipy.stats import norm

from app.utils.errors import InvalidArgumentError
from app.utils.oracles import (
    black_scholes_price,
    gaussian_cvar,
    gaussian_eta,
    gaussian_var,
    gbm_mean,
    monotone_eta,
    monotone_var_cvar,
    put_second_moment,
)


def test_black_scholes_reference_values():
    assert black_scholes_price(100, 100, 0.05, 0.2, 1.0, "call") == pytest.approx(10.450583572185565, rel=1e-10)
    assert black_scholes_price(100, 100, 0.05, 0.2, 1.0, "put") == pytest.approx(5.573526022256971, rel=1e-10)


def test_put_call_parity_on_arrays():
    spot = np.array([80.0, 100.0, 120.0])
    call = black_scholes_price(spot, 95.0, 0.03, 0.25, 0.5, "call")
    put = black_scholes_price(spot, 95.0, 0.03, 0.25, 0.5, "put")
    np.testing.assert_allclose(call - put, spot - 95.0 * math.exp(-0.015), rtol=1e-12)


def test_digital_and_bad_arguments():
    d2 = (math.log(1 / 1.1) + (0.05 - 0.02) * 1.0) / 0.2
    assert black_scholes_price(1.0, 1.1, 0.05, 0.2, 1.0, "digital") == pytest.approx(math.exp(-0.05) * norm.cdf(d2))
    with pytest.raises(InvalidArgumentError):
        black_scholes_price(1.0, 1.0, 0.05, 0.0, 1.0)
    with pytest.raises(InvalidArgumentError):
        black_scholes_price(1.0, 1.0, 0.05, 0.2, 1.0, "barrier")


def test_gbm_mean():
    assert gbm_mean(2.0, 0.1, 3.0) == pytest.approx(2.0 * math.exp(0.3))


def test_gaussian_risk_measures():
    assert gaussian_eta(1.0) == pytest.approx(0.158655, abs=1e-6)
    assert gaussian_var(0.05) == pytest.approx(1.644854, abs=1e-6)
    assert gaussian_cvar(0.05) == pytest.approx(2.062713, abs=1e-6)


def test_put_second_moment_matches_quadrature():
    rng = np.random.default_rng(3)
    strikes = np.array([90.0, 110.0])
    z = rng.standard_normal(400_000)
    terminal = 100.0 * np.exp((0.05 - 0.02) * 0.5 + 0.2 * math.sqrt(0.5) * z)
    payoff = np.maximum(strikes[np.newaxis, :] - terminal[:, np.newaxis], 0.0).mean(axis=1)
    expected = np.mean(payoff**2)
    assert put_second_moment(100.0, strikes, 0.05, 0.2, 0.5)[0] == pytest.approx(expected, rel=0.02)


def test_monotone_helpers_on_identity_loss():
    # g(z) = −z 时 E[X|Y] 为标准正态，结果与高斯公式一致
    assert monotone_eta(lambda z: -z, 1.0) == pytest.approx(gaussian_eta(1.0), abs=1e-9)
    value_at_risk, cvar = monotone_var_cvar(lambda z: -z, 0.05)
    assert value_at_risk == pytest.approx(gaussian_var(0.05), abs=1e-9)
    assert cvar == pytest.approx(gaussian_cvar(0.05), rel=1e-6)
    assert monotone_eta(lambda z: -z, 50.0) == 0.0
    assert monotone_eta(lambda z: -z, -50.0) == 1.0
