"""
Module: test_theory.py
Description:
This module contains unit tests for the Gaussian test-margin model and the portfolio
calculators.

Tested Features:
    - analytic_error and its degenerate cases
    - gaussian_test_params and mc_error
    - portfolio_ratio, theta_star and the advantage interval
    - theta_star_order
    - estimate_ab_rho and portfolio_params
"""

import math

import numpy as np
import pytest

from src.analytics.theory import (
    GaussianTestModel,
    advantage_interval,
    analytic_error,
    certified_upper,
    estimate_ab_rho,
    gaussian_test_params,
    mc_error,
    portfolio_params,
    portfolio_ratio,
    ratio_curve,
    theta_star,
    theta_star_details,
    theta_star_order,
)
from src.encoders.text_encoder import class_difference
from src.models.errors import DegenerateModelError, InvalidParameterError
from src.models.feature_bank import assemble_W, build_feature_bank
from src.models.prompt import make_class_prompts


@pytest.fixture
def model_setup():
    """
    A bank, weights, class prompts and two prompts with a moderate test error.
    Returns:
        dict: The ingredients of a client test-margin model.
    """
    bank = build_feature_bank(2, 4, 10, seed=6)
    W = assemble_W(bank)
    rng = np.random.default_rng(6)
    return {
        "bank": bank,
        "W": W,
        "cp": make_class_prompts(10, "gaussian", scale=0.2, seed=6),
        "p_G": 0.5 * rng.standard_normal(10),
        "p_L": 0.5 * rng.standard_normal(10),
    }


@pytest.mark.parametrize("mu, sigma, expected", [
    (0.0, 1.0, 0.5),
    (2.0, 1.0, 0.022750131948179),
    (-2.0, 1.0, 1.0 - 0.022750131948179),
    (3.0, 0.0, 0.0),
    (-3.0, 0.0, 1.0),
])
def test_analytic_error_values(mu, sigma, expected):
    """
    Tests Phi(-mu / sigma) and the sigma = 0 limits.
    """
    assert analytic_error(GaussianTestModel(mu, sigma)) == pytest.approx(expected, abs=1e-14)


def test_analytic_error_edges():
    """
    Tests the undefined case, the far tail and monotonicity in mu.
    """
    with pytest.raises(DegenerateModelError):
        analytic_error(GaussianTestModel(0.0, 0.0))
    with pytest.raises(InvalidParameterError):
        GaussianTestModel(1.0, -1.0)
    tail = analytic_error(GaussianTestModel(30.0, 1.0))
    assert 0.0 < tail < 1e-190
    errors = [analytic_error(GaussianTestModel(mu, 1.0)) for mu in np.linspace(-3, 3, 13)]
    assert all(b < a for a, b in zip(errors, errors[1:]))


def test_gaussian_test_params_formula(model_setup):
    """
    Tests mu = F[0] + F[s] and sigma = sigma_p ||F_noise||.
    """
    s = model_setup
    F = class_difference(s["W"], s["p_G"], s["p_L"], 0.3, s["cp"])
    model = gaussian_test_params(s["W"], s["p_G"], s["p_L"], 0.3, s["cp"], s["bank"], 2, 0.7)
    assert model.mu == pytest.approx(F[0] + F[2])
    assert model.sigma == pytest.approx(0.7 * np.linalg.norm(F[3:]))
    assert model.provenance == "analytic-from-prompt"
    with pytest.raises(InvalidParameterError):
        gaussian_test_params(s["W"], s["p_G"], s["p_L"], 0.3, s["cp"], s["bank"], 3, 0.7)


def test_monte_carlo_agrees_with_the_closed_form(model_setup):
    """
    Tests that the Monte Carlo error is within four standard errors of Phi(-mu / sigma).
    """
    s = model_setup
    args = (s["W"], s["p_G"], s["p_L"], 0.5, s["cp"], s["bank"], 1)
    sigma_p = 0.4
    expected = analytic_error(gaussian_test_params(*args, sigma_p))
    N = 50_000
    estimate, stderr = mc_error(*args, sigma_p, N=N, seed=2, chunk=7_000)
    scale = max(stderr, math.sqrt(expected * (1 - expected) / N), 1.0 / N)
    assert abs(estimate - expected) <= 4 * scale
    assert mc_error(*args, sigma_p, N=N, seed=2, chunk=7_000) == (estimate, stderr)
    with pytest.raises(InvalidParameterError):
        mc_error(*args, sigma_p, N=999)


def test_fitted_model_from_margins():
    """
    Tests the moment fit of sampled margins.
    """
    model = GaussianTestModel.from_margins([1.0, 3.0])
    assert (model.mu, model.sigma, model.provenance) == (2.0, 1.0, "fitted-from-MC")


def test_portfolio_ratio_values():
    """
    Tests the endpoints, the equal-asset midpoint and the fully correlated case.
    """
    assert portfolio_ratio(2.0, 3.0, 0.2, 0.0) == pytest.approx(1.0)
    assert portfolio_ratio(2.0, 3.0, 0.2, 1.0) == pytest.approx(2.0 / 3.0)
    assert portfolio_ratio(1.0, 1.0, 0.0, 0.5) == pytest.approx(math.sqrt(2.0))
    for theta in (0.1, 0.5, 0.9):
        assert portfolio_ratio(1.7, 1.7, 1.0, theta) == pytest.approx(1.0)
    curve = ratio_curve(1.0, 1.0, 0.0, np.array([0.0, 0.5, 1.0]))
    assert np.allclose(curve, [1.0, math.sqrt(2.0), 1.0])
    with pytest.raises(DegenerateModelError):
        portfolio_ratio(1.0, 1.0, -1.0, 0.5)
    with pytest.raises(InvalidParameterError):
        portfolio_ratio(1.0, 0.0, 0.0, 0.5)
    with pytest.raises(InvalidParameterError):
        portfolio_ratio(1.0, 1.0, 1.5, 0.5)


def test_theta_star_cases():
    """
    Tests an interior optimum, the zero root, a projected endpoint and the degenerate case.
    """
    assert theta_star(1.0, 1.0, 0.0) == pytest.approx(0.5)
    theta, root, interior = theta_star_details(0.5, 1.0, 0.5)
    assert theta == 0.0 and root == 0.0 and not interior
    theta, root, interior = theta_star_details(5.0, 0.5, 0.9)
    assert theta == 1.0 and root > 1.0 and not interior
    with pytest.raises(DegenerateModelError):
        theta_star(2.0, 1.0, 1.0)


def test_theta_star_matches_grid_search():
    """
    Tests that the interior optimum maximizes the ratio on a fine grid.
    """
    a, b, rho = 1.5, 1.2, 0.3
    grid = np.linspace(0.0, 1.0, 10_001)
    best = grid[np.argmax(ratio_curve(a, b, rho, grid))]
    assert theta_star(a, b, rho) == pytest.approx(best, abs=2e-4)


def test_advantage_constants():
    """
    Tests the advantage constants and upper end for a = 2, b = 3, rho = 0.
    """
    interval = advantage_interval(2.0, 3.0, 0.0)
    assert (interval.Ca, interval.Cb, interval.Cc) == pytest.approx((10.0, 52.0, 32.0))
    assert interval.upper == pytest.approx(1.0)
    assert interval.certified_upper == pytest.approx(1.0)
    assert interval.agrees and not interval.numerical


def test_advantage_degenerate_case():
    """
    Tests that Ca = 0 falls back to the grid and still gives the whole range.
    """
    interval = advantage_interval(1.0, 1.0, 0.0)
    assert interval.degenerate and interval.numerical
    assert interval.upper == 1.0
    assert interval.certified_upper == 1.0


def test_mix_beats_interpolation_below_certified_upper():
    """
    Tests the advantage inequality on a grid below the certified upper end.
    """
    for a, b, rho in [(0.8, 1.5, 0.2), (2.0, 0.7, -0.3), (1.2, 2.5, 0.6)]:
        upper = certified_upper(a, b, rho)
        grid = np.linspace(0.0, upper, 201)
        mixed = ratio_curve(a, b, rho, grid)
        linear = (1 - grid) + grid * (a / b)
        assert np.all(mixed >= linear - 1e-10)


def test_theta_star_order():
    """
    Tests the order-level predictor values, its trend in K and its errors.
    """
    assert theta_star_order(2, 1.0, 1.0, 1.0) == pytest.approx(1.0 / 9.0)
    assert theta_star_order(4, 4.0, 1.0, 1.0) == 0.0
    values = [theta_star_order(K, 1.0, 1.0, 1.0) for K in (2, 4, 8, 16)]
    assert all(b < a for a, b in zip(values, values[1:]))
    with pytest.raises(DegenerateModelError):
        theta_star_order(1, 1.0, 1.0, 1.0)
    with pytest.raises(InvalidParameterError):
        theta_star_order(4, 5.0, 1.0, 1.0)
    with pytest.raises(InvalidParameterError):
        theta_star_order(4, 1.0, 0.0, 1.0)


def test_estimate_of_identical_prompts(model_setup):
    """
    Tests that a local prompt equal to the global one gives a = b = rho = 1.
    """
    s = model_setup
    estimate = estimate_ab_rho(s["W"], s["p_G"], s["p_G"], s["cp"], s["bank"], 1, 0.5)
    a, b, rho = estimate
    assert (a, b, rho) == pytest.approx((1.0, 1.0, 1.0))
    assert not estimate.degenerate


def test_estimate_flags_vanishing_noise(model_setup):
    """
    Tests that zero class prompts and a zero global prompt are flagged.
    """
    s = model_setup
    zero = make_class_prompts(10, "zero")
    estimate = estimate_ab_rho(s["W"], np.zeros(10), s["p_L"], zero, s["bank"], 1, 0.5)
    assert estimate.degenerate
    assert math.isnan(estimate.a) and math.isnan(estimate.rho)


def test_portfolio_params_bundle():
    """
    Tests the bundled optimum and advantage quantities.
    """
    params = portfolio_params(2.0, 3.0, 0.0)
    assert params.theta_star == pytest.approx(2.0 / 11.0)
    assert params.interior
    assert params.Ca == pytest.approx(10.0)
    assert params.advantage_upper == pytest.approx(1.0)
    assert params.ratio(0.0) == pytest.approx(1.0)
