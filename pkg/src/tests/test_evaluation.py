"""
Module: test_evaluation.py
Description:
This module contains unit tests for the empirical test error, the run summary and the
experiment sweeps.

Tested Features:
    - empirical_error on hand-built test sets
    - summarize_run and remix_theta on a trained run
    - sweep_theta with a resumable registry
    - Grid validation of the outer sweeps
    - Trend checks of a SweepResult, ties within the standard error and noise attenuation
"""

import math

import numpy as np
import pytest

from src.analytics.evaluation import (
    SweepPoint,
    SweepResult,
    empirical_error,
    noise_attenuation,
    optimal_theta_non_increasing,
    remix_theta,
    summarize_run,
    sweep_clients,
    sweep_heterogeneity,
    sweep_theta,
)
from src.database.db_handler import DatabaseHandler
from src.models.client_data import ClientDataset, gen_client_data
from src.models.errors import EmptyDataError, InvalidParameterError
from src.models.feature_bank import assemble_W, build_feature_bank
from src.models.prompt import make_class_prompts
from src.models.run_config import RunConfig
from src.training.trainer import run_promptfolio


@pytest.fixture
def config():
    """
    The smallest configuration that still has test data.
    Returns:
        RunConfig: K=2, R=2, 50 test samples per client.
    """
    return RunConfig.from_dict({"K": 2, "S": 2, "L": 2, "m_p": 6, "n_k": 8, "R": 2, "E": 1, "seed": 0,
                                "n_test": 50, "eta": 0.1})


@pytest.fixture
def registry():
    """
    An in-memory run registry.
    Returns:
        DatabaseHandler: The registry, closed after the test.
    """
    handler = DatabaseHandler(":memory:")
    yield handler
    handler.close()


@pytest.fixture
def W():
    """
    Encoder weights matching the config fixture's bank shape.
    Returns:
        EncoderWeights: 1+2+2 rows in R^6.
    """
    return assemble_W(build_feature_bank(2, 2, 6, seed=0))


def test_zero_class_prompts_predict_positive_everywhere(W):
    """
    Tests that a zero class difference errs on exactly the negative half of balanced data.
    """
    zero = make_class_prompts(6, "zero")
    test_sets = [gen_client_data(50, 1, 2, 2, 1.0, client=0), gen_client_data(50, 2, 2, 2, 1.0, client=1)]
    report = empirical_error(W, np.zeros(6), [np.zeros(6)] * 2, 0.3, test_sets, zero)
    assert report.per_client.tolist() == [0.5, 0.5]
    assert report.pooled == 0.5
    assert report.pooled_stderr == pytest.approx(math.sqrt(0.25 / 100))


def test_pooled_error_weights_by_sample_count(W):
    """
    Tests that the pooled error is weighted by each client's test set size.
    """
    zero = make_class_prompts(6, "zero")
    positives = ClientDataset(np.zeros((4, 5)), np.ones(4), 1, 0)
    negatives = ClientDataset(np.zeros((12, 5)), -np.ones(12), 2, 1)
    report = empirical_error(W, [np.zeros(6), np.zeros(6)], [np.zeros(6)] * 2, 0.5, [positives, negatives], zero)
    assert report.per_client.tolist() == [0.0, 1.0]
    assert report.counts.tolist() == [4, 12]
    assert report.pooled == pytest.approx(0.75)


def test_empirical_error_input_checks(W):
    """
    Tests empty test sets and a prompt count mismatch.
    """
    zero = make_class_prompts(6, "zero")
    data = gen_client_data(4, 1, 2, 2, 1.0)
    empty = ClientDataset(np.zeros((0, 5)), np.zeros(0), 1)
    with pytest.raises(EmptyDataError):
        empirical_error(W, np.zeros(6), [np.zeros(6)], 0.5, [empty], zero)
    with pytest.raises(EmptyDataError):
        empirical_error(W, np.zeros(6), [], 0.5, [], zero)
    with pytest.raises(InvalidParameterError):
        empirical_error(W, np.zeros(6), [np.zeros(6)] * 2, 0.5, [data], zero)


def test_summarize_run(config):
    """
    Tests the keys and ranges of a run summary.
    """
    summary = summarize_run(run_promptfolio(config))
    for key in ("config_hash", "empirical", "stderr", "analytic", "a", "b", "rho", "theta_star",
                "advantage_upper", "estimates", "chi_mean", "theta_order", "server_noise", "flags"):
        assert key in summary
    assert summary["mode"] == "PromptFolio"
    assert summary["theta"] == 0.2
    assert 0.0 <= summary["empirical"] <= 1.0
    assert len(summary["empirical_per_client"]) == 2
    assert len(summary["estimates"]) == 2
    assert summary["chi_mean"] == pytest.approx(1.0)
    assert summary["final_train_loss"] > 0


def test_remix_reuses_frozen_prompts(config):
    """
    Tests that remixing at the trained theta reproduces the run's own error.
    """
    result = run_promptfolio(config)
    remix = remix_theta(result, (0.0, 0.2, 1.0))
    assert remix.axis == "remix_theta"
    assert [p.axis_value for p in remix.points] == [0.0, 0.2, 1.0]
    assert remix.points[1].empirical == summarize_run(result)["empirical"]
    assert remix.metadata["trained_theta"] == 0.2


def test_sweep_theta_registers_and_resumes(config, registry, monkeypatch):
    """
    Tests that a rerun of a finished sweep comes entirely from the registry.
    """
    first = sweep_theta(config, (0.0, 0.5, 1.0), seeds=(0,), registry=registry)
    assert first.grid == (0.0, 0.5, 1.0)
    assert len(registry.list_runs("theta")) == 3
    assert first.points[0].seeds == (0,)

    def no_training(*args, **kwargs):
        raise AssertionError("registry should have answered")

    monkeypatch.setattr("src.analytics.evaluation.run_promptfolio", no_training)
    second = sweep_theta(config, (0.0, 0.5, 1.0), seeds=(0,), registry=registry)
    assert [p.empirical for p in second.points] == [p.empirical for p in first.points]
    assert second.argmin_empirical() == first.argmin_empirical()


def test_sweep_theta_threads_match_serial(config):
    """
    Tests that parallel sweep points come back in grid order with the same values.
    """
    serial = sweep_theta(config, (0.0, 1.0), seeds=(0, 1))
    threaded = sweep_theta(config, (0.0, 1.0), seeds=(0, 1), jobs=2)
    assert [p.empirical for p in threaded.points] == [p.empirical for p in serial.points]
    assert threaded.points[1].seeds == (0, 1)


def test_sweep_grid_validation(config):
    """
    Tests the rejection of invalid outer and inner grids.
    """
    with pytest.raises(InvalidParameterError):
        sweep_theta(config, (0.5, 0.2))
    with pytest.raises(InvalidParameterError):
        sweep_theta(config, (0.0, 1.5))
    with pytest.raises(InvalidParameterError):
        sweep_clients(config, (1, 2))
    with pytest.raises(InvalidParameterError):
        sweep_clients(config, (2, 3), mode="bogus")
    with pytest.raises(InvalidParameterError):
        sweep_heterogeneity(config, (0.0, 1.0))


def test_client_sweep_with_fixed_total(config, registry):
    """
    Tests that the fixed-total client sweep splits the samples evenly and reports an
    optimal theta per point.
    """
    config = config.replace(theta_grid=(0.0, 1.0))
    result = sweep_clients(config, (2, 4), mode="fixed_total", seeds=(0,), registry=registry)
    assert result.axis == "K"
    assert result.metadata["mode"] == "fixed_total"
    assert all(p.optimal_theta in (0.0, 1.0) for p in result.points)
    sizes = sorted({(run["payload"]["K"], run["payload"]["n_k"]) for run in registry.list_runs("theta")})
    assert sizes == [(2, 8), (4, 4)]
    assert "optimal_theta_non_increasing" in result.summary()


def synthetic(empirical, optimal=None, stderr=0.01):
    points = [SweepPoint(float(i), e, stderr, float("nan"), optimal_theta=None if optimal is None else optimal[i])
              for i, e in enumerate(empirical)]
    return SweepResult("theta", tuple(float(i) / (len(empirical) - 1) for i in range(len(empirical))), points)


def test_argmin_and_interior_gap():
    """
    Tests the argmin over the grid and the interior gap in standard errors.
    """
    result = synthetic([0.3, 0.1, 0.2])
    assert result.argmin_empirical() == 0.5
    assert math.isnan(result.argmin_analytic())
    assert result.interior_gap() == pytest.approx(0.1 / math.sqrt(2e-4))
    assert len(result.rows()) == 3
    assert result.header()[0] == "theta"


def test_optimal_theta_trend():
    """
    Tests the non-increasing check with an explicit and an inner-grid tolerance.
    """
    assert optimal_theta_non_increasing(synthetic([0.1, 0.1, 0.1], optimal=[0.6, 0.4, 0.4]))
    rising = synthetic([0.1, 0.1], optimal=[0.2, 0.5])
    assert not optimal_theta_non_increasing(rising, tolerance=0.1)
    rising.points[0].inner = synthetic([0.1, 0.2, 0.3])
    assert optimal_theta_non_increasing(rising)


def test_flat_minimum_takes_the_largest_tied_theta():
    """
    Tests that errors within the combined standard error of the minimum count as tied.
    """
    result = SweepResult("theta", (0.0, 0.25, 0.5, 0.75, 1.0),
                         [SweepPoint(t, e, 0.005, float("nan"))
                          for t, e in zip((0.0, 0.25, 0.5, 0.75, 1.0), (0.30, 0.2005, 0.2, 0.2008, 0.25))])
    assert result.argmin_empirical() == 0.5
    assert result.tied_thetas() == [0.25, 0.5, 0.75]
    assert result.optimal_theta() == 0.75


def outer(values, curves, grid=(0.0, 0.2, 0.4, 0.6)):
    points = []
    for value, curve in zip(values, curves):
        inner = SweepResult("theta", grid, [SweepPoint(t, e, 0.004, float("nan")) for t, e in zip(grid, curve)])
        points.append(SweepPoint(float(value), min(curve), 0.004, float("nan"),
                                 optimal_theta=inner.optimal_theta(), inner=inner))
    return SweepResult("K", tuple(float(v) for v in values), points)


def test_trend_accepts_ties_within_stderr():
    """
    Tests that argmins flipping between statistically tied thetas do not break the trend,
    while a clear rise does.
    """
    tied_high = [0.40, 0.3222, 0.3221, 0.36]
    tied_low = [0.40, 0.3221, 0.3222, 0.36]
    result = outer((2, 4, 8), [tied_high, tied_low, tied_high])
    assert [p.inner.argmin_empirical() for p in result.points] == [0.4, 0.2, 0.4]
    assert result.optimal_thetas() == [0.4, 0.4, 0.4]
    assert optimal_theta_non_increasing(result, tolerance=0.0)

    rising = outer((2, 4), [tied_high, [0.40, 0.36, 0.35, 0.30]])
    assert not optimal_theta_non_increasing(rising, tolerance=0.0)


def test_noise_attenuation_band():
    """
    Tests the server noise ratio of the extreme client counts against the 1/K band.
    """
    result = outer((2, 4, 8), [[0.3, 0.2, 0.25, 0.3]] * 3)
    for point, (server, client) in zip(result.points, ((0.8, 1.0), (0.45, 1.0), (0.3, 1.1))):
        point.inner.points[0].extras = {"server_noise": server, "client_noise": client}
    attenuation = noise_attenuation(result)
    assert attenuation["ratio"] == pytest.approx(0.375)
    assert attenuation["expected"] == 0.25
    assert attenuation["within_band"]
    assert attenuation["averaged"]
    assert result.summary()["noise_attenuation"]["within_band"]

    result.points[-1].inner.points[0].extras = {"server_noise": 0.6, "client_noise": 0.5}
    attenuation = noise_attenuation(result)
    assert not attenuation["within_band"]
    assert not attenuation["averaged"]
