"""
Module: test_verification.py
Description:
This module runs the verification suites with reduced case counts and checks the report
format.

Tested Features:
    - Every suite passes at its seed
    - VerificationReport verdicts and first failure
    - Unknown suite names
"""

import json

import pytest

from src.analytics.verification import (
    VerificationReport,
    run_suite,
    verify_degeneration,
    verify_dynamics,
    verify_gaussian,
    verify_gradients,
    verify_portfolio,
)
from src.models.errors import InvalidParameterError


def assert_passed(report: VerificationReport):
    failure = report.first_failure()
    assert failure is None, f"{failure.name}: {failure.detail}"


def test_gradient_suite():
    """
    Tests analytic gradients on a dozen random cases.
    """
    report = verify_gradients(count=12, seed=0)
    assert_passed(report)
    assert {check.name for check in report.checks} >= {"finite differences", "gradients in feature span"}


def test_decomposition_suite():
    """
    Tests the decomposition properties.
    """
    assert_passed(run_suite("decomposition"))


def test_gaussian_suite_with_small_samples():
    """
    Tests the Gaussian model against Monte Carlo on two configurations.
    """
    assert_passed(verify_gaussian(count=2, N=20_000, seed=0))


def test_portfolio_suite():
    """
    Tests the portfolio closed forms on a reduced number of draws.
    """
    report = verify_portfolio(count=40, advantage_count=10, seed=0)
    assert_passed(report)
    assert report.seconds >= 0.0


@pytest.mark.slow
def test_dynamics_suite():
    """
    Tests the coefficient growth properties on short runs.
    """
    assert_passed(verify_dynamics(seed=0))


@pytest.mark.slow
def test_degeneration_suite():
    """
    Tests the bitwise endpoint degeneration.
    """
    assert_passed(verify_degeneration(seed=0))


def test_report_format():
    """
    Tests the verdict, first failure and strict JSON export of a report.
    """
    report = VerificationReport("demo")
    report.add("first", True, "ok", 0.0)
    report.add("second", False, "broken", 2.5)
    report.add("third", False, "also broken")
    assert not report.passed
    assert report.first_failure().name == "second"
    record = report.to_dict()
    assert record["verdict"] == "fail"
    assert record["first_failure"] == "second"
    assert [check["name"] for check in record["checks"]] == ["first", "second", "third"]
    json.dumps(record, allow_nan=False)


def test_unknown_suite():
    """
    Tests that an unknown suite name is rejected.
    """
    with pytest.raises(InvalidParameterError):
        run_suite("everything")
