"""
Module: test_baselines.py
Description:
This module contains unit tests for the single-prompt baselines and the portfolio's
degeneration to them at theta 0 and 1.

Tested Functions:
    run_prompt_fl(config, jobs, context): Single global prompt with FedAvg.
    run_isolated(config, jobs, context): Independent per-client prompts.
"""

import numpy as np
import pytest

from src.models.run_config import RunConfig
from src.training.baselines import run_isolated, run_prompt_fl
from src.training.trainer import build_context, run_promptfolio


@pytest.fixture
def config():
    """
    A tiny run with mini-batches so the shuffle streams are exercised.
    Returns:
        RunConfig: K=4, R=4, batch size 8 out of 16 samples.
    """
    return RunConfig(K=4, S=4, L=6, m_p=16, n_k=16, R=4, E=2, seed=0, n_test=0, batch_size=8)


def test_snapshot_layout(config):
    """
    Tests the snapshot keys of both baselines.
    """
    fl = run_prompt_fl(config)
    isolated = run_isolated(config)
    assert fl.kind == "prompt_fl" and isolated.kind == "isolated"
    assert sorted(fl.snapshots) == [0, 1, 2, 3, 4]
    assert set(fl.snapshots[2]) == {"server"}
    assert len(isolated.snapshots[4]["local"]) == 4
    assert len(fl.round_losses) == 4


def test_portfolio_at_theta_zero_is_prompt_fl(config):
    """
    Tests that theta=0 reproduces the single global prompt bit for bit.
    """
    config = config.replace(theta=0.0)
    context = build_context(config)
    portfolio = run_promptfolio(config, context=context)
    baseline = run_prompt_fl(config, context=context)
    assert portfolio.record.eta == baseline.eta
    for t, snapshot in baseline.snapshots.items():
        assert np.array_equal(portfolio.record.snapshots[t]["server"], snapshot["server"])


def test_portfolio_at_theta_one_is_isolated(config):
    """
    Tests that theta=1 reproduces the isolated per-client prompts bit for bit.
    """
    config = config.replace(theta=1.0)
    context = build_context(config)
    portfolio = run_promptfolio(config, context=context)
    baseline = run_isolated(config, context=context)
    assert portfolio.record.eta == baseline.eta
    for t, snapshot in baseline.snapshots.items():
        for mine, theirs in zip(portfolio.record.snapshots[t]["local"], snapshot["local"]):
            assert np.array_equal(mine, theirs)


def test_isolated_clients_do_not_interact(config):
    """
    Tests that a client's isolated prompt does not depend on the other clients.
    """
    four = run_isolated(config.replace(eta=0.05))
    two = run_isolated(config.replace(eta=0.05, K=2))
    for mine, theirs in zip(two.snapshots[4]["local"], four.snapshots[4]["local"][:2]):
        assert np.array_equal(mine, theirs)
