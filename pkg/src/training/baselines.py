"""
Module: baselines.py
Description: The two single-prompt baselines the portfolio degenerates to at its endpoints:
one global prompt trained by FedAvg on every client, and one isolated prompt per client that
is never aggregated.

Both share the loss, shuffle and step helpers of the portfolio trainer so that their
prompt trajectories can be compared bit for bit with the portfolio at theta = 0 and 1.

Classes:
    BaselineResult: Prompt snapshots and losses of a baseline run.

Functions:
    run_prompt_fl(config, jobs, context): Single global prompt with FedAvg.
    run_isolated(config, jobs, context): Independent per-client prompts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from src.models.client_data import ClientDataset
from src.models.run_config import RunConfig
from src.training.trainer import (
    RunContext,
    build_context,
    check_divergence,
    epoch_batches,
    fedavg,
    map_clients,
    select_learning_rate,
    single_prompt_terms,
    snapshot_due,
)

logger = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    """
    Attributes:
        kind (str): 'prompt_fl' or 'isolated'.
        snapshots (dict[int, dict]): Round -> {'server': vector} or {'local': [vectors]}.
        round_losses (list[float]): Mean client loss before the last step of each round.
        eta (float): Learning rate used.
    """

    kind: str
    snapshots: dict = field(default_factory=dict)
    round_losses: list = field(default_factory=list)
    eta: float = 0.0


def _eta(context: RunContext, theta: float) -> float:
    config = context.config
    if config.eta != "auto":
        return float(config.eta)
    eta, _ = select_learning_rate(context.datasets, context.W.W, context.class_prompts, context.p0, theta,
                                  config.loss_mode, config.eta_init)
    return eta


def _descend(p: np.ndarray, data: ClientDataset, context: RunContext, eta: float, round_index: int):
    config = context.config
    losses = []
    for epoch in range(config.E):
        for index in epoch_batches(data.n_k, config.batch_size, config.seed, data.client, round_index, epoch):
            value, rows = single_prompt_terms(data.features[index], data.labels[index], context.W.W, p,
                                              context.class_prompts, config.loss_mode)
            p = p - eta * (context.W.W.T @ rows)
            losses.append(value)
            check_divergence(config.max_prompt_norm, f"client {data.client}, round {round_index}", p)
    return p, losses


def run_prompt_fl(config: RunConfig, jobs: int = 1, context: RunContext | None = None) -> BaselineResult:
    """
    Trains one global prompt: every round each client descends from the server prompt on
    its own data and the server averages the results with weights n_k.
    """
    context = context or build_context(config)
    eta = _eta(context, 0.0)
    server = context.p0.copy()
    result = BaselineResult("prompt_fl", eta=eta)
    result.snapshots[0] = {"server": server.copy()}
    for t in range(1, config.R + 1):
        outcomes = map_clients(lambda k, t=t: _descend(server.copy(), context.datasets[k], context, eta, t),
                               config.K, jobs)
        server = fedavg([p for p, _ in outcomes], context.weights).values
        result.round_losses.append(float(np.mean([losses[-1] for _, losses in outcomes])))
        if snapshot_due(t, config):
            result.snapshots[t] = {"server": server.copy()}
    logger.info("prompt_fl baseline finished after %d rounds", config.R)
    return result


def run_isolated(config: RunConfig, jobs: int = 1, context: RunContext | None = None) -> BaselineResult:
    """
    Trains one prompt per client on its own data only, in the same round and epoch
    structure as the federated runs.
    """
    context = context or build_context(config)
    eta = _eta(context, 1.0)
    prompts = [context.p0.copy() for _ in range(config.K)]
    result = BaselineResult("isolated", eta=eta)
    result.snapshots[0] = {"local": [p.copy() for p in prompts]}
    for t in range(1, config.R + 1):
        outcomes = map_clients(lambda k, t=t: _descend(prompts[k], context.datasets[k], context, eta, t),
                               config.K, jobs)
        prompts = [p for p, _ in outcomes]
        result.round_losses.append(float(np.mean([losses[-1] for _, losses in outcomes])))
        if snapshot_due(t, config):
            result.snapshots[t] = {"local": [p.copy() for p in prompts]}
    logger.info("isolated baseline finished after %d rounds", config.R)
    return result
