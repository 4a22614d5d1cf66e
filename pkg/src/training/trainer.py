"""
Module: trainer.py
Description: Losses, analytic prompt gradients, local descent epochs, FedAvg aggregation and
the global-local prompt portfolio training loop.

Every round the server prompt is broadcast to the clients, each client runs E local epochs
of gradient descent on its global copy and its local prompt (the mixed text feature weighs
them by 1 - theta and theta), and the global copies are averaged back into the server
prompt with weights n_k. Local prompts are never aggregated.

Gradients are formed in latent coordinates first: the gradient of a prompt is W^T r for a
row vector r of length 1 + S + L, which keeps every update inside the feature span and
gives the per-label noise split for free.

Classes:
    GradientTerms: Batch loss and the latent gradient rows of both prompts.
    LocalUpdate: Result of the local epochs of one client.
    FederationState: Server prompt, client prompt copies and round counter.
    TrainRecord: Per-round losses, gradient norms and prompt snapshots.
    RunContext: Bank, data and fixed prompts a run is built from.
    RunResult: Everything a finished run produced.

Functions:
    loss(z), loss_slope(z): Margin logistic loss and its slope factor.
    similarity_loss(sim), similarity_slope(sim): The similarity-form loss and its factor.
    gradient_terms(...): Loss and latent gradient rows of a batch.
    batch_loss(...): Mean loss of a batch.
    grad_prompts(...): Gradients with respect to the global and the local prompt.
    local_update(...): E epochs of descent for one client.
    fedavg(prompts, weights): Weighted average in ascending client order.
    select_learning_rate(...): Halving search for a monotone learning rate.
    build_context(config): Draws the bank, data and fixed prompts of a run.
    run_promptfolio(config, jobs, context): Full federated training run.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from src.analytics.decomposition import (
    CoeffTrajectory,
    NoiseAccumulator,
    accumulate_psi_phi,
    decompose,
)
from src.encoders.text_encoder import as_matrix, as_vector, check_theta, class_features, text_feature
from src.models.client_data import ClientAssignment, ClientDataset, assign_clients, gen_client_data, gen_test_data
from src.models.errors import DimensionError, DivergenceError, EmptyDataError, InvalidParameterError
from src.models.feature_bank import EncoderWeights, FeatureBank, assemble_W, build_feature_bank
from src.models.prompt import ClassPrompts, Prompt, init_prompt, make_class_prompts
from src.models.run_config import LOSS_MODES, RunConfig
from src.models.seeds import make_rng

logger = logging.getLogger(__name__)

MONOTONE_TOLERANCE = 1e-12


def _scalar(values):
    return float(values) if np.ndim(values) == 0 else values


def loss(z):
    """Margin logistic loss log(1 + exp(-z)), stable for large |z|."""
    return _scalar(np.logaddexp(0.0, -np.asarray(z, dtype=np.float64)))


def loss_slope(z):
    """Slope factor 1 / (1 + exp(z)) = -dloss/dz, in (0, 1) and decreasing in z."""
    return _scalar(expit(-np.asarray(z, dtype=np.float64)))


def similarity_loss(sim):
    """Similarity-form loss -log(1 + exp(sim)) of the own-class similarity."""
    return _scalar(-np.logaddexp(0.0, np.asarray(sim, dtype=np.float64)))


def similarity_slope(sim):
    """Factor exp(sim) / (1 + exp(sim)) of the similarity-form loss."""
    return _scalar(expit(np.asarray(sim, dtype=np.float64)))


@dataclass
class GradientTerms:
    """
    Batch loss and latent gradient rows; the prompt gradients are W^T rows.

    Attributes:
        loss (float): Mean batch loss.
        rows_G, rows_L (np.ndarray): Latent rows of the global and the local prompt.
        rows_G_pos, rows_G_neg (np.ndarray): Share of rows_G from y = +1 / y = -1 samples.
        rows_L_pos, rows_L_neg (np.ndarray): Same for rows_L.
        n (int): Batch size.
    """

    loss: float
    rows_G: np.ndarray
    rows_L: np.ndarray
    rows_G_pos: np.ndarray
    rows_G_neg: np.ndarray
    rows_L_pos: np.ndarray
    rows_L_neg: np.ndarray
    n: int

    def grads(self, W) -> tuple[np.ndarray, np.ndarray]:
        W = as_matrix(W)
        return W.T @ self.rows_G, W.T @ self.rows_L


def _activation_slopes(W: np.ndarray, p: np.ndarray, p_c: np.ndarray) -> np.ndarray:
    # d h / d (W p) row-wise, with relu'(0) = 0
    a = W @ p
    c = W @ p_c
    return (a + c > 0.0).astype(np.float64) + (c - a > 0.0).astype(np.float64)


def _as_batch(features, labels) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape[0] == 0:
        raise EmptyDataError("batch has no samples")
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise DimensionError(f"features {features.shape} and labels {labels.shape} do not agree")
    return features, labels


def _loss_weights(features, labels, h_plus, h_minus, loss_mode: str):
    """
    Returns the mean loss and the per-sample weights w_i such that the latent rows are
    built from sum_i w_i g_i.
    """
    n = labels.shape[0]
    sim_plus = features @ h_plus
    sim_minus = features @ h_minus
    if loss_mode == "margin":
        z = labels * (sim_plus - sim_minus)
        return float(np.mean(loss(z))), loss_slope(z) * labels / n
    if loss_mode == "similarity":
        sims = np.where(labels > 0, sim_plus, sim_minus)
        return float(np.mean(similarity_loss(sims))), similarity_slope(sims) / n
    raise InvalidParameterError(f"unknown loss mode '{loss_mode}'")


def _branch_rows(W, p, class_prompts: ClassPrompts, scale: float, loss_mode: str,
                 base, base_pos, base_neg) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Latent rows of one prompt whose text feature enters the mix with weight `scale`."""
    if loss_mode == "margin":
        diff = _activation_slopes(W, p, class_prompts.p_plus) - _activation_slopes(W, p, class_prompts.p_minus)
        coef = -scale * diff
        return coef * base, coef * base_pos, coef * base_neg
    pos = -scale * _activation_slopes(W, p, class_prompts.p_plus) * base_pos
    neg = -scale * _activation_slopes(W, p, class_prompts.p_minus) * base_neg
    return pos + neg, pos, neg


def _bases(features, labels, weights):
    positive = labels > 0
    return (features.T @ weights,
            features[positive].T @ weights[positive],
            features[~positive].T @ weights[~positive])


def gradient_terms(features, labels, W, p_G, p_L, theta: float, class_prompts: ClassPrompts,
                   loss_mode: str = "margin") -> GradientTerms:
    """
    Computes the batch loss and the latent gradient rows of both prompts.

    Args:
        features (np.ndarray): Image features, shape (n, m).
        labels (np.ndarray): Labels in {+1, -1}.
        W: Encoder weights.
        p_G, p_L: Global and local prompts.
        theta (float): Mixing coefficient.
        class_prompts (ClassPrompts): Fixed class prompts.
        loss_mode (str): 'margin' or 'similarity'.

    Returns:
        GradientTerms: Loss and rows.
    """
    features, labels = _as_batch(features, labels)
    theta = check_theta(theta)
    W = as_matrix(W)
    p_G = as_vector(p_G)
    p_L = as_vector(p_L)
    h_plus, h_minus = class_features(W, p_G, p_L, theta, class_prompts)
    if features.shape[1] != h_plus.shape[0]:
        raise DimensionError(f"image features have {features.shape[1]} coordinates, W has {h_plus.shape[0]} rows")
    value, weights = _loss_weights(features, labels, h_plus, h_minus, loss_mode)
    base, base_pos, base_neg = _bases(features, labels, weights)
    rows_G, rows_G_pos, rows_G_neg = _branch_rows(W, p_G, class_prompts, 1.0 - theta, loss_mode, base, base_pos, base_neg)
    rows_L, rows_L_pos, rows_L_neg = _branch_rows(W, p_L, class_prompts, theta, loss_mode, base, base_pos, base_neg)
    return GradientTerms(value, rows_G, rows_L, rows_G_pos, rows_G_neg, rows_L_pos, rows_L_neg, labels.shape[0])


def single_prompt_terms(features, labels, W, p, class_prompts: ClassPrompts,
                        loss_mode: str = "margin") -> tuple[float, np.ndarray]:
    """
    Loss and latent rows when one prompt alone produces the text feature.
    """
    features, labels = _as_batch(features, labels)
    W = as_matrix(W)
    p = as_vector(p)
    h_plus = text_feature(W, p, class_prompts.p_plus)
    h_minus = text_feature(W, p, class_prompts.p_minus)
    value, weights = _loss_weights(features, labels, h_plus, h_minus, loss_mode)
    base, base_pos, base_neg = _bases(features, labels, weights)
    rows, _, _ = _branch_rows(W, p, class_prompts, 1.0, loss_mode, base, base_pos, base_neg)
    return value, rows


def _batch_of(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, ClientDataset):
        return batch.features, batch.labels
    features, labels = batch
    return features, labels


def batch_loss(batch, W, p_G, p_L, theta: float, class_prompts: ClassPrompts, loss_mode: str = "margin") -> float:
    """Mean loss of a batch (a ClientDataset or a (features, labels) pair)."""
    features, labels = _as_batch(*_batch_of(batch))
    h_plus, h_minus = class_features(W, p_G, p_L, theta, class_prompts)
    value, _ = _loss_weights(features, labels, h_plus, h_minus, loss_mode)
    return value


def grad_prompts(batch, W, p_G, p_L, theta: float, class_prompts: ClassPrompts,
                 loss_mode: str = "margin") -> tuple[np.ndarray, np.ndarray]:
    """
    Exact gradients of the batch-mean loss with respect to p_G and p_L.

    Raises:
        EmptyDataError: If the batch has no samples.
    """
    features, labels = _batch_of(batch)
    terms = gradient_terms(features, labels, W, p_G, p_L, theta, class_prompts, loss_mode)
    return terms.grads(W)


@dataclass
class LocalUpdate:
    """
    Result of the local epochs of one client.

    Attributes:
        p_G, p_L (np.ndarray): Updated global copy and local prompt.
        losses (list[float]): Batch loss before every step.
        final_loss (float): Full-data loss after the last step.
        grad_norm_G, grad_norm_L (float): Gradient norms of the last step.
        steps (int): Number of descent steps taken.
    """

    p_G: np.ndarray
    p_L: np.ndarray
    losses: list
    final_loss: float
    grad_norm_G: float
    grad_norm_L: float
    steps: int


def epoch_batches(n: int, batch_size: int | None, seed: int, client: int, round_index: int, epoch: int):
    """
    Index sets of the steps of one epoch: the full batch, or a seeded shuffle cut into
    mini-batches.
    """
    if batch_size is None or batch_size >= n:
        return [slice(None)]
    order = make_rng(seed, "batches", client, round_index, epoch).permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


def check_divergence(bound: float, where: str, *prompts: np.ndarray):
    for p in prompts:
        norm = float(np.linalg.norm(p))
        if not np.isfinite(norm) or norm > bound:
            raise DivergenceError(f"{where}: prompt norm {norm:.6g} exceeds the bound {bound:.6g}")


def local_update(p_G, p_L, data: ClientDataset, W, class_prompts: ClassPrompts, theta: float,
                 eta: float, E: int, loss_mode: str = "margin", batch_size: int | None = None,
                 seed: int = 0, round_index: int = 0, max_prompt_norm: float = 1e6,
                 on_step=None) -> LocalUpdate:
    """
    Runs E epochs of gradient descent p <- p - eta * grad on both prompts of one client.

    Args:
        p_G, p_L: Starting global copy and local prompt.
        data (ClientDataset): The client's training samples.
        W: Encoder weights.
        class_prompts (ClassPrompts): Fixed class prompts.
        theta (float): Mixing coefficient.
        eta (float): Learning rate (> 0).
        E (int): Local epochs (>= 1).
        loss_mode (str): 'margin' or 'similarity'.
        batch_size (int | None): Mini-batch size; one full-batch step per epoch when None.
        seed (int): Master seed for the mini-batch shuffles.
        round_index (int): Current round, for the shuffle stream and diagnostics.
        max_prompt_norm (float): Divergence bound.
        on_step (callable | None): Called as on_step(terms, eta) after every step.

    Returns:
        LocalUpdate: Updated prompts and step statistics.

    Raises:
        DivergenceError: If a prompt norm leaves the bound.
    """
    if not eta > 0:
        raise InvalidParameterError("eta must be > 0")
    if E < 1:
        raise InvalidParameterError("E must be >= 1")
    Wm = as_matrix(W)
    p_G = as_vector(p_G).copy()
    p_L = as_vector(p_L).copy()
    losses = []
    grad_G = np.zeros_like(p_G)
    grad_L = np.zeros_like(p_L)
    steps = 0
    for epoch in range(E):
        for index in epoch_batches(data.n_k, batch_size, seed, data.client, round_index, epoch):
            terms = gradient_terms(data.features[index], data.labels[index], Wm, p_G, p_L, theta,
                                   class_prompts, loss_mode)
            grad_G, grad_L = terms.grads(Wm)
            p_G = p_G - eta * grad_G
            p_L = p_L - eta * grad_L
            losses.append(terms.loss)
            steps += 1
            check_divergence(max_prompt_norm, f"client {data.client}, round {round_index}", p_G, p_L)
            if on_step is not None:
                on_step(terms, eta)
    final_loss = batch_loss(data, Wm, p_G, p_L, theta, class_prompts, loss_mode)
    return LocalUpdate(p_G, p_L, losses, final_loss, float(np.linalg.norm(grad_G)),
                       float(np.linalg.norm(grad_L)), steps)


def fedavg(prompts, weights) -> Prompt:
    """
    Weighted average sum_k w_k p_k / sum_k w_k, summed in ascending client order.

    Args:
        prompts (list): Client global prompts (Prompt or arrays), in client order.
        weights (list): Positive weights, normally the sample counts n_k.

    Returns:
        Prompt: The aggregated server prompt.
    """
    vectors = [as_vector(p) for p in prompts]
    weights = [float(w) for w in weights]
    if not vectors:
        raise EmptyDataError("nothing to aggregate")
    if len(weights) != len(vectors):
        raise DimensionError(f"{len(vectors)} prompts but {len(weights)} weights")
    if any(not w > 0 for w in weights):
        raise InvalidParameterError("aggregation weights must be positive")
    total = 0.0
    for weight in weights:
        total += weight
    if total == 0.0:
        raise InvalidParameterError("aggregation weights sum to zero")
    if all(np.array_equal(v, vectors[0]) for v in vectors[1:]):
        return Prompt(vectors[0].copy(), "global", "server")
    acc = np.zeros_like(vectors[0])
    for weight, vector in zip(weights, vectors):
        acc = acc + weight * vector
    return Prompt(acc / total, "global", "server")


def select_learning_rate(datasets, W, class_prompts: ClassPrompts, p0, theta: float,
                         loss_mode: str = "margin", eta_init: float = 1.0, steps: int = 10,
                         max_halvings: int = 40) -> tuple[float, list]:
    """
    Halves the learning rate from eta_init until the first `steps` full-batch steps from
    the initialization are non-increasing in loss on every client.

    Returns:
        tuple[float, list]: The chosen rate and every rate tried.

    Raises:
        DivergenceError: If no rate passes after max_halvings halvings.
    """
    p0 = as_vector(p0)
    tried = []
    eta = float(eta_init)
    for _ in range(max_halvings + 1):
        tried.append(eta)
        if all(_monotone(data, W, class_prompts, p0, theta, loss_mode, eta, steps) for data in datasets):
            logger.info("learning rate %.6g selected after %d tries", eta, len(tried))
            return eta, tried
        eta /= 2.0
    raise DivergenceError(f"no monotone learning rate found down to {tried[-1]:.3g}")


def _monotone(data, W, class_prompts, p0, theta, loss_mode, eta, steps) -> bool:
    p_G = p0.copy()
    p_L = p0.copy()
    losses = []
    for _ in range(steps):
        terms = gradient_terms(data.features, data.labels, W, p_G, p_L, theta, class_prompts, loss_mode)
        grad_G, grad_L = terms.grads(W)
        p_G = p_G - eta * grad_G
        p_L = p_L - eta * grad_L
        losses.append(terms.loss)
        if not (np.all(np.isfinite(p_G)) and np.all(np.isfinite(p_L))):
            return False
    losses.append(batch_loss(data, W, p_G, p_L, theta, class_prompts, loss_mode))
    return all(b <= a + MONOTONE_TOLERANCE * max(1.0, abs(a)) for a, b in zip(losses, losses[1:]))


class FederationState:
    """
    Prompts of a federation between rounds.

    Attributes:
        server_global (Prompt): Aggregated global prompt.
        client_global (list[Prompt]): Global copy of every client.
        client_local (list[Prompt]): Local prompt of every client.
        theta (float): Mixing coefficient, fixed for the run.
        round (int): Completed rounds.
        eta (float): Learning rate.
        E (int): Local epochs per round.
        R (int): Total rounds.
    """

    def __init__(self, server_global: Prompt, client_global, client_local, theta: float,
                 eta: float, E: int, R: int, round_index: int = 0):
        self.server_global = server_global
        self.client_global = list(client_global)
        self.client_local = list(client_local)
        self.theta = check_theta(theta)
        self.eta = eta
        self.E = E
        self.R = R
        self.round = round_index

    @classmethod
    def initial(cls, p0, K: int, theta: float, eta: float, E: int, R: int) -> FederationState:
        """Every prompt starts at the shared initialization p0."""
        p0 = as_vector(p0)
        return cls(
            Prompt(p0.copy(), "global", "server"),
            [Prompt(p0.copy(), "global", f"client {k}") for k in range(K)],
            [Prompt(p0.copy(), "local", f"client {k}") for k in range(K)],
            theta, eta, E, R,
        )

    @property
    def K(self) -> int:
        return len(self.client_local)

    def broadcast(self):
        """Copies the server prompt into every client's global copy."""
        self.client_global = [Prompt(self.server_global.values.copy(), "global", f"client {k}")
                              for k in range(self.K)]

    def __str__(self) -> str:
        return f"FederationState(round={self.round}/{self.R}, K={self.K}, theta={self.theta}, eta={self.eta:.6g})"


@dataclass
class TrainRecord:
    """
    Per-round scalars and prompt snapshots of a run.

    Attributes:
        rows (list[dict]): One entry per (round, client): loss, gradient norms and the
            global / own-local coefficients of both prompts.
        round_losses (list[float]): Mean client loss per round.
        snapshots (dict[int, dict]): Round -> {'server': vector, 'local': [vectors]}.
        eta (float): Learning rate used.
        eta_tried (list[float]): Learning rates tried by the search.
    """

    rows: list = field(default_factory=list)
    round_losses: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    eta: float = 0.0
    eta_tried: list = field(default_factory=list)


@dataclass
class RunContext:
    """
    The drawn ingredients of a run; everything here is read-only during training.

    Attributes:
        config (RunConfig): The configuration.
        bank (FeatureBank): Feature bank.
        W (EncoderWeights): Encoder weights.
        assignment (ClientAssignment): Client -> local feature map.
        datasets (list[ClientDataset]): Training data per client.
        test_sets (list[ClientDataset]): Test data per client.
        class_prompts (ClassPrompts): Fixed class prompts.
        p0 (np.ndarray): Shared prompt initialization.
        sigma_p (float): Noise std.
    """

    config: RunConfig
    bank: FeatureBank
    W: EncoderWeights
    assignment: ClientAssignment
    datasets: list
    test_sets: list
    class_prompts: ClassPrompts
    p0: np.ndarray
    sigma_p: float

    @property
    def weights(self) -> list[int]:
        return [data.n_k for data in self.datasets]


def build_context(config: RunConfig) -> RunContext:
    """
    Draws the bank, the assignment, train and test data, the class prompts and the
    initialization of a run, each from its own seed stream.
    """
    sigma_p = config.resolved_sigma_p
    bank = build_feature_bank(config.S, config.L, config.m_p, config.norms, config.seed)
    W = assemble_W(bank)
    assignment = assign_clients(config.K, config.S, config.policy, config.seed, config.alpha)
    datasets = [
        gen_client_data(config.n_k, s, config.S, config.L, sigma_p, config.seed, config.label_scheme, client=k)
        for k, s in enumerate(assignment.local_features)
    ]
    test_sets = gen_test_data(config.n_test, assignment, config.L, sigma_p, config.seed, config.label_scheme)
    class_prompts = make_class_prompts(config.m_p, config.class_prompt_mode, config.class_prompt_scale,
                                       config.seed, W=W.W)
    p0 = init_prompt(config.m_p, config.resolved_sigma_0, config.seed)
    return RunContext(config, bank, W, assignment, datasets, test_sets, class_prompts, p0, sigma_p)


def resolve_eta(context: RunContext, theta: float) -> tuple[float, list]:
    """Fixed learning rate of the config, or the halving search when it is 'auto'."""
    config = context.config
    if config.eta != "auto":
        return float(config.eta), [float(config.eta)]
    return select_learning_rate(context.datasets, context.W.W, context.class_prompts, context.p0, theta,
                                config.loss_mode, config.eta_init)


def map_clients(function, K: int, jobs: int = 1) -> list:
    """
    Applies function to every client id; results come back in client order whatever
    the number of workers.
    """
    if jobs <= 1 or K <= 1:
        return [function(k) for k in range(K)]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(function, range(K)))


def snapshot_due(round_index: int, config: RunConfig) -> bool:
    return round_index == 0 or round_index % config.snapshot_every == 0 or round_index == config.R


@dataclass
class RunResult:
    """
    Everything a finished run produced.

    Attributes:
        context (RunContext): Drawn ingredients.
        state (FederationState): Final prompts.
        record (TrainRecord): Per-round scalars and snapshots.
        trajectories (dict[str, CoeffTrajectory]): 'server', 'client<k>_global', 'client<k>_local'.
    """

    context: RunContext
    state: FederationState
    record: TrainRecord
    trajectories: dict

    @property
    def config(self) -> RunConfig:
        return self.context.config

    @property
    def mode(self) -> str:
        """'PromptFL-equivalent' at theta = 0, 'CoOp-equivalent' at theta = 1."""
        if self.state.theta == 0.0:
            return "PromptFL-equivalent"
        if self.state.theta == 1.0:
            return "CoOp-equivalent"
        return "PromptFolio"


def _own_coefficients(bank: FeatureBank, p, p0, s: int) -> tuple[float, float]:
    delta = as_vector(p) - p0
    return float(bank.mu_g @ delta), float(bank.local(s) @ delta)


def run_promptfolio(config: RunConfig, jobs: int = 1, context: RunContext | None = None) -> RunResult:
    """
    Runs R rounds of broadcast, E local epochs per client and FedAvg of the global copies.

    Args:
        config (RunConfig): Run configuration.
        jobs (int): Worker threads for the per-client local updates.
        context (RunContext | None): Prebuilt ingredients; drawn from config when None.

    Returns:
        RunResult: Final state, record and coefficient trajectories.

    Raises:
        DivergenceError: If a prompt leaves the norm bound.
    """
    if config.loss_mode not in LOSS_MODES:
        raise InvalidParameterError(f"unknown loss mode '{config.loss_mode}'")
    context = context or build_context(config)
    bank, W, p0 = context.bank, context.W.W, context.p0
    K, L = config.K, config.L
    eta, tried = resolve_eta(context, config.theta)
    logger.info("run %s: K=%d R=%d E=%d theta=%.3g eta=%.6g", config.short_hash(), K, config.R, config.E,
                config.theta, eta)

    state = FederationState.initial(p0, K, config.theta, eta, config.E, config.R)
    record = TrainRecord(eta=eta, eta_tried=tried)
    server_acc = NoiseAccumulator(L)
    global_acc = [NoiseAccumulator(L) for _ in range(K)]
    local_acc = [NoiseAccumulator(L) for _ in range(K)]
    trajectories = {"server": CoeffTrajectory("server")}
    for k in range(K):
        trajectories[f"client{k}_global"] = CoeffTrajectory(f"client{k}_global")
        trajectories[f"client{k}_local"] = CoeffTrajectory(f"client{k}_local")
    _snapshot(trajectories, record, state, bank, p0, 0, server_acc, global_acc, local_acc)

    for t in range(1, config.R + 1):
        def client_round(k: int, t=t) -> LocalUpdate:
            accumulators = [global_acc[k], local_acc[k]]

            def on_step(terms: GradientTerms, step_eta: float):
                accumulators[0] = accumulate_psi_phi(accumulators[0], terms.rows_G_pos, terms.rows_G_neg, step_eta, bank)
                accumulators[1] = accumulate_psi_phi(accumulators[1], terms.rows_L_pos, terms.rows_L_neg, step_eta, bank)

            update = local_update(state.client_global[k], state.client_local[k], context.datasets[k], W,
                                  context.class_prompts, config.theta, eta, config.E, config.loss_mode,
                                  config.batch_size, config.seed, t, config.max_prompt_norm, on_step)
            global_acc[k], local_acc[k] = accumulators
            return update

        updates = map_clients(client_round, K, jobs)
        for k, update in enumerate(updates):
            state.client_global[k] = Prompt(update.p_G, "global", f"client {k}")
            state.client_local[k] = Prompt(update.p_L, "local", f"client {k}")
            s = context.assignment.local_features[k]
            beta_G, gamma_G = _own_coefficients(bank, update.p_G, p0, s)
            beta_L, gamma_L = _own_coefficients(bank, update.p_L, p0, s)
            record.rows.append({
                "round": t, "client": k, "loss": update.final_loss,
                "grad_norm_global": update.grad_norm_G, "grad_norm_local": update.grad_norm_L,
                "beta_global": beta_G, "gamma_global": gamma_G, "beta_local": beta_L, "gamma_local": gamma_L,
            })
        record.round_losses.append(float(np.mean([u.final_loss for u in updates])))
        logger.debug("round %d: mean train loss %.6g", t, record.round_losses[-1])

        if snapshot_due(t, config):
            for k in range(K):
                trajectories[f"client{k}_global"].append(
                    decompose(state.client_global[k], p0, bank, t, global_acc[k], f"client{k}_global"))
        state.server_global = fedavg(state.client_global, context.weights)
        server_acc = NoiseAccumulator.average(global_acc, context.weights)
        state.round = t
        if snapshot_due(t, config):
            _snapshot(trajectories, record, state, bank, p0, t, server_acc, None, local_acc)
        state.broadcast()
        global_acc = [server_acc.copy() for _ in range(K)]

    logger.info("run %s finished: final mean train loss %s", config.short_hash(),
                f"{record.round_losses[-1]:.6g}" if record.round_losses else "n/a")
    return RunResult(context, state, record, trajectories)


def _snapshot(trajectories, record, state, bank, p0, t, server_acc, global_acc, local_acc):
    trajectories["server"].append(decompose(state.server_global, p0, bank, t, server_acc, "server"))
    for k in range(state.K):
        if global_acc is not None:
            trajectories[f"client{k}_global"].append(
                decompose(state.client_global[k], p0, bank, t, global_acc[k], f"client{k}_global"))
        trajectories[f"client{k}_local"].append(
            decompose(state.client_local[k], p0, bank, t, local_acc[k], f"client{k}_local"))
    record.snapshots[t] = {
        "server": state.server_global.values.copy(),
        "local": [p.values.copy() for p in state.client_local],
    }
