"""
Module: client_data.py
Description: This module assigns local features to clients (the heterogeneity knob) and
generates the synthetic labeled image features of every client.

An image feature of client k with local feature s and label y is
    g = [y, 0..0, y (at coordinate s), 0..0, x_1, ..., x_L],   x_l ~ N(0, sigma_p^2).

Classes:
    ClientAssignment: Per-client local feature indices and the policy that drew them.
    ClientDataset: Labeled latent image features of one client.

Functions:
    assign_clients(K, S, policy, seed, alpha): Draws a client assignment.
    gen_client_data(n_k, s, S, L, sigma_p, seed, label_scheme, client): Training data of one client.
    gen_test_data(n_test, assignment, L, sigma_p, seed): Fresh test data for every client.
"""

from __future__ import annotations

import logging
from collections import Counter

import numpy as np

from src.models.errors import DimensionError, InvalidParameterError
from src.models.seeds import make_rng

logger = logging.getLogger(__name__)

POLICIES = ("uniform", "dirichlet", "round_robin")
LABEL_SCHEMES = ("balanced", "random")


class ClientAssignment:
    """
    Maps every client to the local task-relevant feature it observes.

    Attributes:
        local_features (tuple[int, ...]): s_k in 1..S for every client k (0-based ids).
        S (int): Number of local features available.
        policy (str): 'uniform', 'dirichlet' or 'round_robin'.
        alpha (float | None): Homogeneity level of the 'dirichlet' policy.
        seed (int): Master seed of the draw.
    """

    def __init__(self, local_features, S: int, policy: str, alpha: float | None = None, seed: int = 0):
        self.local_features = tuple(int(s) for s in local_features)
        if any(not 1 <= s <= S for s in self.local_features):
            raise InvalidParameterError(f"local feature indices must lie in 1..{S}")
        self.S = int(S)
        self.policy = policy
        self.alpha = alpha
        self.seed = seed

    @property
    def K(self) -> int:
        return len(self.local_features)

    def share_counts(self) -> dict[int, int]:
        """Number of clients per local feature."""
        return dict(Counter(self.local_features))

    def max_share(self) -> float:
        """Largest fraction of clients that share one local feature."""
        return max(self.share_counts().values()) / self.K

    def __str__(self) -> str:
        return f"ClientAssignment(policy={self.policy}, K={self.K}, S={self.S}, features={self.local_features})"


class ClientDataset:
    """
    Labeled latent image features of one client.

    Attributes:
        features (np.ndarray): Read-only (n_k, 1+S+L) image features g.
        labels (np.ndarray): Read-only labels in {+1, -1}.
        s (int): Local feature index of the client.
        client (int): Client id.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, s: int, client: int = 0):
        features = np.array(features, dtype=np.float64)
        labels = np.array(labels, dtype=np.float64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise DimensionError("features must be (n, m) and labels (n,)")
        if labels.size and not np.all(np.abs(labels) == 1.0):
            raise InvalidParameterError("labels must be +1 or -1")
        features.setflags(write=False)
        labels.setflags(write=False)
        self.features = features
        self.labels = labels
        self.s = int(s)
        self.client = int(client)

    @property
    def n_k(self) -> int:
        return self.labels.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n_k

    def samples(self):
        """Iterates (g, y) pairs."""
        return zip(self.features, self.labels)

    def subset(self, index) -> ClientDataset:
        """Returns the samples at the given positions as a new dataset."""
        return ClientDataset(self.features[index], self.labels[index], self.s, self.client)

    def __str__(self) -> str:
        return f"ClientDataset(client={self.client}, s={self.s}, n_k={self.n_k})"


def assign_clients(K: int, S: int, policy: str = "round_robin", seed: int = 0,
                   alpha: float | None = None) -> ClientAssignment:
    """
    Assigns a local feature to every client.

    'round_robin' gives s_k = (k mod S) + 1, 'uniform' draws every s_k uniformly,
    'dirichlet' draws feature proportions from Dirichlet((1 / alpha) * 1_S) and splits the
    shuffled clients over the features by their cumulative proportions. Small alpha gives
    near-equal proportions and clients on distinct features (chi near 1 when K <= S); large
    alpha concentrates the proportions so that clients share a feature (chi near K, i.i.d.).

    Args:
        K (int): Number of clients (>= 1).
        S (int): Number of local features (>= 1).
        policy (str): One of POLICIES.
        seed (int): Master seed; the draw uses its 'assignment' stream.
        alpha (float | None): Homogeneity level (> 0), required for 'dirichlet'.

    Returns:
        ClientAssignment: The assignment.
    """
    if K < 1 or S < 1:
        raise InvalidParameterError("need K >= 1 and S >= 1")
    if policy not in POLICIES:
        raise InvalidParameterError(f"unknown assignment policy '{policy}'")

    if policy == "round_robin":
        features = [(k % S) + 1 for k in range(K)]
        return ClientAssignment(features, S, policy, None, seed)

    rng = make_rng(seed, "assignment")
    if policy == "uniform":
        features = rng.integers(1, S + 1, size=K)
        return ClientAssignment(features, S, policy, None, seed)

    if alpha is None or not alpha > 0:
        raise InvalidParameterError("dirichlet policy needs alpha > 0")
    probs = rng.dirichlet(np.full(S, 1.0 / float(alpha)))
    total = probs.sum()
    if not np.isfinite(total) or total <= 0:
        # every component underflowed; the draw degenerates to a single feature
        probs = np.zeros(S)
        probs[rng.integers(S)] = 1.0
    else:
        probs = probs / total
    order = rng.permutation(K)
    cuts = np.rint(np.cumsum(probs) * K).astype(int)[:-1]
    features = np.empty(K, dtype=int)
    for s, clients in enumerate(np.split(order, cuts), start=1):
        features[clients] = s
    assignment = ClientAssignment(features, S, policy, float(alpha), seed)
    logger.debug("dirichlet(alpha=%s) assignment %s, max share %.3f", alpha, assignment.local_features,
                 assignment.max_share())
    return assignment


def _labels(n: int, scheme: str, rng: np.random.Generator) -> np.ndarray:
    if scheme == "balanced":
        return np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    if scheme == "random":
        return rng.choice(np.array([1.0, -1.0]), size=n)
    raise InvalidParameterError(f"unknown label scheme '{scheme}'")


def _draw(n: int, s: int, S: int, L: int, sigma_p: float, rng: np.random.Generator,
          label_scheme: str) -> tuple[np.ndarray, np.ndarray]:
    if not 1 <= s <= S:
        raise InvalidParameterError(f"local feature index {s} outside 1..{S}")
    if not sigma_p >= 0:
        raise InvalidParameterError("sigma_p must be >= 0")
    labels = _labels(n, label_scheme, rng)
    features = np.zeros((n, 1 + S + L))
    features[:, 0] = labels
    features[:, s] = labels
    if L:
        features[:, 1 + S:] = sigma_p * rng.standard_normal((n, L))
    return features, labels


def gen_client_data(n_k: int, s: int, S: int, L: int, sigma_p: float, seed: int = 0,
                    label_scheme: str = "balanced", client: int = 0) -> ClientDataset:
    """
    Generates the training samples of one client.

    Args:
        n_k (int): Number of samples (>= 1).
        s (int): Local feature index of the client, 1..S.
        S (int): Number of local features.
        L (int): Number of task-irrelevant features.
        sigma_p (float): Noise standard deviation (>= 0; 0 gives noiseless data).
        seed (int): Master seed; the client uses its 'train_data' stream.
        label_scheme (str): 'balanced' (+1, -1, +1, ...) or 'random'.
        client (int): Client id, also the stream index.

    Returns:
        ClientDataset: The samples.
    """
    if n_k < 1:
        raise InvalidParameterError("n_k must be >= 1")
    rng = make_rng(seed, "train_data", client)
    features, labels = _draw(n_k, s, S, L, sigma_p, rng, label_scheme)
    return ClientDataset(features, labels, s, client)


def gen_test_data(n_test: int, assignment: ClientAssignment, L: int, sigma_p: float,
                  seed: int = 0, label_scheme: str = "balanced") -> list[ClientDataset]:
    """
    Generates fresh test samples from every client's distribution, using the 'test_data'
    stream so test draws never coincide with training draws.

    Args:
        n_test (int): Samples per client (>= 0; 0 gives empty datasets).
        assignment (ClientAssignment): Client -> local feature map.
        L (int): Number of task-irrelevant features.
        sigma_p (float): Noise standard deviation (>= 0).
        seed (int): Master seed.
        label_scheme (str): 'balanced' or 'random'.

    Returns:
        list[ClientDataset]: One dataset per client, in client order.
    """
    if n_test < 0:
        raise InvalidParameterError("n_test must be >= 0")
    datasets = []
    for k, s in enumerate(assignment.local_features):
        rng = make_rng(seed, "test_data", k)
        features, labels = _draw(n_test, s, assignment.S, L, sigma_p, rng, label_scheme)
        datasets.append(ClientDataset(features, labels, s, k))
    return datasets
