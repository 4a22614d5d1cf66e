"""
Module: feature_bank.py
Description: This module defines the orthogonal latent feature bank and the frozen
text-encoder weight matrix built from it, plus the derived signal-to-noise ratios
and the client similarity count chi.

Latent coordinates are ordered as [global, local_1..local_S, noise_1..noise_L],
so the latent dimension is m = 1 + S + L and every feature lives in R^{m_p}.

Classes:
    FeatureBank: Immutable bank of the global, local and task-irrelevant features.
    EncoderWeights: The frozen weight matrix W whose rows are the bank features.

Functions:
    resolve_norms(norms, S, L): Expands a per-group norm spec into one norm per feature.
    build_feature_bank(S, L, m_p, norms, seed): Draws and orthogonalizes a bank.
    assemble_W(bank): Stacks the bank rows into the encoder weight matrix.
    snr(bank, sigma_p, which): Signal-to-noise ratio of the global or a local feature.
    chi(assignment, bank, k): Total signal similarity of client k across clients.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence

import numpy as np

from src.models.errors import DimensionError, InvalidParameterError, UnknownClientError
from src.models.seeds import make_rng

logger = logging.getLogger(__name__)

GLOBAL = "global"


class FeatureBank:
    """
    Orthogonal latent features of the synthetic feature model.

    Attributes:
        rows (np.ndarray): Read-only (1+S+L) x m_p array, rows ordered global, local, noise.
        norms (np.ndarray): Requested l2 norm of every row.
        S (int): Number of local task-relevant features.
        L (int): Number of task-irrelevant features.
        seed (int | None): Master seed the bank was drawn from.
    """

    def __init__(self, rows: np.ndarray, S: int, L: int, norms=None, seed: int | None = None):
        """
        Initializes a bank from already orthogonal rows.

        Args:
            rows (np.ndarray): Feature rows, shape (1+S+L, m_p).
            S (int): Number of local features.
            L (int): Number of task-irrelevant features.
            norms (array-like | None): Requested norms; defaults to the realized row norms.
            seed (int | None): Seed recorded for reproducibility.
        """
        rows = np.array(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != 1 + S + L:
            raise DimensionError(f"bank needs {1 + S + L} rows, got shape {rows.shape}")
        rows.setflags(write=False)
        self.rows = rows
        self.S = int(S)
        self.L = int(L)
        if norms is None:
            norms = np.linalg.norm(rows, axis=1)
        self.norms = np.array(norms, dtype=np.float64)
        self.norms.setflags(write=False)
        self.seed = seed

    @property
    def m(self) -> int:
        """Latent dimension 1 + S + L."""
        return 1 + self.S + self.L

    @property
    def m_p(self) -> int:
        """Prompt dimension."""
        return self.rows.shape[1]

    @property
    def mu_g(self) -> np.ndarray:
        return self.rows[0]

    @property
    def nu(self) -> list[np.ndarray]:
        return [self.rows[s] for s in range(1, self.S + 1)]

    @property
    def xi(self) -> list[np.ndarray]:
        return [self.rows[1 + self.S + l] for l in range(self.L)]

    def local(self, s: int) -> np.ndarray:
        """
        Returns the local feature nu_s for s in 1..S.
        """
        if not 1 <= s <= self.S:
            raise InvalidParameterError(f"local feature index {s} outside 1..{self.S}")
        return self.rows[s]

    def squared_norms(self) -> np.ndarray:
        """Realized squared l2 norm of every row."""
        return np.einsum("ij,ij->i", self.rows, self.rows)

    def gram(self) -> np.ndarray:
        """Gram matrix of the bank rows."""
        return self.rows @ self.rows.T

    def noise_slice(self) -> slice:
        """Latent coordinates of the task-irrelevant features."""
        return slice(1 + self.S, 1 + self.S + self.L)

    def to_dict(self) -> dict:
        """
        Returns a JSON-serializable record from which the bank is rebuilt exactly.
        """
        return {
            "S": self.S,
            "L": self.L,
            "m_p": self.m_p,
            "seed": self.seed,
            "norms": self.norms.tolist(),
            "rows": self.rows.tolist(),
        }

    @classmethod
    def from_dict(cls, record: Mapping) -> FeatureBank:
        """
        Rebuilds a bank from a record produced by to_dict.
        """
        rows = np.array(record["rows"], dtype=np.float64)
        if rows.shape[1] != int(record["m_p"]):
            raise DimensionError("bank record m_p does not match its rows")
        return cls(rows, int(record["S"]), int(record["L"]), record["norms"], record.get("seed"))

    def __str__(self) -> str:
        return f"FeatureBank(S={self.S}, L={self.L}, m_p={self.m_p}, seed={self.seed})"


class EncoderWeights:
    """
    The frozen text-encoder weight matrix.

    Attributes:
        W (np.ndarray): Read-only (1+S+L) x m_p matrix, rows mu_G, nu_1..nu_S, xi_1..xi_L.
    """

    def __init__(self, W: np.ndarray):
        W = np.array(W, dtype=np.float64)
        W.setflags(write=False)
        self.W = W

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def __str__(self) -> str:
        return f"EncoderWeights(shape={self.W.shape})"


def resolve_norms(norms, S: int, L: int) -> np.ndarray:
    """
    Expands a norm spec into one requested norm per bank row.

    Args:
        norms: A single positive number, or a mapping with keys 'global', 'local', 'noise'
            whose values are numbers or per-feature sequences (lengths S and L).
        S (int): Number of local features.
        L (int): Number of task-irrelevant features.

    Returns:
        np.ndarray: Norms of length 1 + S + L.
    """
    if isinstance(norms, Mapping):
        unknown = set(norms) - {"global", "local", "noise"}
        if unknown:
            raise InvalidParameterError(f"unknown norm groups: {sorted(unknown)}")
        parts = [
            _group(norms.get("global", 1.0), 1, "global"),
            _group(norms.get("local", 1.0), S, "local"),
            _group(norms.get("noise", 1.0), L, "noise"),
        ]
        resolved = np.concatenate(parts)
    else:
        resolved = np.full(1 + S + L, float(norms))
    if not np.all(np.isfinite(resolved)) or np.any(resolved <= 0):
        raise InvalidParameterError("feature norms must be finite and > 0")
    return resolved


def _group(value, count: int, name: str) -> np.ndarray:
    if isinstance(value, Sequence) and not isinstance(value, str):
        if len(value) != count:
            raise InvalidParameterError(f"'{name}' norms need {count} entries, got {len(value)}")
        return np.asarray(value, dtype=np.float64)
    return np.full(count, float(value))


def build_feature_bank(S: int, L: int, m_p: int, norms=1.0, seed: int = 0) -> FeatureBank:
    """
    Draws 1+S+L Gaussian vectors in R^{m_p}, orthogonalizes them with a QR pass and
    rescales every row to its requested norm.

    Args:
        S (int): Number of local task-relevant features (>= 1).
        L (int): Number of task-irrelevant features (>= 0).
        m_p (int): Prompt dimension, at least 1 + S + L.
        norms: Norm spec, see resolve_norms.
        seed (int): Master seed; the bank uses its 'bank' stream.

    Returns:
        FeatureBank: The orthogonal bank.

    Example:
        >>> bank = build_feature_bank(2, 4, 7, {"global": 2.0, "local": 1.0, "noise": 0.5}, seed=3)
    """
    if S < 1 or L < 0:
        raise InvalidParameterError("need S >= 1 and L >= 0")
    m = 1 + S + L
    if m_p < m:
        raise DimensionError(f"m_p={m_p} is smaller than 1+S+L={m}; features cannot be orthogonal")
    requested = resolve_norms(norms, S, L)

    rng = make_rng(seed, "bank")
    draws = rng.standard_normal((m_p, m))
    q, r = np.linalg.qr(draws)
    # fix the column signs so the basis depends on the draws only
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    basis = (q * signs).T
    rows = basis * requested[:, None]

    bank = FeatureBank(rows, S, L, requested, seed)
    logger.debug("built %s", bank)
    return bank


def assemble_W(bank: FeatureBank) -> EncoderWeights:
    """
    Stacks the bank features into the encoder weight matrix, row order
    [mu_G, nu_1..nu_S, xi_1..xi_L].
    """
    return EncoderWeights(bank.rows.copy())


def snr(bank: FeatureBank, sigma_p: float, which: str | int = GLOBAL) -> float:
    """
    Signal-to-noise ratio ||feature|| / (sigma_p * sqrt(m)).

    Args:
        bank (FeatureBank): The feature bank.
        sigma_p (float): Noise standard deviation (> 0).
        which (str | int): 'global', or a local feature index s in 1..S.

    Returns:
        float: The ratio.
    """
    if not sigma_p > 0:
        raise InvalidParameterError("sigma_p must be > 0")
    feature = bank.mu_g if which == GLOBAL else bank.local(int(which))
    return float(np.linalg.norm(feature) / (sigma_p * np.sqrt(bank.m)))


def chi(assignment, bank: FeatureBank, k: int) -> float:
    """
    Returns sum_k' <mu_k, mu_k'> / ||mu_k||^2 where mu_k is client k's local feature.
    With orthogonal features this is the number of clients sharing client k's feature.

    Args:
        assignment (ClientAssignment): Client -> local feature map.
        bank (FeatureBank): The feature bank.
        k (int): Client id (0-based).
    """
    if not 0 <= k < assignment.K:
        raise UnknownClientError(f"client {k} is not in the assignment of {assignment.K} clients")
    mu_k = bank.local(assignment.local_features[k])
    others = np.stack([bank.local(s) for s in assignment.local_features])
    return float(np.sum(others @ mu_k) / (mu_k @ mu_k))
