"""
Module: run_config.py
Description: This module defines the validated run configuration shared by every command.

A configuration is a JSON object. The keys K, S, L, m_p, n_k, R, E and seed are required;
every other knob has a desk-scale default. Unknown keys are rejected so that a typo never
silently falls back to a default.

Classes:
    RunConfig: Frozen, validated set of simulation knobs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from src.models.client_data import LABEL_SCHEMES, POLICIES
from src.models.errors import ConfigError, InvalidParameterError
from src.models.feature_bank import resolve_norms
from src.models.prompt import CLASS_PROMPT_MODES

logger = logging.getLogger(__name__)

REQUIRED = ("K", "S", "L", "m_p", "n_k", "R", "E", "seed")
LOSS_MODES = ("margin", "similarity")
CLIENT_MODES = ("fixed_per_client", "fixed_total")
DEFAULT_THETA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def _default_norms() -> dict:
    return {"global": 1.0, "local": 1.0, "noise": 1.0}


@dataclass(frozen=True)
class RunConfig:
    """
    Every knob of a simulation run.

    Attributes:
        K, S, L, m_p, n_k, R, E (int): Clients, local features, noise features, prompt
            dimension, samples per client, rounds and local epochs per round.
        seed (int): Master seed.
        norms (dict): Feature norms per group ('global', 'local', 'noise').
        sigma_p (float | None): Noise std; derived from target_local_snr when None.
        target_local_snr (float): SNR of the local features used to derive sigma_p.
        sigma_0 (float | None): Prompt initialization std; 0.01/sqrt(m_p) when None.
        class_prompt_mode (str): 'gaussian', 'zero' or 'antipodal'.
        class_prompt_scale (float | None): sigma_c or the antipodal offset.
        eta (float | str): Learning rate, or 'auto' for the halving search.
        eta_init (float): First learning rate tried by the halving search.
        theta (float): Mixing coefficient of a single run.
        theta_grid (tuple): Mixing coefficients of a theta sweep.
        policy (str): Client assignment policy.
        alpha (float | None): Homogeneity level of the Dirichlet policy.
        loss_mode (str): 'margin' or 'similarity'.
        label_scheme (str): 'balanced' or 'random'.
        n_test (int): Test samples per client.
        batch_size (int | None): Mini-batch size; full batch when None.
        max_prompt_norm (float): Divergence bound on every prompt norm.
        snapshot_every (int): Coefficient snapshot cadence in rounds.
        alpha_grid, K_grid, shots_grid (tuple): Outer grids of the other sweeps.
        clients_mode (str): Client sweep keeps n_k ('fixed_per_client') or K*n_k fixed.
        sweep_seeds (tuple | None): Seeds of sweep points; seed, seed+1, seed+2 when None.
    """

    K: int
    S: int
    L: int
    m_p: int
    n_k: int
    R: int
    E: int
    seed: int
    norms: dict = field(default_factory=_default_norms)
    sigma_p: float | None = None
    target_local_snr: float = 0.5
    sigma_0: float | None = None
    class_prompt_mode: str = "gaussian"
    class_prompt_scale: float | None = None
    eta: float | str = "auto"
    eta_init: float = 1.0
    theta: float = 0.2
    theta_grid: tuple = DEFAULT_THETA_GRID
    policy: str = "round_robin"
    alpha: float | None = None
    loss_mode: str = "margin"
    label_scheme: str = "balanced"
    n_test: int = 1000
    batch_size: int | None = None
    max_prompt_norm: float = 1e6
    snapshot_every: int = 1
    alpha_grid: tuple = (0.01, 0.3, 10.0)
    K_grid: tuple = (2, 4, 8)
    shots_grid: tuple = (8, 16, 32, 64)
    clients_mode: str = "fixed_per_client"
    sweep_seeds: tuple | None = None

    def __post_init__(self):
        for name in ("K", "S", "n_k", "R", "E", "seed", "m_p", "L", "n_test", "snapshot_every"):
            _check_int(name, getattr(self, name))
        for name in ("K", "S", "n_k", "E", "m_p", "snapshot_every"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", field=name)
        for name in ("L", "R", "seed", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", field=name)
        if self.m_p < 1 + self.S + self.L:
            raise ConfigError(f"must be at least 1+S+L={1 + self.S + self.L}", field="m_p")

        try:
            resolve_norms(self.norms, self.S, self.L)
        except (InvalidParameterError, TypeError, ValueError) as error:
            raise ConfigError(str(error), field="norms") from error

        self._positive("target_local_snr")
        self._positive("eta_init")
        self._positive("max_prompt_norm")
        for name in ("sigma_p", "sigma_0"):
            value = getattr(self, name)
            if value is not None:
                _check_float(name, value)
                if value < 0:
                    raise ConfigError("must be >= 0", field=name)
        if self.class_prompt_scale is not None:
            self._positive("class_prompt_scale")
        if self.eta != "auto":
            self._positive("eta")
        if self.alpha is not None:
            self._positive("alpha")
        if self.batch_size is not None:
            _check_int("batch_size", self.batch_size)
            if self.batch_size < 1:
                raise ConfigError("must be >= 1", field="batch_size")

        _check_float("theta", self.theta)
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("must lie in [0, 1]", field="theta")

        _choice("class_prompt_mode", self.class_prompt_mode, CLASS_PROMPT_MODES)
        _choice("policy", self.policy, POLICIES)
        _choice("loss_mode", self.loss_mode, LOSS_MODES)
        _choice("label_scheme", self.label_scheme, LABEL_SCHEMES)
        _choice("clients_mode", self.clients_mode, CLIENT_MODES)
        if self.policy == "dirichlet" and self.alpha is None:
            raise ConfigError("dirichlet policy needs alpha", field="alpha")

        object.__setattr__(self, "theta_grid", _grid("theta_grid", self.theta_grid, lower=0.0, upper=1.0))
        object.__setattr__(self, "alpha_grid", _grid("alpha_grid", self.alpha_grid, lower=0.0, strict_lower=True))
        object.__setattr__(self, "K_grid", _grid("K_grid", self.K_grid, lower=1, integer=True))
        object.__setattr__(self, "shots_grid", _grid("shots_grid", self.shots_grid, lower=1, integer=True))
        if self.sweep_seeds is not None:
            seeds = tuple(self.sweep_seeds)
            if not seeds:
                raise ConfigError("must not be empty", field="sweep_seeds")
            for value in seeds:
                _check_int("sweep_seeds", value)
                if value < 0:
                    raise ConfigError("seeds must be >= 0", field="sweep_seeds")
            object.__setattr__(self, "sweep_seeds", seeds)

    def _positive(self, name: str):
        value = getattr(self, name)
        _check_float(name, value)
        if not value > 0:
            raise ConfigError("must be > 0", field=name)

    @property
    def m(self) -> int:
        """Latent dimension 1 + S + L."""
        return 1 + self.S + self.L

    @property
    def resolved_sigma_p(self) -> float:
        """
        The noise std; when not given, the value that puts the mean local feature norm at
        target_local_snr.
        """
        if self.sigma_p is not None:
            return float(self.sigma_p)
        local = resolve_norms(self.norms, self.S, self.L)[1:1 + self.S]
        return float(np.mean(local) / (self.target_local_snr * np.sqrt(self.m)))

    @property
    def resolved_sigma_0(self) -> float:
        return float(self.sigma_0) if self.sigma_0 is not None else 0.01 / np.sqrt(self.m_p)

    @property
    def seeds(self) -> tuple[int, ...]:
        """Seeds of the sweep points."""
        if self.sweep_seeds is not None:
            return self.sweep_seeds
        return (self.seed, self.seed + 1, self.seed + 2)

    def to_dict(self) -> dict:
        """Returns every knob as a JSON-serializable dict."""
        record = {}
        for item in fields(self):
            value = getattr(self, item.name)
            record[item.name] = list(value) if isinstance(value, tuple) else value
        record["norms"] = json.loads(json.dumps(self.norms))
        return record

    def config_hash(self) -> str:
        """
        SHA-256 of the canonical JSON of all knobs (sorted keys, compact separators).
        """
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def short_hash(self) -> str:
        """First 12 hex characters of the config hash, used in file names."""
        return self.config_hash()[:12]

    def replace(self, **changes) -> RunConfig:
        """Returns a validated copy with some knobs changed."""
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, record: Mapping) -> RunConfig:
        """
        Validates a configuration mapping.

        Args:
            record (Mapping): Raw configuration.

        Returns:
            RunConfig: The validated configuration.

        Raises:
            ConfigError: On unknown keys, missing required keys or invalid values.
        """
        if not isinstance(record, Mapping):
            raise ConfigError("configuration must be a JSON object")
        known = {item.name for item in fields(cls)}
        for key in record:
            if key not in known:
                raise ConfigError("unknown configuration key", field=key)
        for key in REQUIRED:
            if key not in record:
                raise ConfigError("required field is missing", field=key)
        values = dict(record)
        if "norms" in values and not isinstance(values["norms"], (Mapping, int, float)):
            raise ConfigError("must be a number or an object", field="norms")
        if "eta" in values and isinstance(values["eta"], str) and values["eta"] != "auto":
            raise ConfigError("must be a number or 'auto'", field="eta")
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> RunConfig:
        """
        Reads a JSON configuration file; syntax errors report line and column.
        """
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as error:
            raise ConfigError(f"cannot read configuration {path}: {error.strerror}") from error
        try:
            record = json.loads(text)
        except json.JSONDecodeError as error:
            raise ConfigError(f"invalid JSON ({error.msg}, column {error.colno})", line=error.lineno) from error
        config = cls.from_dict(record)
        logger.info("loaded configuration %s (hash %s)", path, config.short_hash())
        return config

    def __str__(self) -> str:
        return f"RunConfig(K={self.K}, S={self.S}, L={self.L}, m_p={self.m_p}, theta={self.theta}, hash={self.short_hash()})"


def _check_int(name: str, value):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"must be an integer, got {value!r}", field=name)


def _check_float(name: str, value):
    if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
        raise ConfigError(f"must be a number, got {value!r}", field=name)
    if not np.isfinite(value):
        raise ConfigError("must be finite", field=name)


def _choice(name: str, value, options):
    if value not in options:
        raise ConfigError(f"must be one of {', '.join(options)}, got {value!r}", field=name)


def _grid(name: str, values, lower, upper=None, strict_lower: bool = False, integer: bool = False) -> tuple:
    if isinstance(values, (str, bytes)) or not hasattr(values, "__iter__"):
        raise ConfigError("must be a list", field=name)
    grid = tuple(values)
    if not grid:
        raise ConfigError("must not be empty", field=name)
    for value in grid:
        (_check_int if integer else _check_float)(name, value)
        if value < lower or (strict_lower and value == lower) or (upper is not None and value > upper):
            raise ConfigError(f"value {value} out of range", field=name)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("must be strictly increasing", field=name)
    return grid
