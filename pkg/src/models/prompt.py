"""
Module: prompt.py
Description: This module provides the learnable prompt and the fixed class prompts.

Classes:
    Prompt: A learnable prompt vector with its role and owner.
    ClassPrompts: The fixed prompts p_+ and p_- of the two classes.

Functions:
    make_class_prompts(m_p, mode, scale, seed, W): Builds the class prompts.
    init_prompt(m_p, sigma_0, seed): Draws the shared prompt initialization.
"""

from __future__ import annotations

import numpy as np

from src.models.errors import DimensionError, InvalidParameterError
from src.models.seeds import make_rng

ROLES = ("global", "local", "mixed")
CLASS_PROMPT_MODES = ("gaussian", "zero", "antipodal")


class Prompt:
    """
    A learnable prompt.

    Attributes:
        values (np.ndarray): The prompt vector in R^{m_p}.
        role (str): 'global', 'local' or 'mixed'.
        owner (str): 'server' or 'client <k>'.
    """

    def __init__(self, values, role: str = "global", owner: str = "server"):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError("a prompt is a vector")
        if not np.all(np.isfinite(values)):
            raise InvalidParameterError("prompt entries must be finite")
        if role not in ROLES:
            raise InvalidParameterError(f"unknown prompt role '{role}'")
        self.values = values
        self.role = role
        self.owner = owner

    @property
    def m_p(self) -> int:
        return self.values.shape[0]

    def __str__(self) -> str:
        return f"Prompt(role={self.role}, owner={self.owner}, norm={np.linalg.norm(self.values):.6g})"


class ClassPrompts:
    """
    Fixed class prompts; p_plus is used for label +1 and p_minus for label -1.

    Attributes:
        p_plus (np.ndarray): Prompt of the positive class.
        p_minus (np.ndarray): Prompt of the negative class.
        mode (str): 'gaussian', 'zero' or 'antipodal'.
        scale (float): sigma_c for 'gaussian', the row offset c for 'antipodal'.
        seed (int): Master seed of the draw.
    """

    def __init__(self, p_plus, p_minus, mode: str = "gaussian", scale: float = 0.0, seed: int = 0):
        self.p_plus = np.array(p_plus, dtype=np.float64)
        self.p_minus = np.array(p_minus, dtype=np.float64)
        if self.p_plus.shape != self.p_minus.shape or self.p_plus.ndim != 1:
            raise DimensionError("class prompts must be vectors of equal length")
        if not (np.all(np.isfinite(self.p_plus)) and np.all(np.isfinite(self.p_minus))):
            raise InvalidParameterError("class prompt entries must be finite")
        self.mode = mode
        self.scale = float(scale)
        self.seed = seed

    def __str__(self) -> str:
        return f"ClassPrompts(mode={self.mode}, scale={self.scale:.6g})"


def make_class_prompts(m_p: int, mode: str = "gaussian", scale: float | None = None,
                       seed: int = 0, W: np.ndarray | None = None) -> ClassPrompts:
    """
    Builds the class prompts.

    'gaussian' draws both prompts i.i.d. N(0, sigma_c^2) (default sigma_c = 0.1/sqrt(m_p)),
    'zero' sets both to 0, 'antipodal' sets p_+- = +-c * sum_r w_r / ||w_r||^2 so that every
    row sees w_r . p_+- = +-c (needs W; default c = 1).

    Args:
        m_p (int): Prompt dimension.
        mode (str): One of CLASS_PROMPT_MODES.
        scale (float | None): sigma_c or c.
        seed (int): Master seed; 'gaussian' uses the 'class_prompts' stream.
        W (np.ndarray | None): Encoder weights, required by 'antipodal'.
    """
    if mode not in CLASS_PROMPT_MODES:
        raise InvalidParameterError(f"unknown class prompt mode '{mode}'")
    if mode == "zero":
        return ClassPrompts(np.zeros(m_p), np.zeros(m_p), mode, 0.0, seed)
    if mode == "gaussian":
        sigma_c = 0.1 / np.sqrt(m_p) if scale is None else float(scale)
        if not sigma_c > 0:
            raise InvalidParameterError("sigma_c must be > 0")
        rng = make_rng(seed, "class_prompts")
        draws = sigma_c * rng.standard_normal((2, m_p))
        return ClassPrompts(draws[0], draws[1], mode, sigma_c, seed)

    if W is None:
        raise InvalidParameterError("antipodal class prompts need the encoder weights")
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] != m_p:
        raise DimensionError("encoder weights do not match m_p")
    c = 1.0 if scale is None else float(scale)
    if not c > 0:
        raise InvalidParameterError("antipodal offset must be > 0")
    direction = (W / np.einsum("ij,ij->i", W, W)[:, None]).sum(axis=0)
    return ClassPrompts(c * direction, -c * direction, mode, c, seed)


def init_prompt(m_p: int, sigma_0: float, seed: int = 0) -> np.ndarray:
    """
    Draws the shared prompt initialization with i.i.d. N(0, sigma_0^2) entries.
    """
    if not sigma_0 >= 0:
        raise InvalidParameterError("sigma_0 must be >= 0")
    rng = make_rng(seed, "init")
    return sigma_0 * rng.standard_normal(m_p)
