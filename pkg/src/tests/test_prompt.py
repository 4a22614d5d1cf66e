"""
Module: test_prompt.py
Description:
This module contains unit tests for the learnable prompt, the class prompts and the
seeded random streams.

Tested Features:
    - Prompt validation
    - Class prompt modes and validation
    - Prompt initialization
    - Independent random streams
"""

import numpy as np
import pytest

from src.models.errors import DimensionError, InvalidParameterError
from src.models.feature_bank import assemble_W, build_feature_bank
from src.models.prompt import ClassPrompts, Prompt, init_prompt, make_class_prompts
from src.models.seeds import make_rng


@pytest.fixture
def W():
    """
    Encoder weights of a small bank with unequal norms.
    Returns:
        np.ndarray: 1+2+3 rows in R^8.
    """
    bank = build_feature_bank(2, 3, 8, {"global": 3.0, "local": 2.0, "noise": 0.5}, seed=1)
    return assemble_W(bank).W


def test_prompt_validation():
    """
    Tests that a prompt must be a finite vector with a known role.
    """
    prompt = Prompt([1.0, 2.0], role="local", owner="client 3")
    assert prompt.m_p == 2
    assert "client 3" in str(prompt)
    with pytest.raises(DimensionError):
        Prompt(np.zeros((2, 2)))
    with pytest.raises(InvalidParameterError):
        Prompt([1.0, np.nan])
    with pytest.raises(InvalidParameterError):
        Prompt([1.0], role="server")


def test_class_prompt_validation():
    """
    Tests that the class prompts keep their vectors and reject mismatched or non-finite input.
    """
    prompts = ClassPrompts([1.0, 0.0], [0.0, 1.0])
    assert prompts.p_plus.tolist() == [1.0, 0.0]
    assert prompts.p_minus.tolist() == [0.0, 1.0]
    with pytest.raises(InvalidParameterError):
        ClassPrompts([1.0, np.nan], [0.0, 1.0])
    with pytest.raises(DimensionError):
        ClassPrompts([1.0], [1.0, 2.0])


def test_zero_and_gaussian_class_prompts():
    """
    Tests the zero mode and the seeded Gaussian mode with its default scale.
    """
    zero = make_class_prompts(5, "zero")
    assert not np.any(zero.p_plus) and not np.any(zero.p_minus)
    first = make_class_prompts(16, "gaussian", seed=4)
    second = make_class_prompts(16, "gaussian", seed=4)
    assert first.scale == pytest.approx(0.025)
    assert np.array_equal(first.p_plus, second.p_plus)
    assert not np.array_equal(first.p_plus, first.p_minus)
    with pytest.raises(InvalidParameterError):
        make_class_prompts(4, "gaussian", scale=0.0)
    with pytest.raises(InvalidParameterError):
        make_class_prompts(4, "uniform")


def test_antipodal_class_prompts_offset_every_row(W):
    """
    Tests that every encoder row sees w_r . p_+- = +-c.
    """
    prompts = make_class_prompts(8, "antipodal", scale=0.7, W=W)
    assert np.allclose(W @ prompts.p_plus, 0.7)
    assert np.allclose(W @ prompts.p_minus, -0.7)
    with pytest.raises(InvalidParameterError):
        make_class_prompts(8, "antipodal")
    with pytest.raises(DimensionError):
        make_class_prompts(9, "antipodal", W=W)


def test_init_prompt():
    """
    Tests the seeded initialization and the zero std case.
    """
    assert np.array_equal(init_prompt(6, 0.1, seed=2), init_prompt(6, 0.1, seed=2))
    assert not np.any(init_prompt(6, 0.0))
    with pytest.raises(InvalidParameterError):
        init_prompt(6, -0.1)


def test_random_streams_are_independent():
    """
    Tests that streams and indices give different draws and that bad keys are rejected.
    """
    bank_draw = make_rng(0, "bank").standard_normal(4)
    assert np.array_equal(bank_draw, make_rng(0, "bank").standard_normal(4))
    assert not np.array_equal(bank_draw, make_rng(0, "init").standard_normal(4))
    assert not np.array_equal(make_rng(0, "train_data", 0).standard_normal(4),
                              make_rng(0, "train_data", 1).standard_normal(4))
    with pytest.raises(InvalidParameterError):
        make_rng(0, "weights")
    with pytest.raises(InvalidParameterError):
        make_rng(-1, "bank")
