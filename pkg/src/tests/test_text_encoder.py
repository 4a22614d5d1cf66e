"""
Module: test_text_encoder.py
Description:
This module contains unit tests for the frozen text encoder and the margin rules.

Tested Functions:
    text_feature(W, p, p_c): Two-branch text feature.
    mixed_text_feature(W, p_G, p_L, p_c, theta): Theta mix of two features.
    class_difference(W, p_G, p_L, theta, class_prompts): F = h(p_+) - h(p_-).
    margin / batch_margins / predict: Classification rules.
"""

import numpy as np
import pytest

from src.encoders.text_encoder import (
    batch_margins,
    class_difference,
    margin,
    mixed_text_feature,
    predict,
    similarity,
    text_feature,
)
from src.models.errors import DimensionError, InvalidParameterError
from src.models.feature_bank import assemble_W, build_feature_bank
from src.models.prompt import ClassPrompts, Prompt, make_class_prompts


@pytest.fixture
def W():
    """
    Encoder weights of a bank with 1+2+3 features in R^9.
    Returns:
        EncoderWeights: The weights.
    """
    return assemble_W(build_feature_bank(2, 3, 9, seed=5))


@pytest.fixture
def prompts():
    """
    A pair of fixed global and local prompts.
    Returns:
        tuple: (p_G, p_L) as arrays.
    """
    rng = np.random.default_rng(11)
    return rng.standard_normal(9), rng.standard_normal(9)


def test_zero_class_prompt_reduces_to_linear_map(W, prompts):
    """
    Tests that p_c = 0 gives h = W p.
    """
    p_G, _ = prompts
    assert np.allclose(text_feature(W, p_G, np.zeros(9)), W.W @ p_G)
    assert np.allclose(text_feature(W, Prompt(p_G), np.zeros(9)), W.W @ p_G)


def test_antipodal_class_difference_is_clipped(W, prompts):
    """
    Tests that antipodal class prompts give F = 2 clip(W p, -c, c).
    """
    p_G, _ = prompts
    class_prompts = make_class_prompts(9, "antipodal", scale=0.5, W=W.W)
    F = class_difference(W, p_G, p_G, 0.0, class_prompts)
    assert np.allclose(F, 2.0 * np.clip(W.W @ p_G, -0.5, 0.5))


def test_theta_endpoints_return_pure_features(W, prompts):
    """
    Tests that theta 0 and 1 return exactly the global and local features.
    """
    p_G, p_L = prompts
    p_c = make_class_prompts(9, "gaussian", seed=0).p_plus
    assert np.array_equal(mixed_text_feature(W, p_G, p_L, p_c, 0.0), text_feature(W, p_G, p_c))
    assert np.array_equal(mixed_text_feature(W, p_G, p_L, p_c, 1.0), text_feature(W, p_L, p_c))
    middle = mixed_text_feature(W, p_G, p_L, p_c, 0.25)
    assert np.allclose(middle, 0.75 * text_feature(W, p_G, p_c) + 0.25 * text_feature(W, p_L, p_c))
    with pytest.raises(InvalidParameterError):
        mixed_text_feature(W, p_G, p_L, p_c, 1.2)


def test_margin_sign_and_batch_agreement(W, prompts):
    """
    Tests that the margin flips with the label and batch margins match the scalar rule.
    """
    p_G, p_L = prompts
    class_prompts = make_class_prompts(9, "gaussian", seed=2)
    g = np.random.default_rng(3).standard_normal(6)
    positive = margin(g, 1, W, p_G, p_L, 0.4, class_prompts)
    assert margin(g, -1, W, p_G, p_L, 0.4, class_prompts) == pytest.approx(-positive)

    features = np.random.default_rng(4).standard_normal((5, 6))
    labels = np.array([1.0, -1.0, 1.0, 1.0, -1.0])
    batch = batch_margins(features, labels, W, p_G, p_L, 0.4, class_prompts)
    scalar = [margin(f, y, W, p_G, p_L, 0.4, class_prompts) for f, y in zip(features, labels)]
    assert np.allclose(batch, scalar)
    with pytest.raises(InvalidParameterError):
        margin(g, 0, W, p_G, p_L, 0.4, class_prompts)


def test_predict_breaks_ties_towards_positive(W, prompts):
    """
    Tests that a zero class difference predicts +1.
    """
    p_G, p_L = prompts
    zero = ClassPrompts(np.zeros(9), np.zeros(9), mode="zero")
    features = np.random.default_rng(0).standard_normal((4, 6))
    assert predict(features, W, p_G, p_L, 0.5, zero).tolist() == [1.0] * 4


def test_shape_errors(W, prompts):
    """
    Tests that mismatched dimensions raise DimensionError.
    """
    p_G, p_L = prompts
    class_prompts = make_class_prompts(9, "zero")
    with pytest.raises(DimensionError):
        text_feature(W, np.zeros(8), np.zeros(9))
    with pytest.raises(DimensionError):
        similarity(np.zeros(3), np.zeros(4))
    with pytest.raises(DimensionError):
        predict(np.zeros((2, 5)), W, p_G, p_L, 0.5, class_prompts)
