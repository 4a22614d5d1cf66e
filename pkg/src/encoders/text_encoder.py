"""
Module: text_encoder.py
Description: The frozen two-branch text encoder, the theta-mixed text feature and the
similarity / margin rules used to classify latent image features.

For a prompt p and a class prompt p_c the text feature is, row by row,
    h = relu(W p + W p_c) - relu(-W p + W p_c)
so with p_c = 0 it reduces exactly to W p.

Functions:
    as_vector(p): Returns the raw vector of a Prompt or array.
    as_matrix(W): Returns the raw matrix of EncoderWeights or an array.
    text_feature(W, p, p_c): Text feature of one prompt and one class prompt.
    mixed_text_feature(W, p_G, p_L, p_c, theta): Convex mix of the global and local features.
    class_difference(W, p_G, p_L, theta, class_prompts): F = h_mixed(p_+) - h_mixed(p_-).
    similarity(g, h): Inner product of an image and a text feature.
    margin(g, y, W, p_G, p_L, theta, class_prompts): Signed class-difference margin.
    batch_margins(features, labels, W, p_G, p_L, theta, class_prompts): Margins of many samples.
    predict(features, W, p_G, p_L, theta, class_prompts): Predicted labels.
"""

from __future__ import annotations

import numpy as np

from src.models.errors import DimensionError, InvalidParameterError
from src.models.feature_bank import EncoderWeights
from src.models.prompt import ClassPrompts, Prompt


def as_vector(p) -> np.ndarray:
    """Returns the raw vector of a Prompt or an array-like."""
    if isinstance(p, Prompt):
        return p.values
    return np.asarray(p, dtype=np.float64)


def as_matrix(W) -> np.ndarray:
    """Returns the raw matrix of EncoderWeights or an array-like."""
    if isinstance(W, EncoderWeights):
        return W.W
    return np.asarray(W, dtype=np.float64)


def check_theta(theta: float) -> float:
    theta = float(theta)
    if not 0.0 <= theta <= 1.0:
        raise InvalidParameterError(f"theta must lie in [0, 1], got {theta}")
    return theta


def check_label(y) -> float:
    if y != 1 and y != -1:
        raise InvalidParameterError(f"label must be +1 or -1, got {y}")
    return float(y)


def text_feature(W, p, p_c) -> np.ndarray:
    """
    Computes the text feature of prompt p under class prompt p_c.

    Args:
        W (EncoderWeights | np.ndarray): Encoder weights, shape (m, m_p).
        p (Prompt | np.ndarray): Learnable prompt.
        p_c (np.ndarray): Class prompt.

    Returns:
        np.ndarray: Latent text feature of length m.
    """
    W = as_matrix(W)
    p = as_vector(p)
    p_c = as_vector(p_c)
    if W.ndim != 2 or p.shape != (W.shape[1],) or p_c.shape != (W.shape[1],):
        raise DimensionError(f"W {W.shape}, prompt {p.shape} and class prompt {p_c.shape} do not agree")
    a = W @ p
    c = W @ p_c
    return np.maximum(a + c, 0.0) - np.maximum(c - a, 0.0)


def mixed_text_feature(W, p_G, p_L, p_c, theta: float) -> np.ndarray:
    """
    Returns (1 - theta) h(p_G) + theta h(p_L). At theta = 0 and theta = 1 the pure
    feature is returned unchanged.
    """
    theta = check_theta(theta)
    if theta == 0.0:
        return text_feature(W, p_G, p_c)
    if theta == 1.0:
        return text_feature(W, p_L, p_c)
    return (1.0 - theta) * text_feature(W, p_G, p_c) + theta * text_feature(W, p_L, p_c)


def class_features(W, p_G, p_L, theta: float, class_prompts: ClassPrompts) -> tuple[np.ndarray, np.ndarray]:
    """Mixed text features of the positive and the negative class."""
    return (mixed_text_feature(W, p_G, p_L, class_prompts.p_plus, theta),
            mixed_text_feature(W, p_G, p_L, class_prompts.p_minus, theta))


def class_difference(W, p_G, p_L, theta: float, class_prompts: ClassPrompts) -> np.ndarray:
    """
    Returns F = h_mixed(p_+) - h_mixed(p_-), the latent direction a test sample is
    projected on; the margin of (g, y) is y <g, F>.
    """
    h_plus, h_minus = class_features(W, p_G, p_L, theta, class_prompts)
    return h_plus - h_minus


def similarity(g, h) -> float:
    """Inner product <g, h>."""
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if g.shape != h.shape or g.ndim != 1:
        raise DimensionError(f"cannot compare features of shapes {g.shape} and {h.shape}")
    return float(np.dot(g, h))


def margin(g, y, W, p_G, p_L, theta: float, class_prompts: ClassPrompts) -> float:
    """
    Computes z = y * (sim(g, h_mixed(p_+)) - sim(g, h_mixed(p_-))). Positive z means
    the sample is classified correctly.

    Args:
        g (np.ndarray): Latent image feature.
        y (int): Label, +1 or -1.
        W: Encoder weights.
        p_G, p_L: Global and local prompts.
        theta (float): Mixing coefficient.
        class_prompts (ClassPrompts): Fixed class prompts.

    Returns:
        float: The margin.
    """
    y = check_label(y)
    h_plus, h_minus = class_features(W, p_G, p_L, theta, class_prompts)
    return y * (similarity(g, h_plus) - similarity(g, h_minus))


def _check_batch(features: np.ndarray, m: int):
    if features.ndim != 2 or features.shape[1] != m:
        raise DimensionError(f"image features of shape {features.shape} do not match latent dimension {m}")


def batch_margins(features, labels, W, p_G, p_L, theta: float, class_prompts: ClassPrompts) -> np.ndarray:
    """Margins of many samples, computed exactly as margin() does for each row."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    h_plus, h_minus = class_features(W, p_G, p_L, theta, class_prompts)
    _check_batch(features, h_plus.shape[0])
    return labels * (features @ h_plus - features @ h_minus)


def predict(features, W, p_G, p_L, theta: float, class_prompts: ClassPrompts) -> np.ndarray:
    """
    Predicts +1 when sim(+) - sim(-) >= 0 and -1 otherwise.
    """
    features = np.asarray(features, dtype=np.float64)
    h_plus, h_minus = class_features(W, p_G, p_L, theta, class_prompts)
    _check_batch(features, h_plus.shape[0])
    return np.where(features @ h_plus - features @ h_minus >= 0.0, 1.0, -1.0)
