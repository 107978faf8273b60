"""Numerical primitives: cosine similarity, temperature softmax, entropy, fusion.

All functions take and return numpy arrays (float64) and never mutate their
inputs. Logarithms are natural; ``0 * log 0`` is taken as 0.
"""

import numpy as np
from scipy.special import xlogy

from .errors import ConfigurationError, DegenerateInputError, UsageError

__all__ = [
    "cosine_similarity",
    "cosine_rows",
    "softmax",
    "class_probabilities",
    "argmax_class",
    "prediction_entropy",
    "fusion_weights",
    "fuse_predictions",
]


def _as_vector(x, name="vector"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise UsageError(f"{name} must be a non-empty 1-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise UsageError(f"{name} contains non-finite values")
    return x


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``.

    Raises :class:`DegenerateInputError` if either vector has zero norm rather
    than returning 0, since a zero text or image feature is always a bug
    upstream.
    """
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    if a.shape != b.shape:
        raise UsageError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(rows, v):
    """Cosine similarity of every row of ``rows`` (C x D) with ``v`` (D,)."""
    rows = np.asarray(rows, dtype=np.float64)
    v = _as_vector(v, "v")
    if rows.ndim != 2 or rows.shape[1] != v.shape[0]:
        raise UsageError(f"feature shape {rows.shape} does not match vector dim {v.shape[0]}")
    if not np.all(np.isfinite(rows)):
        raise UsageError("features contain non-finite values")
    row_norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(row_norms == 0.0)
    if zero.size:
        raise DegenerateInputError(f"zero-norm feature for class {int(zero[0])}")
    vn = np.linalg.norm(v)
    if vn == 0.0:
        raise DegenerateInputError("zero-norm image feature")
    return (rows @ v) / (row_norms * vn)


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max())
    return z / z.sum()


def class_probabilities(text_features, v, tau):
    """Temperature softmax over cosine similarities between class features and ``v``.

    ``p[c] = exp(cos(u_c, v) / tau) / sum_j exp(cos(u_j, v) / tau)``.
    """
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    text_features = np.asarray(text_features, dtype=np.float64)
    if text_features.ndim != 2 or text_features.shape[0] < 2:
        raise UsageError("need at least two class features")
    return softmax(cosine_rows(text_features, v) / tau)


def argmax_class(p) -> int:
    """Index of the most probable class; ties go to the lowest index."""
    # np.argmax returns the first maximal index.
    return int(np.argmax(np.asarray(p)))


def prediction_entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    return float(-xlogy(p, p).sum())


def fusion_weights(predictions):
    """Confidence weights for a list of predictions.

    Softmax over negative entropies: the most confident (lowest-entropy)
    source receives the largest weight.
    """
    if len(predictions) == 0:
        raise UsageError("fusion_weights needs at least one prediction")
    stacked = _stack(predictions)
    if stacked.ndim != 2:
        raise UsageError("predictions must all have the same length")
    neg_entropy = xlogy(stacked, stacked).sum(axis=1)
    return softmax(neg_entropy)


def _stack(predictions):
    try:
        return np.asarray(predictions, dtype=np.float64)
    except ValueError:
        raise UsageError("predictions must all have the same length") from None


def fuse_predictions(predictions, weights):
    stacked = _stack(predictions)
    weights = np.asarray(weights, dtype=np.float64)
    if stacked.ndim != 2 or weights.ndim != 1 or stacked.shape[0] != weights.shape[0]:
        raise UsageError(
            f"{len(predictions)} predictions but {weights.shape} weights"
        )
    return weights @ stacked
