"""Adaptive knowledge retrieval: per-bank predictions fused by confidence."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .banks import SOURCES
from .core import class_probabilities, fuse_predictions, fusion_weights, prediction_entropy, softmax
from .errors import DegenerateInputError

__all__ = ["PredictionBundle", "bank_prediction", "retrieve"]


@dataclass
class PredictionBundle:
    """Everything computed for one sample before the prompt update.

    ``weights`` is None on cold start, when no bank has content yet and
    ``fused`` is just ``raw``.
    """

    raw: np.ndarray
    fused: np.ndarray
    per_bank: dict = field(default_factory=dict)
    weights: Optional[np.ndarray] = None

    @property
    def has_sources(self) -> bool:
        return bool(self.per_bank)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.fused))

    def summary(self) -> dict:
        """JSON-ready digest used for trace logs."""
        out = {
            "raw": self.raw.tolist(),
            "fused": self.fused.tolist(),
            "sources": list(self.per_bank),
            "weights": None if self.weights is None else self.weights.tolist(),
            "entropy": {k: prediction_entropy(p) for k, p in self.per_bank.items()},
        }
        out["entropy"]["raw"] = prediction_entropy(self.raw)
        return out


def bank_prediction(prototype, v, tau):
    """Class probabilities with a bank prototype standing in for the text features."""
    try:
        return class_probabilities(prototype, v, tau)
    except DegenerateInputError as exc:
        raise DegenerateInputError(f"bank prototype: {exc}") from None


def _bank_prediction_fast(prototype, v_unit, tau):
    # Same result as bank_prediction for finite inputs, minus the validation.
    norms = np.sqrt(np.einsum("ij,ij->i", prototype, prototype))
    if not norms.all():
        raise DegenerateInputError(
            f"bank prototype: zero-norm feature for class {int(np.flatnonzero(norms == 0)[0])}")
    return softmax((prototype @ v_unit) / norms / tau)


def retrieve(prototypes: dict, v, raw, tau, enabled=SOURCES, adaptive=True) -> PredictionBundle:
    """Regularized prediction for one sample from the available bank prototypes.

    ``prototypes`` maps source name to a C x D prototype (missing sources are
    treated as empty). Only sources named in ``enabled`` are consulted. With
    ``adaptive=False`` present sources are averaged uniformly instead of being
    weighted by confidence.
    """
    raw = np.asarray(raw, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    vn = np.sqrt(v @ v)
    if vn == 0.0:
        raise DegenerateInputError("zero-norm image feature")
    v_unit = v / vn
    per_bank = {
        name: _bank_prediction_fast(prototypes[name], v_unit, tau)
        for name in SOURCES
        if name in enabled and prototypes.get(name) is not None
    }
    if not per_bank:
        return PredictionBundle(raw=raw, fused=raw)
    preds = list(per_bank.values())
    if adaptive:
        weights = fusion_weights(preds)
    else:
        weights = np.full(len(preds), 1.0 / len(preds))
    return PredictionBundle(raw=raw, fused=fuse_predictions(preds, weights),
                            per_bank=per_bank, weights=weights)
