"""Toy encoder, self-supervised losses, analytic token gradients and AdamW.

The text encoder is a frozen linear map applied to the mean of the prompt
tokens and the class-name embedding::

    u_c = W_text @ (t_1 + ... + t_M + e_c) / (M + 1)

which keeps the token -> text feature -> cosine logit structure of a real
prompt-tuned model while making exact gradients cheap.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy.special import xlogy

from .banks import BankEntry, KnowledgeBanks, SOURCES
from .core import prediction_entropy, softmax
from .errors import ConfigurationError, DegenerateInputError, UsageError
from .retrieval import PredictionBundle, retrieve
from . import rng

log = logging.getLogger(__name__)

__all__ = [
    "TunerConfig",
    "ToyEncoder",
    "ClassVocabulary",
    "PromptState",
    "encode_text",
    "encode_text_all",
    "encode_image",
    "predict",
    "self_loss",
    "entropy_loss",
    "grad_tokens",
    "entropy_grad_tokens",
    "optimizer_step",
    "tune_step",
    "tpt_baseline_step",
    "zero_shot_prediction",
]

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class TunerConfig:
    lr: float = 0.005
    weight_decay: float = 0.01
    opt_steps: int = 1
    n_tokens: int = 4
    dim: int = 512
    local_size: int = 32
    hard_size: int = 32
    hard_k: int = 16
    gamma: float = 0.99
    tau: float = 0.01

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        for name in ("opt_steps", "n_tokens", "dim", "local_size", "hard_size", "hard_k"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")

    def replace(self, **changes):
        return TunerConfig(**{**asdict(self), **changes})

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def make_banks(self) -> KnowledgeBanks:
        return KnowledgeBanks.create(self.local_size, self.hard_size, self.hard_k, self.gamma)


@dataclass
class ToyEncoder:
    """Frozen linear text and image maps.

    ``w_text`` is D_out x D (token space to joint space); ``w_image`` is
    D_out x D_img. For precomputed image embeddings ``w_image`` is the identity.
    """

    w_text: np.ndarray
    w_image: np.ndarray

    def __post_init__(self):
        self.w_text = np.asarray(self.w_text, dtype=np.float64)
        self.w_image = np.asarray(self.w_image, dtype=np.float64)
        if self.w_text.shape[0] != self.w_image.shape[0]:
            raise ConfigurationError(
                f"text map outputs {self.w_text.shape[0]} dims, image map {self.w_image.shape[0]}"
            )
        self.w_text.flags.writeable = False
        self.w_image.flags.writeable = False

    @property
    def token_dim(self) -> int:
        return self.w_text.shape[1]

    @classmethod
    def seeded(cls, d_img: int, dim: int, seed: int):
        """Random map with orthonormal rows (or columns when dim < d_img); identity image map."""
        g = rng.generator(seed, "encoder.w_text").standard_normal((max(d_img, dim), min(d_img, dim)))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        w_text = q if d_img >= dim else q.T
        return cls(w_text, np.eye(d_img))


@dataclass
class ClassVocabulary:
    names: list
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 2:
            raise ConfigurationError("vocabulary needs at least two classes")
        if len(self.names) != self.embeddings.shape[0]:
            raise ConfigurationError("one name per class embedding is required")
        if not np.all(np.isfinite(self.embeddings)):
            raise ConfigurationError("class embeddings must be finite")
        if np.any(np.linalg.norm(self.embeddings, axis=1) == 0.0):
            raise ConfigurationError("class embeddings must be non-zero")
        self.embeddings.flags.writeable = False

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass
class PromptState:
    """Learnable prompt tokens (M x D) with AdamW moment buffers."""

    tokens: np.ndarray
    step_count: int = 0
    exp_avg: Optional[np.ndarray] = None
    exp_avg_sq: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.array(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ConfigurationError(f"tokens must be M x D, got shape {self.tokens.shape}")
        if self.exp_avg is None:
            self.exp_avg = np.zeros_like(self.tokens)
        if self.exp_avg_sq is None:
            self.exp_avg_sq = np.zeros_like(self.tokens)

    @classmethod
    def initial(cls, n_tokens: int, dim: int, seed: int, scale: float = 0.02):
        tokens = scale * rng.generator(seed, "prompt.init").standard_normal((n_tokens, dim))
        return cls(tokens)

    def copy(self):
        return PromptState(self.tokens.copy(), self.step_count,
                           self.exp_avg.copy(), self.exp_avg_sq.copy())


def encode_text(encoder: ToyEncoder, tokens, class_embedding):
    tokens = np.asarray(tokens, dtype=np.float64)
    pooled = (tokens.sum(axis=0) + class_embedding) / (tokens.shape[0] + 1)
    return encoder.w_text @ pooled


def encode_text_all(encoder: ToyEncoder, tokens, embeddings):
    """Text features for every class at once (C x D_out)."""
    pooled = (tokens.sum(axis=0) + embeddings) / (tokens.shape[0] + 1)
    return pooled @ encoder.w_text.T


def encode_image(encoder: ToyEncoder, raw):
    return encoder.w_image @ np.asarray(raw, dtype=np.float64)


class _Forward:
    """Text features, cosines and probabilities for one (tokens, image) pair."""

    __slots__ = ("feats", "norms", "v_unit", "cos", "p")

    def __init__(self, encoder, tokens, embeddings, v, tau):
        self.feats = encode_text_all(encoder, tokens, embeddings)
        self.norms = np.sqrt(np.einsum("ij,ij->i", self.feats, self.feats))
        if not self.norms.all():
            zero = int(np.flatnonzero(self.norms == 0.0)[0])
            raise DegenerateInputError(f"zero-norm text feature for class {zero}")
        vn = np.sqrt(v @ v)
        if not vn > 0:
            raise DegenerateInputError("zero-norm image feature")
        self.v_unit = v / vn
        self.cos = (self.feats @ self.v_unit) / self.norms
        self.p = softmax(self.cos / tau)

    def token_grad(self, encoder, n_tokens, dlogits, tau):
        """Backpropagate d loss / d logit through cosine, the linear map and the mean-pool."""
        coef = dlogits / tau / self.norms
        # d cos_c / d u_c = (v_unit - cos_c * u_c / |u_c|) / |u_c|
        du_sum = coef.sum() * self.v_unit - (coef * self.cos / self.norms) @ self.feats
        row = encoder.w_text.T @ du_sum / (n_tokens + 1)
        return np.tile(row, (n_tokens, 1))


def predict(encoder, tokens, vocab, v, tau):
    """Class probabilities for image feature ``v`` under the current tokens."""
    return _Forward(encoder, tokens, vocab.embeddings, np.asarray(v, dtype=np.float64), tau).p


def self_loss(p, target) -> float:
    """Cross-entropy of prediction ``p`` against a fixed soft target."""
    p = np.asarray(p, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if p.shape != target.shape:
        raise UsageError(f"prediction {p.shape} and target {target.shape} differ")
    return float(-xlogy(target, p).sum())


def entropy_loss(p) -> float:
    return prediction_entropy(p)


def _ce_logit_grad(p, target):
    return p - target


def _entropy_logit_grad(p):
    # d H / d logit_j = -p_j (log p_j + H), with p log p := 0 at p = 0
    plogp = xlogy(p, p)
    return -(plogp - p * plogp.sum())


def grad_tokens(encoder, tokens, vocab, v, target, tau):
    """Exact gradient of ``self_loss(predict(...), target)`` w.r.t. the tokens.

    The target is a constant; softmax plus cross-entropy gives
    ``d loss / d logit_c = p_c - target_c``.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    fwd = _Forward(encoder, tokens, vocab.embeddings, np.asarray(v, dtype=np.float64), tau)
    target = np.asarray(target, dtype=np.float64)
    return fwd.token_grad(encoder, tokens.shape[0], _ce_logit_grad(fwd.p, target), tau)


def entropy_grad_tokens(encoder, tokens, vocab, v, tau):
    """Exact gradient of the prediction entropy w.r.t. the tokens."""
    tokens = np.asarray(tokens, dtype=np.float64)
    fwd = _Forward(encoder, tokens, vocab.embeddings, np.asarray(v, dtype=np.float64), tau)
    return fwd.token_grad(encoder, tokens.shape[0], _entropy_logit_grad(fwd.p), tau)


def optimizer_step(state: PromptState, grad, config: TunerConfig) -> PromptState:
    """One AdamW update of the tokens in place (decoupled weight decay, bias-corrected)."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite gradient at step %d; update skipped", state.step_count)
        return state
    state.step_count += 1
    t = state.step_count
    state.tokens *= 1.0 - config.lr * config.weight_decay
    state.exp_avg *= BETA1
    state.exp_avg += (1.0 - BETA1) * grad
    state.exp_avg_sq *= BETA2
    state.exp_avg_sq += (1.0 - BETA2) * grad * grad
    step_size = config.lr / (1.0 - BETA1 ** t)
    denom = np.sqrt(state.exp_avg_sq) / np.sqrt(1.0 - BETA2 ** t) + EPS
    state.tokens -= step_size * state.exp_avg / denom
    return state


def tune_step(state: PromptState, banks: KnowledgeBanks, v, encoder: ToyEncoder,
              vocab: ClassVocabulary, config: TunerConfig,
              enabled: Sequence[str] = SOURCES, adaptive: bool = True) -> PredictionBundle:
    """Process one test sample with historical prompt tuning.

    ``v`` is the encoded image feature. Mutates ``state`` and ``banks`` in
    place and returns the prediction bundle whose fused prediction is the
    reported one. Without any bank source the tokens are left untouched.
    """
    tau = config.tau
    emb = vocab.embeddings
    m = state.tokens.shape[0]
    fwd = _Forward(encoder, state.tokens, emb, v, tau)
    bundle = retrieve(banks.prototypes(enabled), v, fwd.p, tau, enabled=enabled,
                      adaptive=adaptive)
    if bundle.has_sources:
        target = bundle.fused
        for step in range(config.opt_steps):
            if step:
                fwd = _Forward(encoder, state.tokens, emb, v, tau)
            grad = fwd.token_grad(encoder, m, _ce_logit_grad(fwd.p, target), tau)
            optimizer_step(state, grad, config)
        fwd = _Forward(encoder, state.tokens, emb, v, tau)
    banks.update(BankEntry.from_prediction(fwd.feats, fwd.p))
    return bundle


def tpt_baseline_step(state: PromptState, v, encoder, vocab, config: TunerConfig):
    """Entropy-minimisation baseline: predict, then take ``opt_steps`` AdamW steps on the entropy."""
    tau = config.tau
    m = state.tokens.shape[0]
    fwd = _Forward(encoder, state.tokens, vocab.embeddings, v, tau)
    p = fwd.p
    for step in range(config.opt_steps):
        if step:
            fwd = _Forward(encoder, state.tokens, vocab.embeddings, v, tau)
        optimizer_step(state, fwd.token_grad(encoder, m, _entropy_logit_grad(fwd.p), tau), config)
    return p


def zero_shot_prediction(state, v, encoder, vocab, config):
    return predict(encoder, state.tokens, vocab, v, config.tau)
