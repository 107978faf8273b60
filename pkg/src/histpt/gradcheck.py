"""Finite-difference verification of the analytic token gradients."""

from dataclasses import dataclass

import numpy as np

from . import rng
from .tuner import ClassVocabulary, ToyEncoder, encode_text_all, entropy_grad_tokens, grad_tokens

__all__ = ["GradCheckResult", "random_problem", "numeric_grad", "relative_error", "check_gradients"]


@dataclass
class GradCheckResult:
    index: int
    n_classes: int
    dim: int
    n_tokens: int
    ce_error: float
    entropy_error: float

    def passed(self, tol):
        return self.ce_error < tol and self.entropy_error < tol


def random_problem(seed, index, tau=0.01):
    """A random (encoder, vocabulary, tokens, image feature, soft target) tuple.

    Class count, width and token count are drawn from C in 2..8, D in 4..32,
    M in 1..4.
    """
    g = rng.generator(seed, "gradcheck", index)
    c = int(g.integers(2, 9))
    d = int(g.integers(4, 33))
    m = int(g.integers(1, 5))
    w_text = g.standard_normal((d, d)) / np.sqrt(d)
    encoder = ToyEncoder(w_text, np.eye(d))
    vocab = ClassVocabulary([f"c{i}" for i in range(c)], g.standard_normal((c, d)))
    tokens = 0.3 * g.standard_normal((m, d))
    v = g.standard_normal(d)
    target = g.dirichlet(np.ones(c))
    return encoder, vocab, tokens, v, target, tau


def log_probabilities(encoder, tokens, vocab, v, tau):
    """Log class probabilities computed stably from the cosine logits.

    Near-certain predictions (1 - p_max around 1e-12) leave only a few
    significant digits in ``p`` itself, which is too coarse for finite
    differences; working in log space with ``log1p`` keeps full precision.
    """
    u = encode_text_all(encoder, tokens, vocab.embeddings)
    z = (u @ v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v)) / tau
    top = int(np.argmax(z))
    rest = np.exp(np.delete(z, top) - z[top]).sum()
    return z - z[top] - np.log1p(rest)


def numeric_grad(fn, tokens, step=1e-5):
    """Central differences of scalar ``fn`` w.r.t. every token entry."""
    grad = np.empty_like(tokens)
    work = tokens.copy()
    for idx in np.ndindex(tokens.shape):
        orig = work[idx]
        work[idx] = orig + step
        hi = fn(work)
        work[idx] = orig - step
        lo = fn(work)
        work[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(n_configs=100, seed=0, step=1e-5, tau=0.01):
    """Compare analytic and numeric gradients of both losses on random problems."""
    out = []
    for i in range(n_configs):
        enc, vocab, tokens, v, target, tau_i = random_problem(seed, i, tau)

        def ce(t):
            return float(-(target * log_probabilities(enc, t, vocab, v, tau_i)).sum())

        def ent(t):
            logp = log_probabilities(enc, t, vocab, v, tau_i)
            return float(-(np.exp(logp) * logp).sum())

        ce_err = relative_error(grad_tokens(enc, tokens, vocab, v, target, tau_i),
                                numeric_grad(ce, tokens, step))
        ent_err = relative_error(entropy_grad_tokens(enc, tokens, vocab, v, tau_i),
                                 numeric_grad(ent, tokens, step))
        out.append(GradCheckResult(i, len(vocab.embeddings), tokens.shape[1], tokens.shape[0],
                                   ce_err, ent_err))
    return out
