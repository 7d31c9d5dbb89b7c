"""Training objectives.

Structural loss on the binary edges, knowledge-transfer label combination
and soft-target regression, softmax cross-entropy on the one-hot label,
and the (weighted) generative negative log-likelihood.
"""

import numpy as np

from . import tensor as T
from .encoders import PAD_ID, token_mask
from .errors import ConfigError, LabelError, NumericError, ShapeError, VocabError
from .graph import support_mask
from .nn import Linear, Module, param, xavier_uniform

SCORE_CLAMP = 1e-7
START_ID = 1


def structural_loss(C, A_b, support=None):
    """Mean squared difference between supervision ``C`` and binary edges ``A_b`` on the support.

    With square inputs the support defaults to the strictly upper triangle.
    """
    A_b = T.as_tensor(A_b)
    C = np.asarray(C, dtype=T.DTYPE)
    if C.shape != A_b.shape:
        raise ShapeError(f"structural_loss: C {C.shape} vs A_b {A_b.shape}")
    if support is None:
        support = support_mask(C.shape[0])
    support = np.asarray(support, dtype=bool)
    count = int(support.sum())
    if count == 0:
        return T.Tensor(0.0)
    diff = (A_b - C) * support
    return T.sum(T.square(diff)) / float(count)


def combine_labels(y_sparse, y_dense):
    """Elementwise max of the one-hot label and the teacher's scores."""
    y_sparse = np.asarray(y_sparse, dtype=T.DTYPE)
    y_dense = np.asarray(y_dense, dtype=T.DTYPE)
    if y_sparse.shape != y_dense.shape:
        raise ShapeError(f"combine_labels: {y_sparse.shape} vs {y_dense.shape}")
    for name, y in (("sparse", y_sparse), ("dense", y_dense)):
        if np.any(~np.isfinite(y)) or np.any(y < 0) or np.any(y > 1):
            raise LabelError(f"{name} labels must lie in [0, 1]")
    return np.maximum(y_sparse, y_dense)


def one_hot(index, n):
    index = np.atleast_1d(np.asarray(index))
    if np.any(index < 0) or np.any(index >= n):
        raise LabelError(f"ground-truth index out of range for {n} candidates")
    out = np.zeros((index.size, n))
    out[np.arange(index.size), index] = 1.0
    return out


def answer_logits(M_a, h):
    """M_a h^T for candidates ``(..., N, d)`` and round states ``(..., d)``."""
    d = h.shape[-1]
    return T.sum(M_a * T.reshape(h, (*h.shape[:-1], 1, d)), axis=-1)


def predict_scores(M_a, h_t):
    """s_t = sigmoid(M_a h_t^T), one score per candidate.

    ``h_t`` is ``(d,)`` for one round or ``(T, d)`` against ``M_a`` of shape ``(T, N, d)``.
    """
    return T.sigmoid(answer_logits(M_a, T.as_tensor(h_t)))


def kt_loss(y_hat, s):
    """-sum y ln s + (1 - y) ln(1 - s) over every round and candidate, with s clamped."""
    y = np.asarray(y_hat, dtype=T.DTYPE)
    if y.shape != s.shape:
        raise ShapeError(f"kt_loss: labels {y.shape} vs scores {s.shape}")
    if np.isnan(s.data).any() or np.isnan(y).any():
        raise NumericError("knowledge-transfer loss got NaN scores or labels")
    sc = T.clamp(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    loss = -T.sum(y * T.log(sc) + (1.0 - y) * T.log(1.0 - sc))
    if not np.isfinite(loss.data):
        raise NumericError("knowledge-transfer loss is not finite")
    return loss


def discriminative_ce_loss(logits, gt):
    """Softmax cross-entropy of the ground truth, summed over rounds."""
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    n = logits.shape[-1]
    if n < 2:
        raise LabelError("cross-entropy needs at least two candidates")
    gt = np.atleast_1d(np.asarray(gt))
    if gt.shape != (logits.shape[0],):
        raise ShapeError(f"expected {logits.shape[0]} ground-truth indices, got {gt.shape}")
    mask = one_hot(gt, n)
    return -T.sum(T.log_softmax(logits, axis=-1) * mask)


def total_loss(answer_loss, struct_loss, lam=1.0):
    if lam < 0:
        raise ConfigError(f"structural weight must be >= 0, got {lam}")
    if struct_loss is None or lam == 0:
        return answer_loss
    return answer_loss + lam * struct_loss


# ---------------------------------------------------------------------------
# generative decoder
# ---------------------------------------------------------------------------


class AnswerDecoder(Module):
    """LSTM language model over answer tokens, initialised with the round state."""

    def __init__(self, rng, vocab_size, d_h):
        self.W = param(xavier_uniform(rng, 2 * d_h, 4 * d_h))
        self.b = param(np.zeros(4 * d_h))
        self.out = Linear(rng, d_h, vocab_size)
        self.vocab_size = vocab_size

    def sequence_log_likelihood(self, h0, seqs, embed):
        """log p(seq | h0) per row of ``seqs`` (B, L), summed over non-pad tokens."""
        seqs = np.atleast_2d(np.asarray(seqs))
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.vocab_size):
            raise VocabError(f"answer token outside vocabulary of size {self.vocab_size}")
        mask = token_mask(seqs)
        width = max(1, int(mask.any(axis=0).nonzero()[0].max(initial=-1)) + 1)
        seqs, mask = seqs[:, :width], mask[:, :width]
        inputs = np.concatenate([np.full((seqs.shape[0], 1), START_ID), seqs[:, :-1]], axis=1)
        inputs = np.where(mask, inputs, PAD_ID)
        hs = T.lstm_sequence(embed(inputs), self.W, self.b, mask, h0=h0)
        logp = T.log_softmax(self.out(hs), axis=-1)
        B, L = seqs.shape
        picked = logp[np.arange(B)[:, None], np.arange(L)[None, :], seqs]
        return T.sum(picked * mask, axis=-1)


def weighted_nll(h, seqs, weights, decoder, embed):
    """-sum_b weights[b] * log p(seqs[b] | h[b])."""
    ll = decoder.sequence_log_likelihood(h, seqs, embed)
    return -T.sum(ll * np.asarray(weights, dtype=T.DTYPE))


def generative_nll(h, answers, decoder, embed):
    """-sum_t log p(a_t | h_t) for ground-truth answers ``(T, L)``."""
    answers = np.atleast_2d(np.asarray(answers))
    if answers.shape[0] != h.shape[0]:
        raise ShapeError(f"{answers.shape[0]} answers for {h.shape[0]} round states")
    if not token_mask(answers).any(axis=1).all():
        raise ShapeError("every answer needs at least one token")
    return weighted_nll(h, answers, np.ones(answers.shape[0]), decoder, embed)


def top_candidates(y_hat, I):
    """Indices ``(T, I)`` of the I highest combined labels per round; ties go to the lower index."""
    y_hat = np.atleast_2d(np.asarray(y_hat))
    n = y_hat.shape[-1]
    if I < 1 or I > n:
        raise ConfigError(f"top-I must be in [1, {n}], got {I}")
    idx = np.arange(n)
    return np.stack([np.lexsort((idx, -row))[:I] for row in y_hat])


def generative_kt_loss(h, candidates, y_hat, I, decoder, embed):
    """-sum_t sum_{i<=I} y_ti log p(a_t^i | h_t) over the top-I candidates."""
    candidates = np.asarray(candidates)
    y_hat = np.atleast_2d(np.asarray(y_hat, dtype=T.DTYPE))
    top = top_candidates(y_hat, I)
    Tn = top.shape[0]
    rows = np.repeat(np.arange(Tn), I)
    seqs = candidates[rows, top.reshape(-1)]
    weights = y_hat[rows, top.reshape(-1)]
    h_rep = h if I == 1 else h[rows]
    return weighted_nll(h_rep, seqs, weights, decoder, embed)
