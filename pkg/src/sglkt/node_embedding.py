"""Joint visual-linguistic node features.

Self-attention (SA) runs on the visual objects and on the question tokens,
guided attention (GA) lets the visual stream query the question stream,
and attention-flat (AF) pools each stream to one vector.  The node feature
is the sum of the two pooled streams after their feed-forward heads.

All blocks accept an optional leading batch axis, so the history rounds
and questions of a whole dialog are embedded in one pass against a shared
visual block.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import FeedForward, LayerNorm, Module, param, xavier_uniform

MASK_VALUE = -1e9


def scaled_dot_attention(Q, K, V, mask=None):
    """softmax(Q K^T / sqrt(d)) V; ``mask`` (..., n) marks valid keys."""
    d = Q.shape[-1]
    logits = (Q @ T.transpose(K)) / np.sqrt(d)
    if mask is not None:
        logits = T.masked_fill(logits, ~np.asarray(mask, dtype=bool)[..., None, :], MASK_VALUE)
    return T.softmax(logits, axis=-1) @ V


class MultiHeadAttention(Module):
    """h heads of width d_h / h; per-head projections are column blocks of W_q, W_k, W_v."""

    def __init__(self, rng, d_h, heads):
        if heads < 1 or d_h % heads:
            raise ConfigError(f"d_h={d_h} is not divisible by heads={heads}")
        self.W_q = param(xavier_uniform(rng, d_h, d_h))
        self.W_k = param(xavier_uniform(rng, d_h, d_h))
        self.W_v = param(xavier_uniform(rng, d_h, d_h))
        self.W_o = param(xavier_uniform(rng, d_h, d_h))
        self.heads = heads

    def _split(self, x):
        # (..., m, d) -> (..., h, m, d/h)
        *lead, m, d = x.shape
        x = T.reshape(x, (*lead, m, self.heads, d // self.heads))
        nd = x.ndim
        return T.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    def __call__(self, Q, K, V, mask=None):
        q = self._split(Q @ self.W_q)
        k = self._split(K @ self.W_k)
        v = self._split(V @ self.W_v)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[..., None, :]
        heads = scaled_dot_attention(q, k, v, mask)
        nd = heads.ndim
        heads = T.transpose(heads, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
        *lead, m, h, dk = heads.shape
        return T.reshape(heads, (*lead, m, h * dk)) @ self.W_o


class AttentionBlock(Module):
    """MHA + residual + layer norm, then FFN + residual + layer norm.

    Called with one input it is self-attention; with ``Y`` it is guided
    attention where ``X`` queries the keys/values ``Y``.
    """

    def __init__(self, rng, d_h, heads, d_ff):
        self.mha = MultiHeadAttention(rng, d_h, heads)
        self.norm1 = LayerNorm(d_h)
        self.ffn = FeedForward(rng, d_h, d_ff)
        self.norm2 = LayerNorm(d_h)

    def __call__(self, X, Y=None, mask=None, drop=None):
        """``drop`` is an optional callable applied to both sublayer outputs (training-time dropout)."""
        Y = X if Y is None else Y
        drop = drop or _identity
        X = self.norm1(X + drop(self.mha(X, Y, Y, mask)))
        return self.norm2(X + drop(self.ffn(X)))


def _identity(x):
    return x


def multi_head_attention(Q, K, V, module, mask=None):
    return module(Q, K, V, mask)


def self_attention_block(X, block, mask=None, drop=None):
    """MHA(X, X, X) + residual + norm, then FFN + residual + norm."""
    return block(X, mask=mask, drop=drop)


def guided_attention_block(X, Y, block, mask=None, drop=None):
    """Rows of ``X`` query the keys/values ``Y``; ``mask`` marks valid rows of ``Y``."""
    return block(X, Y, mask, drop)


class AttentionFlat(Module):
    """Attention pooling of the rows of X to a single ``(1, d_h)`` row."""

    def __init__(self, rng, d_h, d_mlp=None):
        self.mlp = FeedForward(rng, d_h, d_mlp or d_h, 1)

    def weights(self, X, mask=None):
        logits = self.mlp(X)
        if mask is not None:
            logits = T.masked_fill(logits, ~np.asarray(mask, dtype=bool)[..., :, None], MASK_VALUE)
        return T.softmax(logits, axis=-2)

    def __call__(self, X, mask=None):
        return T.sum(self.weights(X, mask) * X, axis=-2, keepdims=True)


def attention_flat(X, flat, mask=None):
    return flat(X, mask)


class NodeEmbedding(Module):
    def __init__(self, rng, d_h, heads, d_ff=None):
        d_ff = d_ff or 4 * d_h
        self.sa_v = AttentionBlock(rng, d_h, heads, d_ff)
        self.sa_q = AttentionBlock(rng, d_h, heads, d_ff)
        self.ga = AttentionBlock(rng, d_h, heads, d_ff)
        self.af_v = AttentionFlat(rng, d_h)
        self.af_q = AttentionFlat(rng, d_h)
        self.ffn_v = FeedForward(rng, d_h, d_ff)
        self.ffn_q = FeedForward(rng, d_h, d_ff)

    def __call__(self, Mv, Mq, q_mask=None, Zv=None, drop=None):
        """Node features ``(..., 1, d_h)`` for visual rows ``Mv`` and language rows ``Mq``.

        ``Zv`` may carry a precomputed ``sa_v(Mv)`` when many language
        streams share one image.
        """
        if Zv is None:
            Zv = self.sa_v(Mv, drop=drop)
        Zq = self.sa_q(Mq, mask=q_mask, drop=drop)
        Zv_hat = self.ga(Zv, Zq, mask=q_mask, drop=drop)
        zv = self.ffn_v(self.af_v(Zv_hat))
        zq = self.ffn_q(self.af_q(Zq, q_mask))
        return zv + zq


def embed_node(Mv, Mq, module, q_mask=None):
    """x = FFN(AF(GA(SA(Mv), SA(Mq)))) + FFN(AF(SA(Mq))), shape ``(1, d_h)``."""
    return module(Mv, Mq, q_mask)
