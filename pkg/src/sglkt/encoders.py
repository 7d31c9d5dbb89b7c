"""Language and visual input encoders.

Token sequences are integer arrays padded with ``PAD_ID`` (0).  One LSTM
with a shared embedding table encodes questions, history rounds and answer
candidates; the visual block is projected linearly to ``d_h``.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError, VocabError
from .nn import Module, param, xavier_uniform

PAD_ID = 0
QUESTION_MAX = 20
ANSWER_MAX = 20
CAPTION_MAX = 40
HISTORY_MAX = 40


def pad_tokens(ids, max_len):
    """Truncate/pad a token list to ``max_len``."""
    ids = [int(i) for i in ids if int(i) != PAD_ID][:max_len]
    return np.array(ids + [PAD_ID] * (max_len - len(ids)), dtype=np.int64)


def history_tokens(question, answer=None, max_len=HISTORY_MAX):
    """Tokens of one history round: question followed by its answer."""
    q = [int(i) for i in question if int(i) != PAD_ID]
    a = [] if answer is None else [int(i) for i in answer if int(i) != PAD_ID]
    return pad_tokens(q + a, max_len)


def token_mask(ids):
    return np.asarray(ids) != PAD_ID


def crop_padding(ids):
    """Drop trailing columns that are padding in every row (keeps at least one)."""
    ids = np.atleast_2d(np.asarray(ids))
    used = np.flatnonzero(token_mask(ids).any(axis=0))
    width = int(used[-1]) + 1 if used.size else 1
    return ids[:, :width]


def project_visual(features, W_f):
    """M^v = features . W_f  (K x d_v) -> (K x d_h)."""
    features = T.as_tensor(features)
    if features.ndim != 2 or features.shape[1] != W_f.shape[0]:
        raise ShapeError(f"visual block {features.shape} does not match projection {W_f.shape}")
    return features @ W_f


def lstm_step(x, h, c, W, b):
    """One LSTM step from primitive ops; returns ``(h', c')``.

    Gate order matches :func:`sglkt.tensor.lstm_sequence`: input, forget,
    candidate, output.
    """
    d = h.shape[-1]
    z = T.concat([x, h], axis=-1) @ W + b
    i = T.sigmoid(z[..., :d])
    f = T.sigmoid(z[..., d : 2 * d])
    g = T.tanh(z[..., 2 * d : 3 * d])
    o = T.sigmoid(z[..., 3 * d :])
    c_new = f * c + i * g
    return o * T.tanh(c_new), c_new


class LSTMEncoder(Module):
    """Embedding table plus a single-layer unidirectional LSTM."""

    def __init__(self, rng, vocab_size, d_h):
        self.embedding = param(rng.uniform(-0.08, 0.08, size=(vocab_size, d_h)))
        self.W = param(xavier_uniform(rng, 2 * d_h, 4 * d_h))
        self.b = param(np.zeros(4 * d_h))
        self.vocab_size = vocab_size
        self.d_h = d_h

    def embed(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabError(f"token id outside vocabulary of size {self.vocab_size}")
        return T.embedding_lookup(self.embedding, ids)

    def run(self, ids, h0=None, c0=None):
        """Hidden states for a batch ``(B, L)`` of padded sequences."""
        ids = np.atleast_2d(np.asarray(ids))
        return T.lstm_sequence(self.embed(ids), self.W, self.b, token_mask(ids), h0=h0, c0=c0)

    def encode(self, ids):
        """All hidden states and the valid-position mask, cropped to the longest row."""
        ids = crop_padding(ids)
        return self.run(ids), token_mask(ids)

    def encode_last(self, ids):
        """Final hidden state per row (the state at each row's true length)."""
        ids = crop_padding(ids)
        return self.run(ids)[:, -1, :]


def encode_question(question, encoder):
    """M^q: every hidden state of one question, shape ``(L, d_h)``."""
    question = np.asarray(question).reshape(1, -1)
    return encoder.run(question)[0]


def encode_history_round(encoder, question=None, answer=None, caption=None):
    """M^h_i for a caption (round 0) or a question/answer round."""
    if caption is not None:
        ids = pad_tokens(caption, CAPTION_MAX)
    else:
        ids = history_tokens(question, answer, HISTORY_MAX)
    return encoder.run(ids.reshape(1, -1))[0]


def encode_answers(candidates, encoder):
    """M^a: last hidden state per candidate, shape ``(N, d_h)``."""
    return encoder.encode_last(np.atleast_2d(np.asarray(candidates)))


def write_vocab(tokens, path):
    tokens = list(tokens)
    if not tokens or tokens[0] != "<pad>":
        raise VocabError("vocabulary must reserve id 0 for '<pad>'")
    with open(path, "w", encoding="utf-8") as fh:
        for tok in tokens:
            fh.write(tok + "\n")


def read_vocab(path):
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    if not tokens or tokens[0] != "<pad>":
        raise VocabError(f"{path}: line 1 must be '<pad>'")
    return tokens
