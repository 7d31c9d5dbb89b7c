"""The full dialog model: encoders, node embedding, graph learning and answer heads.

One forward pass handles a whole dialog.  All history rounds and questions
are encoded in one LSTM batch, embedded against one shared visual block,
and the graph over rounds is built once; round ``t`` only ever sees nodes
``0..t`` because edges point forward in time.
"""

from dataclasses import dataclass
from functools import partial

import numpy as np

from . import tensor as T
from .encoders import LSTMEncoder, project_visual, token_mask
from .errors import ShapeError
from .graph import EdgeSampler, build_graph, full_to_block, reason_dialog
from .losses import (
    AnswerDecoder,
    combine_labels,
    discriminative_ce_loss,
    generative_kt_loss,
    generative_nll,
    kt_loss,
    one_hot,
    structural_loss,
    total_loss,
)
from .nn import FeedForward, Module, param, xavier_uniform
from .node_embedding import NodeEmbedding

STRUCTURED_GRAPHS = ("sgl", "sparse_hard")


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


@dataclass
class DialogOutput:
    h: T.Tensor  # (T, d_h) final question-node states
    graph: object
    Xh: T.Tensor
    Xq: T.Tensor


class SGLModel(Module):
    def __init__(self, cfg, vocab_size, d_v):
        rng = np.random.default_rng([cfg.seed, 1])
        d = cfg.d_h
        self.W_f = param(xavier_uniform(rng, d_v, d))
        self.encoder = LSTMEncoder(rng, vocab_size, d)
        self.node = NodeEmbedding(rng, d, cfg.heads, cfg.d_ff or None)
        self.W_c = param(xavier_uniform(rng, d, 2).T.copy())
        self.W_m = param(xavier_uniform(rng, d, d))
        self.f_u = FeedForward(rng, d, d)
        self.decoder = None if cfg.discriminative else AnswerDecoder(rng, vocab_size, d)
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.d_v = d_v

    def encode_nodes(self, dialog, sampler=None):
        """Node features of history rounds ``Xh`` and questions ``Xq``, each ``(T, d_h)``.

        Attention dropout draws from the training sampler's generator, so it
        stays a pure function of the seeds; eval samplers switch it off.
        """
        if dialog.visual.shape[1] != self.d_v:
            raise ShapeError(f"visual width {dialog.visual.shape[1]} != model d_v {self.d_v}")
        Tn = dialog.rounds
        drop = None
        if self.cfg.dropout and sampler is not None and sampler.train:
            drop = partial(T.dropout, p=self.cfg.dropout, rng=sampler.rng)
        Mv = project_visual(dialog.visual, self.W_f)
        Zv = self.node.sa_v(Mv, drop=drop)
        ids = dialog.node_tokens
        Hs = self.encoder.run(ids)
        X = self.node(Mv, Hs, token_mask(ids), Zv=Zv, drop=drop)
        X = T.reshape(X, (2 * Tn, self.cfg.d_h))
        return X[:Tn], X[Tn:]

    def forward(self, dialog, sampler):
        Xh, Xq = self.encode_nodes(dialog, sampler)
        cfg = self.cfg
        graph = build_graph(cfg.graph_mode, Xh, Xq, self.W_c, cfg.tau, sampler, cfg.edge_grad_clip)
        h = reason_dialog(graph, Xh, Xq, self.W_m, self.f_u, cfg.steps)
        return DialogOutput(h, graph, Xh, Xq)

    def answer_logits(self, dialog, h):
        """M_a h_t^T for every round and candidate, ``(T, N)``; identical candidates are encoded once."""
        uniq, inverse = dialog.unique_candidates
        Ma = self.encoder.encode_last(uniq)
        all_logits = h @ T.transpose(Ma)
        return all_logits[np.arange(inverse.shape[0])[:, None], inverse]

    def candidate_log_likelihood(self, dialog, h):
        """log p(candidate | h_t) under the decoder, ``(T, N)``."""
        Tn, N, L = dialog.candidates.shape
        rows = np.repeat(np.arange(Tn), N)
        ll = self.decoder.sequence_log_likelihood(h[rows], dialog.candidates.reshape(Tn * N, L), self.encoder.embed)
        return T.reshape(ll, (Tn, N))

    def combined_labels(self, dialog):
        if dialog.teacher is None:
            raise ShapeError("knowledge-transfer modes need teacher scores in the dataset")
        N = dialog.candidates.shape[1]
        return combine_labels(one_hot(dialog.gt_index, N), dialog.teacher)

    def loss(self, dialog, sampler):
        """Total loss and its parts (as floats) for one dialog."""
        cfg = self.cfg
        out = self.forward(dialog, sampler)
        if cfg.mode == "sgl":
            answer = discriminative_ce_loss(self.answer_logits(dialog, out.h), dialog.gt_index)
        elif cfg.mode == "sgl_kt":
            s = T.sigmoid(self.answer_logits(dialog, out.h))
            answer = kt_loss(self.combined_labels(dialog), s)
        elif cfg.mode == "generative":
            answer = generative_nll(out.h, dialog.answers, self.decoder, self.encoder.embed)
        else:
            y = self.combined_labels(dialog)
            answer = generative_kt_loss(out.h, dialog.candidates, y, cfg.top_i, self.decoder, self.encoder.embed)
        struct = None
        if cfg.graph_mode in STRUCTURED_GRAPHS:
            struct = structural_loss(full_to_block(dialog.C), out.graph.A_b, out.graph.valid)
        total = total_loss(answer, struct, cfg.lam)
        parts = {"answer": float(answer.data), "structural": 0.0 if struct is None else float(struct.data)}
        return total, parts

    def score_dialog(self, dialog):
        """Eval-mode candidate scores ``(T, N)`` and the dialog graph.

        Discriminative scores are log-sigmoids of the logits and generative
        scores are sequence log-likelihoods, so averaging ``exp(score)``
        across models averages sigmoid scores or likelihoods.
        """
        with T.no_grad():
            out = self.forward(dialog, EdgeSampler())
            if self.cfg.discriminative:
                scores = log_sigmoid(self.answer_logits(dialog, out.h).data)
            else:
                scores = self.candidate_log_likelihood(dialog, out.h).data
        return scores, out.graph
