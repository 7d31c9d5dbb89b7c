"""Finite-difference gradient suite over every differentiable operation and the full model.

Each check builds a scalar function of a few tensors and compares the
analytic gradient with central differences (:func:`sglkt.tensor.grad_check`).
Discrete edge decisions are recorded once and replayed with
:class:`~sglkt.graph.ReplaySampler`, so straight-through paths are checked
against the smooth surrogate whose derivative is the estimator.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import GeneratorConfig, generate_dialog
from .encoders import LSTMEncoder, lstm_step
from .graph import (
    EdgeSampler,
    ReplaySampler,
    build_graph,
    edge_probability,
    message_pass,
    multi_step_reason,
    reason_dialog,
    sample_binary_edge,
    score_edge,
)
from .losses import (
    AnswerDecoder,
    combine_labels,
    discriminative_ce_loss,
    generative_kt_loss,
    generative_nll,
    kt_loss,
    one_hot,
    structural_loss,
)
from .model import SGLModel
from .nn import FeedForward, param
from .node_embedding import AttentionBlock, AttentionFlat, MultiHeadAttention, NodeEmbedding, scaled_dot_attention

TOLERANCE = 1e-4
TINY = {"d_h": 8, "T": 3, "N": 5, "K": 3, "L": 4}


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self):
        return self.error < TOLERANCE


def tiny_generator(seed=0):
    """Generator settings for T=3 rounds, N=5 candidates and K=3 objects."""
    return GeneratorConfig(
        vocab_size=40, topics=3, qtypes=2, forms=1, fillers=1, topic_tokens=2, concept_tokens=2,
        rounds=TINY["T"], candidates=TINY["N"], k_min=TINY["K"], k_max=TINY["K"], d_v=6, seed=seed,
    )


def tiny_dialog(seed=0):
    """A generated dialog with every token sequence cut to at most L=4 tokens (q+a rounds included)."""
    L = TINY["L"]
    d = generate_dialog(tiny_generator(seed), seed)
    d.caption[L:] = 0
    d.questions[:, 2:] = 0
    d.answers[:, 2:] = 0
    d.candidates[:, :, 2:] = 0
    return d


def _rand(rng, *shape, scale=1.0):
    return param(scale * rng.standard_normal(shape))


def _weights(rng, shape):
    return rng.standard_normal(shape)


def _replayed(build):
    """Wrap ``build(sampler) -> loss`` so later calls replay the first call's decisions."""
    sampler = ReplaySampler(EdgeSampler(True, np.random.default_rng(7)))

    def f(*args):
        if sampler.records:
            sampler.rewind()
        return build(sampler, *args)

    return f


def op_checks(seed=0):
    """``(name, f, inputs)`` for the elementwise, shape and normaliser ops."""
    rng = np.random.default_rng(seed)
    w = _weights(rng, (3, 4))
    pos = np.abs(rng.standard_normal((3, 4))) + 0.5
    mask = rng.random((3, 4)) < 0.3
    ids = rng.integers(0, 6, size=(2, 3))
    fancy = (np.array([0, 2, 2]), np.array([1, 3, 3]))
    checks = [
        ("add", lambda a, b: T.sum((a + b) * w), [_rand(rng, 3, 4), _rand(rng, 4)]),
        ("sub", lambda a, b: T.sum((a - b) * w), [_rand(rng, 3, 4), _rand(rng, 3, 1)]),
        ("mul", lambda a, b: T.sum(a * b * w), [_rand(rng, 3, 4), _rand(rng, 1, 4)]),
        ("div", lambda a, b: T.sum(a / b * w), [_rand(rng, 3, 4), param(pos)]),
        ("neg", lambda a: T.sum(-a * w), [_rand(rng, 3, 4)]),
        ("square", lambda a: T.sum(T.square(a) * w), [_rand(rng, 3, 4)]),
        ("log", lambda a: T.sum(T.log(a) * w), [param(pos.copy())]),
        ("exp", lambda a: T.sum(T.exp(a) * w), [_rand(rng, 3, 4)]),
        ("tanh", lambda a: T.sum(T.tanh(a) * w), [_rand(rng, 3, 4)]),
        ("sigmoid", lambda a: T.sum(T.sigmoid(a) * w), [_rand(rng, 3, 4, scale=3.0)]),
        ("relu", lambda a: T.sum(T.relu(a) * w), [param(pos * np.sign(rng.standard_normal((3, 4))))]),
        ("clamp", lambda a: T.sum(T.clamp(a, -0.5, 0.5) * w), [param(np.linspace(-1.3, 1.3, 12).reshape(3, 4) + 0.01)]),
        ("masked_fill", lambda a: T.sum(T.masked_fill(a, mask, -3.0) * w), [_rand(rng, 3, 4)]),
        ("sum", lambda a: T.sum(T.sum(a, axis=0, keepdims=True) * w[:1]), [_rand(rng, 3, 4)]),
        ("mean", lambda a: T.sum(T.mean(a, axis=1) * w[:, 0]), [_rand(rng, 3, 4)]),
        ("transpose", lambda a: T.sum(T.transpose(a) * w.T), [_rand(rng, 3, 4)]),
        ("reshape", lambda a: T.sum(T.reshape(a, (4, 3)) * w.reshape(4, 3)), [_rand(rng, 3, 4)]),
        ("concat", lambda a, b: T.sum(T.concat([a, b], axis=1) * np.ones((3, 6))), [_rand(rng, 3, 4), _rand(rng, 3, 2)]),
        ("stack", lambda a, b: T.sum(T.stack([a, b]) * np.stack([w, -w])), [_rand(rng, 3, 4), _rand(rng, 3, 4)]),
        ("getitem", lambda a: T.sum(a[1:, ::2] * w[1:, ::2]) + T.sum(a[fancy]), [_rand(rng, 3, 4)]),
        ("embedding_lookup", lambda E: T.sum(T.embedding_lookup(E, ids) * _weights(np.random.default_rng(1), (2, 3, 4))), [_rand(rng, 6, 4)]),
        ("matmul", lambda a, b: T.sum((a @ b) * _weights(np.random.default_rng(2), (2, 3, 5))), [_rand(rng, 2, 3, 4), _rand(rng, 4, 5)]),
        ("softmax_temp", lambda a: T.sum(T.softmax_temp(a, 0.5) * w), [_rand(rng, 3, 4)]),
        ("softmax", lambda a: T.sum(T.softmax(a, axis=0) * w), [_rand(rng, 3, 4)]),
        ("log_softmax", lambda a: T.sum(T.log_softmax(a) * w), [_rand(rng, 3, 4)]),
        ("layer_norm", lambda a, g, b: T.sum(T.layer_norm(a, g, b) * w), [_rand(rng, 3, 4), _rand(rng, 4), _rand(rng, 4)]),
    ]
    xs = rng.standard_normal((2, 4, 3))
    lmask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    wl = _weights(rng, (2, 4, 5))
    checks.append((
        "lstm_sequence",
        lambda x, W, b, h0, c0: T.sum(T.lstm_sequence(x, W, b, lmask, h0=h0, c0=c0) * wl),
        [param(xs), _rand(rng, 8, 20, scale=0.5), _rand(rng, 20, scale=0.1), _rand(rng, 2, 5), _rand(rng, 2, 5)],
    ))
    wh = _weights(rng, (2, 5))
    checks.append((
        "lstm_step",
        lambda x, h, c, W, b: T.sum(lstm_step(x, h, c, W, b)[0] * wh) + T.sum(lstm_step(x, h, c, W, b)[1] * wh),
        [_rand(rng, 2, 3), _rand(rng, 2, 5), _rand(rng, 2, 5), _rand(rng, 8, 20, scale=0.5), _rand(rng, 20, scale=0.1)],
    ))
    ws = _weights(rng, (3,))
    st = _replayed(lambda s, p: T.sum(sample_binary_edge(T.softmax(p), s) * ws))
    checks.append(("straight_through", st, [_rand(rng, 3, 2)]))
    return checks


def layer_checks(seed=0):
    rng = np.random.default_rng(seed)
    d, heads = TINY["d_h"], 2
    mrng = np.random.default_rng(seed + 1)
    mha = MultiHeadAttention(mrng, d, heads)
    block = AttentionBlock(mrng, d, heads, 4 * d)
    flat = AttentionFlat(mrng, d)
    node = NodeEmbedding(mrng, d, heads)
    ffn = FeedForward(mrng, d, d)
    W_m = param(mrng.standard_normal((d, d)) / np.sqrt(d))
    qmask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    w_kd = _weights(rng, (3, d))
    w_bkd = _weights(rng, (2, 3, d))
    w_n = _weights(rng, (2, 1, d))
    checks = [
        ("scaled_dot_attention", lambda Q, K, V: T.sum(scaled_dot_attention(Q, K, V, qmask[0]) * w_kd),
         [_rand(rng, 3, d), _rand(rng, 4, d), _rand(rng, 4, d)]),
        ("multi_head_attention", lambda X, Y, *_: T.sum(mha(X, Y, Y, qmask) * w_bkd),
         [_rand(rng, 3, d), _rand(rng, 2, 4, d)] + mha.parameters()),
        ("attention_block", lambda X, Y, *_: T.sum(block(X, Y, qmask) * w_bkd),
         [_rand(rng, 3, d), _rand(rng, 2, 4, d)] + block.parameters()),
        ("attention_flat", lambda X, *_: T.sum(flat(X, qmask) * w_n), [_rand(rng, 2, 4, d)] + flat.parameters()),
        ("node_embedding", lambda Mv, Mq, *_: T.sum(node(Mv, Mq, qmask) * w_n),
         [_rand(rng, TINY["K"], d), _rand(rng, 2, 4, d)] + node.parameters()),
    ]
    X = _rand(rng, 4, d)
    Wc = _rand(rng, 2, d)
    w_e = _weights(rng, (3, 2))
    w_s = _weights(rng, (3,))
    checks += [
        ("edge_probability", lambda a, b, W: T.sum(edge_probability(a, b, W, 0.5) * w_e), [_rand(rng, 3, d), _rand(rng, 3, d), Wc]),
        ("score_edge", lambda a, b: T.sum(score_edge(a, b) * w_s), [_rand(rng, 3, d), _rand(rng, 3, d)]),
    ]
    A = np.triu(np.abs(rng.standard_normal((4, 4))) + 0.1, k=1)
    # off-support entries are masked: perturbing them would switch a zero-degree receiver on
    supp = A > 0
    w_x = _weights(rng, (4, d))
    checks += [
        ("message_pass", lambda X, A, W: T.sum(message_pass(X, A * supp, W, validate=False) * w_x), [X, param(A), W_m]),
        ("multi_step_reason", lambda X, A, W, *_: T.sum(multi_step_reason(X, A * supp, W, ffn, 2, validate=False) * w_x),
         [_rand(rng, 4, d), param(A.copy()), W_m] + ffn.parameters()),
    ]
    w_h = _weights(rng, (TINY["T"], d))
    for mode in ("sgl", "dense", "sparse_hard"):
        def build(s, Xh, Xq, W, Wm, *_, mode=mode):
            g = build_graph(mode, Xh, Xq, W, 0.5, s)
            return T.sum(reason_dialog(g, Xh, Xq, Wm, ffn, 2) * w_h) + T.sum(g.A_hat)

        checks.append((f"graph_{mode}", _replayed(build),
                       [_rand(rng, TINY["T"], d), _rand(rng, TINY["T"], d), _rand(rng, 2, d), W_m] + ffn.parameters()))
    return checks


def loss_checks(seed=0):
    rng = np.random.default_rng(seed)
    d, Tn, N = TINY["d_h"], TINY["T"], TINY["N"]
    C = np.triu((rng.random((Tn + 1, Tn + 1)) < 0.5).astype(float), k=1)
    gt = rng.integers(0, N, size=Tn)
    y = combine_labels(one_hot(gt, N), rng.random((Tn, N)) * 0.9)
    mrng = np.random.default_rng(seed + 2)
    enc = LSTMEncoder(mrng, 12, d)
    dec = AnswerDecoder(mrng, 12, d)
    cands = rng.integers(2, 12, size=(Tn, N, TINY["L"]))
    cands[:, :, 3:] = 0
    answers = cands[np.arange(Tn), gt]
    return [
        ("structural_loss", lambda A: structural_loss(C, A), [param(np.triu(rng.random((Tn + 1, Tn + 1)), k=1))]),
        ("kt_loss", lambda z: kt_loss(y, T.sigmoid(z)), [_rand(rng, Tn, N)]),
        ("discriminative_ce_loss", lambda z: discriminative_ce_loss(z, gt), [_rand(rng, Tn, N)]),
        ("generative_nll", lambda h, *_: generative_nll(h, answers, dec, enc.embed),
         [_rand(rng, Tn, d)] + dec.parameters() + [enc.embedding]),
        ("generative_kt_loss", lambda h, *_: generative_kt_loss(h, cands, y, 2, dec, enc.embed),
         [_rand(rng, Tn, d)] + dec.parameters() + [enc.embedding]),
    ]


def model_checks(seed=0, modes=("sgl", "sgl_kt", "generative", "generative_kt")):
    dialog = tiny_dialog(seed)
    gen = tiny_generator(seed)
    checks = []
    for mode in modes:
        cfg = TrainConfig(mode=mode, graph_mode="sgl", d_h=TINY["d_h"], heads=2, steps=2, top_i=2, seed=seed)
        model = SGLModel(cfg, gen.vocab_size, gen.d_v)
        # move off the all-zero initial biases so no ReLU sits exactly on its kink
        brng = np.random.default_rng(seed + 3)
        for name, p in model.named_parameters():
            if name.endswith("bias") or name.endswith(".b"):
                p.data = p.data + 0.05 * brng.standard_normal(p.shape)
        f = _replayed(lambda s, *params, model=model: model.loss(dialog, s)[0])
        checks.append((f"model_{mode}", f, model.parameters()))
    return checks


def run_suite(seed=0, max_coords=20, step=1e-4, include_model=True):
    """Run every check; returns a list of :class:`CheckResult`."""
    checks = op_checks(seed) + layer_checks(seed) + loss_checks(seed)
    if include_model:
        checks += model_checks(seed)
    results = []
    for name, f, inputs in checks:
        t0 = time.perf_counter()
        err = T.grad_check(f, inputs, step=step, max_coords=max_coords, seed=seed)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results

