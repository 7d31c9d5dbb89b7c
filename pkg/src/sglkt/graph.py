"""Sparse graph learning over dialog rounds.

Nodes are dialog rounds: node 0 is the caption, node ``j >= 1`` is round
``j``.  Edges only run from an earlier node ``i`` into a later node ``j``
(strictly upper-triangular support), so a receiver aggregates over its
predecessors.

Internally a dialog graph is kept in a compact ``(T, T)`` block whose rows
are sender nodes ``0..T-1`` and whose columns are receiver nodes ``1..T``;
``block[i, r]`` is the edge ``i -> r + 1`` and is valid iff ``i <= r``.
The sender of an edge is a history-round feature and the receiver is the
question feature of the round in which the edge was first evaluated, which
is what makes the incremental O(t) construction exact.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InvariantError, ParseError, ShapeError
from .node_embedding import MASK_VALUE

GRAPH_MODES = ("sgl", "dense", "sparse_hard", "edgeless")
GUMBEL_CLAMP = 1e-20


def support_mask(n):
    """Boolean (n, n) mask of the strictly upper-triangular edge support."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def block_valid(S, R):
    return np.arange(S)[:, None] <= np.arange(R)[None, :]


def block_to_full(block):
    """Embed a ``(T, T)`` sender x receiver block into a ``(T+1, T+1)`` matrix."""
    block = np.asarray(block)
    n = block.shape[0] + 1
    full = np.zeros((n, n), dtype=block.dtype)
    full[:-1, 1:] = np.where(block_valid(n - 1, n - 1), block, 0)
    return full


def full_to_block(full):
    full = np.asarray(full)
    return full[:-1, 1:] * block_valid(full.shape[0] - 1, full.shape[0] - 1)


# ---------------------------------------------------------------------------
# discrete decisions
# ---------------------------------------------------------------------------


def gumbel_noise(rng, shape):
    u = np.clip(rng.uniform(size=shape), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


class EdgeSampler:
    """Discrete edge decisions.

    Training mode draws Gumbel-max samples from a seeded generator; eval
    mode is the deterministic argmax (binary ties go to the edge).
    """

    surrogate = False

    def __init__(self, train=False, rng=None):
        if train and rng is None:
            raise ContractError("training-mode edge sampling needs a seeded numpy Generator")
        self.train = train
        self.rng = rng

    def binary(self, probs):
        """z in {0, 1} for an array of two-class probabilities ``(..., 2)``."""
        if not self.train:
            return (probs[..., 1] >= probs[..., 0]).astype(T.DTYPE)
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        g = gumbel_noise(self.rng, probs.shape)
        return (np.argmax(logp + g, axis=-1) == 1).astype(T.DTYPE)

    def categorical(self, probs, valid, axis=0):
        """One-hot choice along ``axis`` restricted to ``valid`` entries."""
        with np.errstate(divide="ignore"):
            scores = np.where(valid, np.log(probs), -np.inf)
        if self.train:
            scores = scores + gumbel_noise(self.rng, probs.shape)
        choice = np.argmax(scores, axis=axis)
        hard = np.zeros_like(probs)
        np.put_along_axis(hard, np.expand_dims(choice, axis), 1.0, axis=axis)
        hard *= valid.any(axis=axis, keepdims=True)
        return hard

    def relax(self, soft, hard):
        return T.straight_through(soft, hard)


class ReplaySampler(EdgeSampler):
    """Replays the decisions of a first pass so finite differences see a smooth surrogate.

    On the recording pass it behaves like ``base``.  On later passes (after
    :meth:`rewind`) the same discrete decisions are reused and the
    straight-through output becomes ``soft + (hard - soft_recorded)``,
    whose exact derivative is the straight-through gradient.
    """

    surrogate = True

    def __init__(self, base):
        self.base = base
        self.train = base.train
        self.records = []
        self.cursor = None

    def rewind(self):
        self.cursor = 0

    def _next(self):
        rec = self.records[self.cursor]
        self.cursor += 1
        return rec

    def binary(self, probs):
        if self.cursor is None:
            hard = self.base.binary(probs)
            self.records.append({"hard": hard})
            return hard
        return self._next()["hard"]

    def categorical(self, probs, valid, axis=0):
        if self.cursor is None:
            hard = self.base.categorical(probs, valid, axis)
            self.records.append({"hard": hard})
            return hard
        return self._next()["hard"]

    def relax(self, soft, hard):
        # pairs with the most recent binary/categorical decision
        rec = self.records[-1] if self.cursor is None else self.records[self.cursor - 1]
        if "soft" not in rec:
            rec["soft"] = soft.data.copy()
            return T.straight_through(soft, hard)
        return soft + (hard - rec["soft"])


def sample_binary_edge(probs, sampler):
    """Straight-through binary edge from a ``(..., 2)`` probability tensor."""
    hard = sampler.binary(probs.data)
    return sampler.relax(probs[..., 1], hard)


# ---------------------------------------------------------------------------
# edge weights
# ---------------------------------------------------------------------------


def _edge_raw(P, W_c):
    *lead, d = P.shape
    return T.sum(T.reshape(P, (*lead, 1, d)) * W_c, axis=-1)


def edge_probability(x_i, x_j, W_c, tau):
    """p_ij = softmax(W_c (x_i o x_j)^T / tau), shape ``(..., 2)``."""
    if not tau > 0:
        raise ConfigError(f"edge temperature must be positive, got {tau}")
    if x_i.shape[-1] != x_j.shape[-1] or W_c.shape != (2, x_i.shape[-1]):
        raise ShapeError(f"edge_probability: {x_i.shape}, {x_j.shape}, W_c {W_c.shape}")
    return T.softmax_temp(_edge_raw(x_i * x_j, W_c), tau)


def score_edge(x_i, x_j):
    """A^s_ij = (x_i . x_j)^2."""
    return T.square(T.sum(x_i * x_j, axis=-1))


def combine_edges(A_b, A_s):
    return T.as_tensor(A_b) * T.as_tensor(A_s)


def pair_products(Xs, Xr):
    S, d = Xs.shape
    R = Xr.shape[0]
    return T.reshape(Xs, (S, 1, d)) * T.reshape(Xr, (1, R, d))


def pair_edges(Xs, Xr, W_c, tau):
    """Edge probabilities ``(S, R, 2)`` and scores ``(S, R)`` for every sender/receiver pair.

    Dot products are elementwise products reduced over the feature axis so
    a single column is computed with exactly the same float operations as
    the full block.
    """
    _, probs, score = _pair_edges(Xs, Xr, W_c, tau)
    return probs, score


def _pair_edges(Xs, Xr, W_c, tau):
    if not tau > 0:
        raise ConfigError(f"edge temperature must be positive, got {tau}")
    P = pair_products(Xs, Xr)
    raw = _edge_raw(P, W_c)
    return raw, T.softmax_temp(raw, tau), T.square(T.sum(P, axis=-1))


@dataclass
class AdjacencySet:
    """Dense ``(n, n)`` matrices of one dialog graph (row = sender, column = receiver)."""

    A_b: np.ndarray
    A_s: np.ndarray
    A_hat: np.ndarray
    C: np.ndarray = None

    @property
    def n(self):
        return self.A_hat.shape[0]

    def validate(self):
        off = ~support_mask(self.n)
        for name in ("A_b", "A_s", "A_hat"):
            m = getattr(self, name)
            if m.shape != (self.n, self.n):
                raise ShapeError(f"{name} has shape {m.shape}, expected {(self.n, self.n)}")
            if np.any(m[off] != 0):
                raise InvariantError(f"{name} has entries outside the i<j support")
        if not np.all(np.isin(self.A_b, (0.0, 1.0))):
            raise InvariantError("A_b is not binary")
        if np.any(self.A_s < 0):
            raise InvariantError("A_s has negative entries")
        return self

    def edge_count(self):
        return int(support_mask(self.n).sum())


@dataclass
class DialogGraph:
    """Differentiable adjacency blocks for one dialog plus their discrete parts."""

    mode: str
    A_hat: T.Tensor
    A_s: T.Tensor
    A_b: T.Tensor = None
    hard: np.ndarray = None
    probs: T.Tensor = None
    isolated: np.ndarray = None
    valid: np.ndarray = None
    surrogate: bool = False
    extra: dict = field(default_factory=dict)

    def binary_block(self):
        """Binary edges used for structure metrics (dense mode is binarised)."""
        if self.mode == "dense":
            return binarize_dense_block(self.A_hat.data, self.valid)
        if self.hard is None:
            return np.zeros(self.A_hat.shape)
        return self.hard

    def adjacency(self, C=None):
        return AdjacencySet(
            A_b=block_to_full(self.binary_block()).astype(T.DTYPE),
            A_s=block_to_full(self.A_s.data),
            A_hat=block_to_full(self.A_hat.data),
            C=None if C is None else np.asarray(C, dtype=T.DTYPE),
        )


def binarize_dense_block(A, valid):
    """Per receiver (column) put 1 on the largest incoming weight; lowest index wins ties."""
    scores = np.where(valid, A, -np.inf)
    out = np.zeros(A.shape)
    cols = np.flatnonzero(valid.any(axis=0))
    out[np.argmax(scores[:, cols], axis=0), cols] = 1.0
    return out


def binarize_dense(A_dense):
    """Full-matrix version: receiver = column, predecessors = rows above the diagonal."""
    A_dense = np.asarray(A_dense, dtype=T.DTYPE)
    return block_to_full(binarize_dense_block(full_to_block(A_dense), block_valid(A_dense.shape[0] - 1, A_dense.shape[0] - 1)))


def build_graph(mode, Xs, Xr, W_c, tau, sampler, edge_grad_clip=0.0):
    """Adjacency over senders ``Xs`` (nodes 0..S-1) and receivers ``Xr`` (nodes 1..R).

    ``edge_grad_clip > 0`` bounds, per entry, the gradient that reaches the
    binary edges through the combined adjacency.  The straight-through
    estimate for an absent edge scales with ``A_s[i, r] / deg(r)``, which is
    unbounded once scores spread over orders of magnitude.
    """
    if mode not in GRAPH_MODES:
        raise ConfigError(f"unknown graph mode {mode!r}; expected one of {GRAPH_MODES}")
    S, R = Xs.shape[0], Xr.shape[0]
    valid = block_valid(S, R)
    surrogate = getattr(sampler, "surrogate", False)
    if mode == "edgeless":
        with T.no_grad():
            A_s = T.square(T.sum(pair_products(Xs, Xr), axis=-1)) * valid
        zero = T.Tensor(np.zeros((S, R)))
        return DialogGraph(mode, zero, A_s, zero, np.zeros((S, R)), None, np.ones(R, bool), valid, surrogate)

    if mode == "dense":
        P = pair_products(Xs, Xr)
        dots = T.sum(P, axis=-1)
        A_s = T.square(dots) * valid
        A_hat = T.softmax(T.masked_fill(dots, ~valid, MASK_VALUE), axis=0) * valid
        return DialogGraph(mode, A_hat, A_s, None, None, None, ~valid.any(axis=0), valid, surrogate)

    raw, probs, score = _pair_edges(Xs, Xr, W_c, tau)
    A_s = score * valid
    if mode == "sgl":
        hard = sampler.binary(probs.data) * valid
        A_b = sampler.relax(probs[..., 1], hard) * valid
        A_hat = _gated(A_b, edge_grad_clip) * A_s
        isolated = hard.sum(axis=0) == 0
        return DialogGraph(mode, A_hat, A_s, A_b, hard, probs, isolated, valid, surrogate)

    # sparse_hard: one incoming edge per receiver, chosen by the edge log-odds
    log_odds = (raw[..., 1] - raw[..., 0]) / tau
    select = T.softmax(T.masked_fill(log_odds, ~valid, MASK_VALUE), axis=0)
    hard = sampler.categorical(select.data, valid, axis=0)
    A_b = sampler.relax(select, hard) * valid
    A_hat = _gated(A_b, edge_grad_clip) * A_s
    isolated = hard.sum(axis=0) == 0
    return DialogGraph(mode, A_hat, A_s, A_b, hard, select, isolated, valid, surrogate)


def _gated(A_b, bound):
    return T.clip_grad(A_b, bound) if bound else A_b


def graph_mode(mode, X, W_c, tau, sampler=None):
    """Combined adjacency ``(t+1, t+1)`` for node features ``X`` in the given mode."""
    sampler = sampler or EdgeSampler()
    g = build_graph(mode, X[:-1], X[1:], W_c, tau, sampler)
    return g.adjacency().A_hat


# ---------------------------------------------------------------------------
# message passing
# ---------------------------------------------------------------------------


def aggregate(A, X, isolated=None, validate=True):
    """Degree-normalised incoming sum: row r is sum_i A[i, r] X[i] / sum_i A[i, r].

    Receivers with zero in-degree (or flagged ``isolated``) get a zero row.
    """
    if validate and np.any(A.data < 0):
        raise InvariantError("adjacency has negative entries")
    if A.shape[0] != X.shape[0]:
        raise ShapeError(f"aggregate: adjacency {A.shape} vs node features {X.shape}")
    deg = T.sum(A, axis=0)
    active = deg.data > 0
    if isolated is not None:
        active &= ~np.asarray(isolated, dtype=bool)
    denom = T.reshape(T.masked_fill(deg, ~active, 1.0), (A.shape[1], 1))
    agg = (T.transpose(A) @ X) / denom
    return T.masked_fill(agg, ~active[:, None], 0.0)


def message_pass(X, A_hat, W_m, isolated=None, validate=True):
    """M = D^-1 A_hat^T X W_m for a square ``(n, n)`` adjacency, one row per receiver."""
    A_hat = T.as_tensor(A_hat)
    if A_hat.shape != (X.shape[0], X.shape[0]):
        raise ShapeError(f"message_pass: adjacency {A_hat.shape} vs {X.shape[0]} nodes")
    return aggregate(A_hat, X, isolated, validate) @ W_m


def update_nodes(X, M, f_u):
    """H = f_u(X + M)."""
    if X.shape != M.shape:
        raise ShapeError(f"update_nodes: {X.shape} vs {M.shape}")
    return f_u(X + M)


def multi_step_reason(X, A_hat, W_m, f_u, steps, isolated=None, validate=True):
    if steps < 1:
        raise ConfigError(f"reasoning steps must be >= 1, got {steps}")
    H = X
    for _ in range(steps):
        H = update_nodes(H, message_pass(H, A_hat, W_m, isolated, validate), f_u)
    return H


def reason_dialog(graph, Xh, Xq, W_m, f_u, steps):
    """Final states ``h_t`` of every round's question node, shape ``(T, d_h)``.

    At round ``t`` the graph holds history nodes ``0..t-1`` and the question
    node ``t``.  History states never depend on later nodes, so all rounds
    are advanced together: one stream for history nodes, one for the
    question nodes, both reading the adjacency block.
    """
    if steps < 1:
        raise ConfigError(f"reasoning steps must be >= 1, got {steps}")
    Tn = Xh.shape[0]
    A = graph.A_hat
    validate = not graph.surrogate
    A_hist = T.concat([T.Tensor(np.zeros((Tn, 1))), A[:, : Tn - 1]], axis=1)
    iso_hist = np.concatenate([[True], graph.isolated[: Tn - 1]])
    G, Q = Xh, Xq
    for _ in range(steps):
        M_hist = aggregate(A_hist, G, iso_hist, validate) @ W_m
        M_q = aggregate(A, G, graph.isolated, validate) @ W_m
        G, Q = f_u(G + M_hist), f_u(Q + M_q)
    return Q


# ---------------------------------------------------------------------------
# O(t) construction
# ---------------------------------------------------------------------------


class EdgeCounter:
    def __init__(self):
        self.per_round = []

    def add(self, n):
        self.per_round.append(int(n))


def incremental_adjacency(prev, new_b, new_s):
    """Grow an ``(t, t)`` AdjacencySet to ``(t+1, t+1)`` by one incoming column."""
    t = prev.n
    new_b = np.asarray(new_b, dtype=T.DTYPE).reshape(-1)
    new_s = np.asarray(new_s, dtype=T.DTYPE).reshape(-1)
    if new_b.shape != (t,) or new_s.shape != (t,):
        raise ShapeError(f"incremental_adjacency: new column must have {t} entries")
    out = {}
    for name, col in (("A_b", new_b), ("A_s", new_s), ("A_hat", new_b * new_s)):
        m = np.zeros((t + 1, t + 1))
        m[:t, :t] = getattr(prev, name)
        m[:t, t] = col
        out[name] = m
    return AdjacencySet(**out)


def rolling_adjacency(Xh, Xq, W_c, tau, counter=None):
    """Eval-mode adjacency built round by round, evaluating only the ``t`` new edges of round ``t``."""
    sampler = EdgeSampler()
    adj = AdjacencySet(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    with T.no_grad():
        for t in range(1, Xq.shape[0] + 1):
            probs, score = pair_edges(Xh[:t], Xq[t - 1 : t], W_c, tau)
            if counter is not None:
                counter.add(score.size)
            hard = sampler.binary(probs.data)[:, 0]
            adj = incremental_adjacency(adj, hard, score.data[:, 0])
    return adj


def full_adjacency(Xh, Xq, W_c, tau):
    """Eval-mode adjacency computed from all pairs at once."""
    with T.no_grad():
        return build_graph("sgl", Xh, Xq, W_c, tau, EdgeSampler()).adjacency()


# ---------------------------------------------------------------------------
# adjacency dump
# ---------------------------------------------------------------------------

DUMP_FIELDS = ("C", "A_b", "A_s", "A_hat")


def format_adjacency(index, adj):
    lines = [f"dialog {index} nodes {adj.n}"]
    for name in DUMP_FIELDS:
        m = getattr(adj, name)
        if m is None:
            m = np.zeros((adj.n, adj.n))
        lines.append(name)
        lines.extend(" ".join(f"{v:.6f}" for v in row) for row in m)
    lines.append("end")
    return "\n".join(lines) + "\n"


def write_adjacency_dump(records, path):
    """Write ``(index, AdjacencySet)`` pairs as fixed 6-decimal text blocks."""
    with open(path, "w", encoding="utf-8") as fh:
        for index, adj in records:
            fh.write(format_adjacency(index, adj))


def read_adjacency_dump(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    out = []
    pos = 0
    while pos < len(lines):
        head = lines[pos].split()
        if len(head) != 4 or head[0] != "dialog" or head[2] != "nodes":
            raise ParseError(f"bad header {lines[pos]!r}", record=len(out))
        index, n = int(head[1]), int(head[3])
        pos += 1
        mats = {}
        for name in DUMP_FIELDS:
            if pos >= len(lines) or lines[pos] != name:
                raise ParseError(f"expected {name}", record=len(out))
            rows = lines[pos + 1 : pos + 1 + n]
            try:
                mats[name] = np.array([[float(v) for v in r.split()] for r in rows])
            except ValueError as exc:
                raise ParseError(str(exc), record=len(out)) from None
            if mats[name].shape != (n, n):
                raise ParseError(f"{name} is not {n}x{n}", record=len(out))
            pos += 1 + n
        if pos >= len(lines) or lines[pos] != "end":
            raise ParseError("missing end marker", record=len(out))
        pos += 1
        out.append((index, AdjacencySet(mats["A_b"], mats["A_s"], mats["A_hat"], mats["C"])))
    return out
