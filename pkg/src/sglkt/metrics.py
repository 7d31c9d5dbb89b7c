"""Retrieval and structure metrics, and the plain-text metrics report."""

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError, NumericError, ParseError, ShapeError
from .graph import binarize_dense, support_mask

RECALL_KS = (1, 5, 10)
REPORT_KEYS = ("mrr", "r1", "r5", "r10", "mean", "ndcg", "overall", "graph_f1")


def rank_order(scores):
    """Candidate indices from best to worst; equal scores keep the lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ShapeError(f"expected one score per candidate, got shape {scores.shape}")
    if np.isnan(scores).any():
        raise NumericError("candidate scores contain NaN")
    return np.lexsort((np.arange(scores.size), -scores))


def rank_candidates(scores):
    """1-based rank of every candidate."""
    order = rank_order(scores)
    ranks = np.empty(order.size, dtype=np.int64)
    ranks[order] = np.arange(1, order.size + 1)
    return ranks


def gt_rank(scores, gt):
    return int(rank_candidates(scores)[gt])


def mrr(ranks):
    return float(np.mean(1.0 / np.asarray(ranks, dtype=np.float64)))


def recall_at_k(ranks, k):
    return float(np.mean(np.asarray(ranks) <= k))


def mean_rank(ranks):
    return float(np.mean(np.asarray(ranks, dtype=np.float64)))


def ndcg(scores, relevance):
    """DCG@K / ideal DCG@K with K the number of candidates of nonzero relevance.

    Returns ``None`` when every relevance is zero; such rounds are skipped.
    """
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.shape != np.shape(scores):
        raise ShapeError(f"ndcg: scores {np.shape(scores)} vs relevance {relevance.shape}")
    if np.any(relevance < 0) or np.any(~np.isfinite(relevance)):
        raise InvariantError("relevance must be finite and non-negative")
    K = int(np.count_nonzero(relevance))
    if K == 0:
        return None
    discount = 1.0 / np.log2(np.arange(2, K + 2))
    dcg = float(np.sum(relevance[rank_order(scores)[:K]] * discount))
    ideal = float(np.sum(np.sort(relevance)[::-1][:K] * discount))
    return dcg / ideal


def graph_confusion(A_b, C, support=None):
    """(tp, fp, fn) of predicted binary edges against supervision on the support."""
    A_b = np.asarray(A_b, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if A_b.shape != C.shape:
        raise ShapeError(f"graph_f1: A_b {A_b.shape} vs C {C.shape}")
    for name, m in (("A_b", A_b), ("C", C)):
        if not np.all(np.isin(m, (0.0, 1.0))):
            raise InvariantError(f"{name} must be binary")
    if support is None:
        support = support_mask(A_b.shape[0])
    pred = A_b[support] == 1
    true = C[support] == 1
    return int(np.sum(pred & true)), int(np.sum(pred & ~true)), int(np.sum(~pred & true))


def f1_from_counts(tp, fp, fn):
    if tp + fp == 0 or tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def graph_f1(A_b, C, support=None):
    """Edge F1 on the strictly upper-triangular support; 0 when nothing is predicted."""
    return f1_from_counts(*graph_confusion(A_b, C, support))


__all__ = [
    "RECALL_KS", "REPORT_KEYS", "rank_order", "rank_candidates", "gt_rank", "mrr", "recall_at_k",
    "mean_rank", "ndcg", "graph_confusion", "f1_from_counts", "graph_f1", "binarize_dense",
    "MetricsReport", "MetricsAccumulator", "format_report", "parse_report",
]


@dataclass
class MetricsReport:
    mrr: float
    r1: float
    r5: float
    r10: float
    mean: float
    ndcg: float
    overall: float
    graph_f1: float
    rounds: int = 0
    ndcg_rounds: int = 0
    ndcg_skipped: int = 0

    def values(self):
        return {k: getattr(self, k) for k in REPORT_KEYS}


class MetricsAccumulator:
    """Streaming sums over rounds; graph F1 is micro-averaged over all edges."""

    def __init__(self):
        self.ranks = []
        self.ndcgs = []
        self.skipped = 0
        self.tp = self.fp = self.fn = 0
        self.graphs = 0

    def add_round(self, scores, gt, relevance=None):
        self.ranks.append(gt_rank(scores, gt))
        if relevance is not None:
            value = ndcg(scores, relevance)
            if value is None:
                self.skipped += 1
            else:
                self.ndcgs.append(value)

    def add_graph(self, A_b, C):
        tp, fp, fn = graph_confusion(A_b, C)
        self.tp += tp
        self.fp += fp
        self.fn += fn
        self.graphs += 1

    def report(self):
        if not self.ranks:
            raise InvariantError("no rounds were scored")
        ranks = np.asarray(self.ranks)
        m = mrr(ranks)
        n = float(np.mean(self.ndcgs)) if self.ndcgs else 0.0
        return MetricsReport(
            mrr=m,
            r1=recall_at_k(ranks, 1),
            r5=recall_at_k(ranks, 5),
            r10=recall_at_k(ranks, 10),
            mean=mean_rank(ranks),
            ndcg=n,
            overall=(100.0 * m + 100.0 * n) / 2.0,
            graph_f1=f1_from_counts(self.tp, self.fp, self.fn),
            rounds=len(self.ranks),
            ndcg_rounds=len(self.ndcgs),
            ndcg_skipped=self.skipped,
        )


def format_report(report):
    """``key value`` lines in a fixed order, four decimals each."""
    return "".join(f"{k} {v:.4f}\n" for k, v in report.values().items())


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(report))


def parse_report(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if len(parts) != 2 or parts[0] not in REPORT_KEYS:
            raise ParseError(f"bad report line {lineno}: {line!r}")
        out[parts[0]] = float(parts[1])
    missing = [k for k in REPORT_KEYS if k not in out]
    if missing:
        raise ParseError(f"report is missing {missing}")
    return out
