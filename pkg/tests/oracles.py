"""Independent loop implementations used as test oracles.

Nothing here imports the package's vectorised code paths; each function
evaluates its formula with plain Python loops over scalars.
"""

import math


def ranks_by_sorting(scores):
    """1-based ranks: sort (−score, index) pairs, the lower index wins ties."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ranks = [0] * len(scores)
    for pos, i in enumerate(order):
        ranks[i] = pos + 1
    return ranks


def mrr_loop(ranks):
    total = 0.0
    for r in ranks:
        total += 1.0 / r
    return total / len(ranks)


def recall_loop(ranks, k):
    hits = 0
    for r in ranks:
        if r <= k:
            hits += 1
    return hits / len(ranks)


def mean_rank_loop(ranks):
    return sum(float(r) for r in ranks) / len(ranks)


def ndcg_loop(scores, relevance):
    n = len(scores)
    K = 0
    for v in relevance:
        if v > 0:
            K += 1
    if K == 0:
        return None
    ranks = ranks_by_sorting(scores)
    by_rank = [None] * n
    for i in range(n):
        by_rank[ranks[i] - 1] = i
    dcg = 0.0
    for r in range(1, K + 1):
        dcg += relevance[by_rank[r - 1]] / math.log2(1 + r)
    ideal_rel = sorted(relevance, reverse=True)
    idcg = 0.0
    for r in range(1, K + 1):
        idcg += ideal_rel[r - 1] / math.log2(1 + r)
    return dcg / idcg


def f1_loop(A_b, C):
    tp = fp = fn = 0
    n = len(C)
    for i in range(n):
        for j in range(i + 1, n):
            p, t = A_b[i][j] == 1, C[i][j] == 1
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def uniform_mrr(n):
    """Expected MRR when the ground truth is equally likely at every rank."""
    return sum(1.0 / r for r in range(1, n + 1)) / n


def message_pass_loop(X, A, W):
    """Per receiver j: (sum_i A[i][j] x_i / sum_i A[i][j]) W, zero when the in-degree is 0."""
    n, d = len(X), len(X[0])
    out = []
    for j in range(n):
        deg = 0.0
        acc = [0.0] * d
        for i in range(n):
            if A[i][j] != 0:
                deg += A[i][j]
                for k in range(d):
                    acc[k] += A[i][j] * X[i][k]
        if deg == 0:
            out.append([0.0] * len(W[0]))
            continue
        avg = [a / deg for a in acc]
        out.append([sum(avg[k] * W[k][m] for k in range(d)) for m in range(len(W[0]))])
    return out


def kt_loss_loop(y, s, clamp=1e-7):
    total = 0.0
    for row_y, row_s in zip(y, s):
        for yi, si in zip(row_y, row_s):
            si = min(max(si, clamp), 1.0 - clamp)
            total -= yi * math.log(si) + (1.0 - yi) * math.log(1.0 - si)
    return total


def softmax_ce_loop(logits, gt):
    total = 0.0
    for row, g in zip(logits, gt):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[g]
    return total


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def lstm_step_loop(x, h, c, W, b):
    """Scalar LSTM step, gates in order input, forget, candidate, output."""
    d = len(h)
    inp = list(x) + list(h)
    z = [b[k] + sum(inp[r] * W[r][k] for r in range(len(inp))) for k in range(4 * d)]
    i = [_sig(v) for v in z[:d]]
    f = [_sig(v) for v in z[d : 2 * d]]
    g = [math.tanh(v) for v in z[2 * d : 3 * d]]
    o = [_sig(v) for v in z[3 * d :]]
    c_new = [f[k] * c[k] + i[k] * g[k] for k in range(d)]
    h_new = [o[k] * math.tanh(c_new[k]) for k in range(d)]
    return h_new, c_new


def sequence_log_likelihood_loop(h0, seq, E, W, b, W_out, b_out, start_id=1):
    """log p(seq | h0) for one unpadded token list, decoded token by token."""
    h, c = list(h0), [0.0] * len(h0)
    prev = start_id
    total = 0.0
    for tok in seq:
        h, c = lstm_step_loop(E[prev], h, c, W, b)
        logits = [b_out[v] + sum(h[k] * W_out[k][v] for k in range(len(h))) for v in range(len(b_out))]
        m = max(logits)
        lse = m + math.log(sum(math.exp(v - m) for v in logits))
        total += logits[tok] - lse
        prev = tok
    return total


def generative_kt_loop(h, candidates, y, I, E, W, b, W_out, b_out):
    """-sum_t sum over the top-I labels (ties to the lower index) of y * log p."""
    total = 0.0
    for t in range(len(y)):
        top = sorted(range(len(y[t])), key=lambda i: (-y[t][i], i))[:I]
        for i in top:
            seq = [int(v) for v in candidates[t][i] if v != 0]
            total -= y[t][i] * sequence_log_likelihood_loop(h[t], seq, E, W, b, W_out, b_out)
    return total
