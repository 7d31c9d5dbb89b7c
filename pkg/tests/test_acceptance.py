"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The structure-recovery and knowledge-transfer checks train desk-scale
models (about 40 minutes on one core in total); the other checks take seconds.
"""

import time
from statistics import NormalDist

import numpy as np
import pytest

from oracles import f1_loop, mean_rank_loop, mrr_loop, ndcg_loop, recall_loop, uniform_mrr
from sglkt import tensor as T
from sglkt.cli import main as cli_main
from sglkt.data import Dataset
from sglkt.gradcheck import TOLERANCE, run_suite
from sglkt.graph import EdgeSampler, block_to_full, build_graph, full_adjacency, rolling_adjacency
from sglkt.losses import combine_labels, generative_kt_loss, generative_nll, one_hot
from sglkt.metrics import MetricsAccumulator, graph_f1, mean_rank, mrr, ndcg, rank_candidates, recall_at_k
from sglkt.model import SGLModel
from sglkt.presets import GRAPH_MODE_ORDER, TRAIN_DIALOGS, VAL_DIALOGS, desk_generator, desk_train_config
from sglkt.train import evaluate, train


def binomial_ci(p, n, level):
    """Normal-approximation interval for the frequency of ``n`` Bernoulli(p) draws."""
    half = NormalDist().inv_cdf(0.5 + level / 2) * np.sqrt(p * (1 - p) / n)
    return p - half, p + half


# ---------------------------------------------------------------------------
# fast criteria
# ---------------------------------------------------------------------------


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.error)
    ok = all(r.passed for r in results) and seconds < 60
    criterion("gradient suite", ok, f"{len(results)} checks, worst {worst.name} {worst.error:.2e} "
                                    f"(< {TOLERANCE:g}), {seconds:.1f}s (< 60s)")


def test_gumbel_law(criterion):
    rng = np.random.default_rng(2024)
    draws = 100_000
    misses = []
    for k in range(20):
        p1 = rng.uniform(0.02, 0.98)
        probs = np.broadcast_to([1.0 - p1, p1], (draws, 2))
        freq = EdgeSampler(True, np.random.default_rng(k)).binary(probs).mean()
        lo, hi = binomial_ci(p1, draws, 0.99)
        if not lo <= freq <= hi:
            misses.append((round(p1, 4), freq))
    criterion("ST-Gumbel law", not misses, f"20 p vectors x {draws} draws inside the 99% CI; misses {misses}")


def test_sparsity_and_support(criterion):
    rng = np.random.default_rng(11)
    bad = 0
    for i in range(1000):
        n, d = int(rng.integers(1, 11)), int(rng.integers(2, 9))
        Xh, Xq = T.tensor(rng.standard_normal((n, d))), T.tensor(rng.standard_normal((n, d)))
        Wc = T.tensor(rng.standard_normal((2, d)))
        mode = ("sgl", "sparse_hard")[i % 2]
        g = build_graph(mode, Xh, Xq, Wc, 0.5, EdgeSampler(True, np.random.default_rng(i)))
        z, A = block_to_full(g.hard), g.adjacency().A_hat
        bad += int(np.any(A[z == 0] != 0))
        bad += int(np.any(g.A_hat.data[~g.valid] != 0) or np.any(np.tril(A) != 0))
    criterion("sparsity and support", bad == 0, f"1000 training-mode forward passes, {bad} violations")


def test_incremental_equals_full(criterion):
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        Xh, Xq, Wc = (T.tensor(rng.standard_normal(s)) for s in ((10, 12), (10, 12), (2, 12)))
        inc, full = rolling_adjacency(Xh, Xq, Wc, 0.5), full_adjacency(Xh, Xq, Wc, 0.5)
        mismatches += sum(not np.array_equal(getattr(inc, k), getattr(full, k)) for k in ("A_b", "A_s", "A_hat"))
    criterion("incremental == full", mismatches == 0, f"100 seeds, T=10, entrywise exact; {mismatches} mismatches")


def test_metric_oracles(criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        N = int(rng.integers(2, 101))
        scores = np.round(rng.standard_normal(N), int(rng.integers(0, 3)))  # rounding creates ties
        rel = np.where(rng.random(N) < 0.2, rng.choice([0.5, 1.0], N), 0.0)
        ranks = [int(r) for r in rng.integers(1, N + 1, size=int(rng.integers(1, 20)))]
        got_rank = rank_candidates(scores)
        worst = max(worst, float(np.max(np.abs(got_rank - np.argsort(np.lexsort((np.arange(N), -scores))) - 1))))
        worst = max(worst, abs(mrr(ranks) - mrr_loop(ranks)), abs(mean_rank(ranks) - mean_rank_loop(ranks)))
        worst = max(worst, *(abs(recall_at_k(ranks, k) - recall_loop(ranks, k)) for k in (1, 5, 10)))
        a, b = ndcg(scores, rel), ndcg_loop(scores.tolist(), rel.tolist())
        worst = max(worst, 0.0 if a is None and b is None else abs(a - b))
        n = int(rng.integers(2, 12))
        A = np.triu(rng.random((n, n)) < rng.random(), k=1).astype(float)
        C = np.triu(rng.random((n, n)) < rng.random(), k=1).astype(float)
        worst = max(worst, abs(graph_f1(A, C) - f1_loop(A.tolist(), C.tolist())))
    acc = MetricsAccumulator()
    for gt in range(100):
        acc.add_round(np.zeros(100), gt)
    uniform = acc.report().mrr
    ok = worst <= 1e-10 and abs(uniform - 0.0519) <= 1e-4 and abs(uniform - uniform_mrr(100)) <= 1e-15
    criterion("metric oracles", ok, f"1000 instances, max deviation {worst:.1e} (<= 1e-10); "
                                    f"uniform MRR at N=100 {uniform:.6f} (0.0519 +- 1e-4)")


def test_generative_reduction(criterion, small_sets):
    train_set = small_sets[0]
    cfg = desk_train_config(mode="generative_kt", d_h=8, top_i=1)
    model = SGLModel(cfg, train_set.vocab_size, train_set.d_v)
    exact = True
    for d in train_set.dialogs:
        with T.no_grad():
            h = model.forward(d, EdgeSampler()).h
            y = model.combined_labels(d)
            a = generative_kt_loss(h, d.candidates, y, 1, model.decoder, model.encoder.embed).data
            b = generative_nll(h, d.answers, model.decoder, model.encoder.embed).data
        exact &= bool(a == b)
    criterion("generative I=1 reduction", exact, f"{len(train_set)} dialogs, generative_kt_loss(I=1) == generative_nll bit-exact")


def test_label_combination_contract(criterion, desk_sets):
    rounds, bad = 0, 0
    for dataset in desk_sets:
        for d in dataset.dialogs:
            N = d.candidates.shape[1]
            sparse = one_hot(d.gt_index, N)
            y = combine_labels(sparse, d.teacher)
            rounds += d.rounds
            bad += int(np.sum(y[np.arange(d.rounds), d.gt_index] != 1.0))
            bad += int(np.sum(np.any(y != np.maximum(sparse, d.teacher), axis=1)))
    criterion("label combination", bad == 0, f"{rounds} synthetic rounds, {bad} violations of y[gt]=1 and y=max(one-hot, teacher)")


def test_determinism(criterion, tmp_path):
    reports = []
    for run in ("a", "b"):
        root = tmp_path / run
        gen = ["gen-data", "--out", str(root / "data"), "--train", "40", "--val", "20"]
        cli_main(gen)
        cli_main(["train", "--quiet", "--set", f"train_path={root / 'data' / 'train.jsonl'}",
                  "--set", f"output_dir={root / 'run'}", "--set", "d_h=16", "--set", "epochs=2",
                  "--set", "lam=10", "--set", "edge_grad_clip=0.1"])
        cli_main(["eval", "--checkpoint", str(root / "run" / "checkpoint.bin"),
                  "--data", str(root / "data" / "val.jsonl"), "--out", str(root / "report.txt")])
        reports.append((root / "report.txt").read_bytes())
    criterion("determinism", reports[0] == reports[1] and len(reports[0]) > 0,
              f"two gen-data/train/eval runs, reports {'byte-identical' if reports[0] == reports[1] else 'differ'}")


# ---------------------------------------------------------------------------
# desk-scale training
# ---------------------------------------------------------------------------


SECONDS = {}


@pytest.fixture(scope="session")
def desk_sets():
    t0 = time.perf_counter()
    gen = desk_generator()
    sets = Dataset.generate(gen, "train", TRAIN_DIALOGS), Dataset.generate(gen, "val", VAL_DIALOGS)
    SECONDS["data"] = time.perf_counter() - t0
    return sets


@pytest.fixture(scope="session")
def structure_runs(desk_sets):
    t0 = time.perf_counter()
    runs = {}
    for mode in GRAPH_MODE_ORDER:
        res = train(desk_train_config(graph_mode=mode), desk_sets[0])
        runs[mode] = (res.model, evaluate(res.model, desk_sets[1]))
    return runs, time.perf_counter() - t0 + SECONDS["data"]


@pytest.mark.slow
def test_structure_recovery(criterion, structure_runs):
    runs, seconds = structure_runs
    f1 = {mode: report.graph_f1 for mode, (_, report) in runs.items()}
    ordered = all(f1[a] > f1[b] for a, b in zip(GRAPH_MODE_ORDER, GRAPH_MODE_ORDER[1:]))
    ok = f1["sgl"] >= 0.90 and f1["sgl"] > f1["dense"] and f1["edgeless"] == 0.0 and ordered and seconds <= 1800
    detail = ", ".join(f"{m} {v:.4f}" for m, v in f1.items())
    criterion("structure recovery", ok, f"graph F1 {detail}; need sgl >= 0.90 and strict order; {seconds / 60:.1f} min (<= 30)")


@pytest.mark.slow
def test_knowledge_transfer_effect(criterion, structure_runs, desk_sets):
    base = structure_runs[0]["sgl"][1]
    kt_model = train(desk_train_config(mode="sgl_kt"), desk_sets[0]).model
    kt = evaluate(kt_model, desk_sets[1])
    gain, drop = 100 * (kt.ndcg - base.ndcg), 100 * (base.mrr - kt.mrr)
    criterion("knowledge transfer", gain >= 3.0 and drop <= 10.0,
              f"NDCG {100 * base.ndcg:.2f} -> {100 * kt.ndcg:.2f} ({gain:+.2f}, need >= +3), "
              f"MRR {100 * base.mrr:.2f} -> {100 * kt.mrr:.2f} (drop {drop:.2f}, need <= 10)")
