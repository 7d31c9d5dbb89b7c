import json
import time

import numpy as np
import pytest

from sglkt import tensor as T
from sglkt.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from sglkt.config import MODES, TrainConfig, apply_overrides, load_config, save_config
from sglkt.data import Dataset, GeneratorConfig
from sglkt.errors import ConfigError, NumericError, ParseError, VersionError
from sglkt.graph import GRAPH_MODES, EdgeSampler, read_adjacency_dump
from sglkt.metrics import format_report, graph_f1
from sglkt.model import SGLModel
from sglkt.nn import param
from sglkt.train import (
    AdamState,
    adam_step,
    dump_adjacency,
    ensemble_eval,
    ensemble_evaluate,
    evaluate,
    load_model,
    lr_schedule,
    train,
)

# ---------------------------------------------------------------------------
# optimiser and schedule
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = param(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    adam_step([("p", p)], AdamState(), 0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_constant_gradient_steps_by_lr():
    p = param(np.array([0.0, 0.0]))
    state = AdamState()
    for _ in range(200):
        before = p.data.copy()
        p.grad = np.array([3.0, -0.01])
        adam_step([("p", p)], state, 1e-3)
    assert np.allclose(before - p.data, [1e-3, -1e-3], rtol=1e-3)


def test_adam_one_step_by_hand():
    p = param(np.array([0.5, -1.0]))
    p.grad = np.array([0.2, -4.0])
    adam_step([("p", p)], AdamState(), 0.01)
    # m = 0.1 g, v = 0.001 g^2, bias-corrected m/v are g and g^2
    expected = [0.5 - 0.01 * 0.2 / (0.2 + 1e-8), -1.0 + 0.01 * 4.0 / (4.0 + 1e-8)]
    assert np.allclose(p.data, expected, rtol=0, atol=1e-15)


def test_adam_nan_names_the_parameter():
    p = param(np.zeros(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError, match="encoder.W"):
        adam_step([("encoder.W", p)], AdamState(), 0.1)


def test_lr_schedule_values():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(4) == 4e-4
    assert np.isclose(lr_schedule(2), 2.5e-4)
    assert lr_schedule(11) == 4e-4
    assert lr_schedule(12) == 2e-4
    assert lr_schedule(15) == 1e-4
    assert lr_schedule(24) == 4e-4 / 32 == lr_schedule(40)
    with pytest.raises(ConfigError):
        lr_schedule(-1)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_defaults_and_overrides(tmp_path):
    cfg = TrainConfig()
    assert (cfg.d_h, cfg.heads, cfg.tau, cfg.steps) == (512, 2, 0.5, 2)
    cfg = apply_overrides(cfg, ["d_h=16", "tau=0.25", "mode=sgl_kt"])
    assert cfg.d_h == 16 and cfg.tau == 0.25 and cfg.mode == "sgl_kt"
    path = tmp_path / "c.json"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert load_config(path, ["epochs=3"]).epochs == 3
    for bad in (["nope=1"], ["d_h=x"], ["graph_mode=soft"], ["heads=3"], ["dropout=1.0"], ["edge_grad_clip=-1"]):
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), bad)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_and_errors(tmp_path):
    path = tmp_path / "ck.bin"
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(2.5)}
    save_checkpoint(path, arrays, {"epoch": 3})
    back, header = load_checkpoint(path)
    assert header["epoch"] == 3 and np.array_equal(back["a"], arrays["a"]) and back["b"].shape == ()
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (tmp_path / "junk.bin").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "junk.bin")
    (tmp_path / "v2.bin").write_bytes(MAGIC[:7] + b"\x02" + raw[8:])
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "v2.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "short.bin")


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


def test_one_epoch_on_fifty_dialogs_is_quick(make_config):
    data = Dataset.generate(GeneratorConfig(), "train", 50)
    t0 = time.perf_counter()
    res = train(make_config(d_h=16), data)
    assert time.perf_counter() - t0 < 300
    assert len(res.history) == 1 and np.isfinite(res.history[0]["loss"])


def test_training_is_deterministic(small_sets, make_config):
    a = train(make_config(epochs=2), small_sets[0]).history
    b = train(make_config(epochs=2), small_sets[0]).history
    assert [r["loss"] for r in a] == [r["loss"] for r in b]


def test_dropout_is_seeded_and_training_only(small_sets, make_config):
    d = small_sets[0].dialogs[0]
    plain, dropped = (SGLModel(make_config(dropout=p), small_sets[0].vocab_size, small_sets[0].d_v) for p in (0.0, 0.3))
    sampler = lambda: EdgeSampler(True, np.random.default_rng(4))  # noqa: E731
    assert plain.loss(d, sampler())[0].data != dropped.loss(d, sampler())[0].data
    assert dropped.loss(d, sampler())[0].data == dropped.loss(d, sampler())[0].data
    assert np.array_equal(plain.score_dialog(d)[0], dropped.score_dialog(d)[0])
    a = train(make_config(dropout=0.3, epochs=2), small_sets[0]).history
    assert a == [dict(r, seconds=s["seconds"]) for r, s in zip(train(make_config(dropout=0.3, epochs=2), small_sets[0]).history, a)]


def test_edgeless_never_touches_edge_parameters(small_sets, make_config):
    cfg = make_config(graph_mode="edgeless")
    model = SGLModel(cfg, small_sets[0].vocab_size, small_sets[0].d_v)
    loss, _ = model.loss(small_sets[0].dialogs[0], EdgeSampler(True, np.random.default_rng(0)))
    T.backward(loss)
    assert model.W_c.grad is None or np.all(model.W_c.grad == 0)
    before = model.W_c.data.copy()
    res = train(cfg, small_sets[0])
    assert np.array_equal(before, SGLModel(cfg, small_sets[0].vocab_size, small_sets[0].d_v).W_c.data)
    assert np.array_equal(res.model.W_c.data, before)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("graph_mode", GRAPH_MODES)
def test_mode_matrix_smoke_epoch(mode, graph_mode, small_sets, make_config):
    cfg = make_config(mode=mode, graph_mode=graph_mode, top_i=2)
    res = train(cfg, small_sets[0])
    assert np.isfinite(res.history[0]["loss"])
    report = evaluate(res.model, small_sets[1])
    assert 0 <= report.mrr <= 1 and 0 <= report.graph_f1 <= 1


def test_resume_matches_uninterrupted_run(small_sets, make_config, tmp_path):
    full = train(make_config(epochs=3), small_sets[0], out_dir=tmp_path / "full").history
    train(make_config(epochs=2), small_sets[0], out_dir=tmp_path / "part")
    resumed = train(make_config(epochs=3), small_sets[0], out_dir=tmp_path / "part",
                    resume=tmp_path / "part" / "checkpoint.bin").history
    assert len(resumed) == 1
    assert abs(resumed[0]["loss"] - full[2]["loss"]) <= 1e-12
    lines = (tmp_path / "part" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [0, 1, 2]


def test_resume_rejects_a_different_architecture(small_sets, make_config, tmp_path):
    train(make_config(), small_sets[0], out_dir=tmp_path)
    with pytest.raises(VersionError):
        train(make_config(epochs=2, d_h=12), small_sets[0], resume=tmp_path / "checkpoint.bin")


def test_nan_loss_aborts_and_keeps_last_checkpoint(small_sets, make_config, tmp_path, monkeypatch):
    calls = {"n": 0}
    original = SGLModel.loss

    def flaky(self, dialog, sampler):
        calls["n"] += 1
        total, parts = original(self, dialog, sampler)
        if calls["n"] > len(small_sets[0]):
            total = total * np.nan
        return total, parts

    monkeypatch.setattr(SGLModel, "loss", flaky)
    with pytest.raises(NumericError):
        train(make_config(epochs=2), small_sets[0], out_dir=tmp_path)
    _, header = load_checkpoint(tmp_path / "checkpoint.bin")
    assert header["epoch"] == 0


def test_checkpoint_restores_model_exactly(small_sets, make_config, tmp_path):
    res = train(make_config(), small_sets[0], out_dir=tmp_path)
    model = load_model(res.checkpoint)
    for (n1, p1), (n2, p2) in zip(res.model.named_parameters(), model.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    _, header = load_checkpoint(res.checkpoint)
    assert header["rng"]["next_epoch"] == 1 and header["adam_step"] == len(small_sets[0])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(small_sets, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(d_h=8, heads=2, epochs=1, seed=0)
    return train(cfg, small_sets[0], out_dir=out)


def test_evaluate_is_repeatable(trained, small_sets):
    a, b = evaluate(trained.model, small_sets[1]), evaluate(trained.model, small_sets[1])
    assert format_report(a) == format_report(b)


def test_random_model_is_near_chance():
    data = Dataset.generate(GeneratorConfig(), "val", 20)
    cfg = TrainConfig(d_h=16, seed=5)
    report = evaluate(SGLModel(cfg, data.vocab_size, data.d_v), data)
    assert 0.02 < report.mrr < 0.12


def test_edgeless_graph_f1_is_zero(small_sets, make_config):
    model = SGLModel(make_config(graph_mode="edgeless"), small_sets[1].vocab_size, small_sets[1].d_v)
    assert evaluate(model, small_sets[1]).graph_f1 == 0.0


def test_incompatible_dataset_is_a_version_error(trained):
    other = Dataset.generate(GeneratorConfig(d_v=9, rounds=2, candidates=5, k_min=2, k_max=3), "val", 1)
    with pytest.raises(VersionError):
        evaluate(trained.model, other)


def test_ensemble_rules(trained, small_sets, make_config):
    single = format_report(evaluate(trained.model, small_sets[1]))
    twin = load_model(trained.checkpoint)
    assert format_report(ensemble_evaluate([trained.model, twin], small_sets[1])) == single
    assert format_report(ensemble_eval([trained.checkpoint] * 3, small_sets[1])) == single
    other = train(make_config(seed=1), small_sets[0]).model
    ab = ensemble_evaluate([trained.model, other, twin], small_sets[1])
    ba = ensemble_evaluate([other, twin, trained.model], small_sets[1])
    assert format_report(ab) == format_report(ba)
    with pytest.raises(ConfigError):
        ensemble_evaluate([trained.model], small_sets[1])
    wide = SGLModel(make_config(d_h=12), small_sets[1].vocab_size, small_sets[1].d_v)
    with pytest.raises(VersionError):
        ensemble_evaluate([trained.model, wide], small_sets[1])


def test_adjacency_dump_matches_evaluation(trained, small_sets, tmp_path):
    path = tmp_path / "adj.txt"
    dump_adjacency(trained.model, small_sets[1], path)
    records = read_adjacency_dump(path)
    assert len(records) == len(small_sets[1])
    tp_total = []
    for (index, adj), dialog in zip(records, small_sets[1].dialogs):
        n = dialog.rounds + 1
        off = np.tril(np.ones((n, n), dtype=bool))
        for m in (adj.A_b, adj.A_s, adj.A_hat, adj.C):
            assert m.shape == (n, n) and np.all(m[off] == 0)
        assert np.array_equal(adj.C, dialog.C)
        tp_total.append(graph_f1(adj.A_b, adj.C))
    # micro F1 from the dump equals the evaluation's graph F1
    from sglkt.metrics import MetricsAccumulator

    acc = MetricsAccumulator()
    for (_, adj), dialog in zip(records, small_sets[1].dialogs):
        acc.add_round(np.zeros(dialog.candidates.shape[1]), 0)
        acc.add_graph(adj.A_b, adj.C)
    assert acc.report().graph_f1 == evaluate(trained.model, small_sets[1]).graph_f1


def test_adjacency_dump_io_error_names_path(trained, small_sets, tmp_path):
    bad = tmp_path / "missing" / "adj.txt"
    with pytest.raises(OSError, match="missing"):
        dump_adjacency(trained.model, small_sets[1], bad)
