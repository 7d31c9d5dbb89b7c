"""Optimisation, evaluation, ensembling and adjacency dumps."""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .errors import ConfigError, NumericError, VersionError
from .graph import EdgeSampler, block_to_full, write_adjacency_dump
from .metrics import MetricsAccumulator, format_report
from .model import SGLModel

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.jsonl"


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
    """One bias-corrected Adam update, in place on ``param.data``.

    A parameter without a gradient is treated as having a zero gradient.
    """
    b1, b2 = betas
    shapes, grads = [], []
    for name, p in named_params:
        g = np.zeros(p.shape) if p.grad is None else np.asarray(p.grad, dtype=T.DTYPE)
        if g.shape != p.shape:
            raise NumericError(f"gradient of {name} has shape {g.shape}, parameter has {p.shape}")
        shapes.append(p.shape)
        grads.append(g.ravel())
    # one flat update: per-parameter numpy calls dominate the cost at desk width
    g = np.concatenate(grads)
    if not np.all(np.isfinite(g)):
        name = next(n for (n, _), x in zip(named_params, grads) if not np.all(np.isfinite(x)))
        raise NumericError(f"non-finite gradient in parameter {name}")
    m = np.concatenate([state.m[n].ravel() if n in state.m else np.zeros(x.size) for (n, _), x in zip(named_params, grads)])
    v = np.concatenate([state.v[n].ravel() if n in state.v else np.zeros(x.size) for (n, _), x in zip(named_params, grads)])
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * g * g
    update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
    start = 0
    for (name, p), s, x in zip(named_params, shapes, grads):
        stop = start + x.size
        state.m[name], state.v[name] = m[start:stop].reshape(s), v[start:stop].reshape(s)
        p.data = p.data - update[start:stop].reshape(s)
        start = stop
    return state


def lr_schedule(epoch, cfg=None):
    """Linear warm-up to the peak, flat, then a fixed factor at every decay epoch."""
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * epoch / cfg.warmup_epochs
    halvings = 0
    if epoch >= cfg.decay_start:
        halvings = (min(epoch, cfg.decay_end) - cfg.decay_start) // cfg.decay_every + 1
    return cfg.lr_peak * cfg.decay_factor**halvings


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def step_rng(cfg, epoch, step, item=0):
    """Edge-sampling generator for one dialog of one step; a pure function of the seeds."""
    return np.random.default_rng([cfg.seed, epoch, step, item])


def epoch_order(cfg, epoch, n):
    return np.random.default_rng([cfg.data_seed, cfg.seed, epoch]).permutation(n)


def save_training_state(path, model, adam, epoch):
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for name in sorted(adam.m):
        arrays[f"adam_m/{name}"] = adam.m[name]
        arrays[f"adam_v/{name}"] = adam.v[name]
    meta = {
        "config": model.cfg.to_dict(),
        "epoch": epoch,
        "adam_step": adam.step,
        "vocab_size": model.vocab_size,
        "d_v": model.d_v,
        # samplers are re-derived from these seeds at every step
        "rng": {"seed": model.cfg.seed, "data_seed": model.cfg.data_seed, "next_epoch": epoch + 1},
    }
    save_checkpoint(path, arrays, meta)


def load_model(path, with_state=False):
    arrays, header = load_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"])
    model = SGLModel(cfg, header["vocab_size"], header["d_v"])
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise VersionError(f"{path}: checkpoint does not match its config: {exc}") from exc
    if not with_state:
        return model
    adam = AdamState(step=header["adam_step"])
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            adam.m[k[len("adam_m/") :]] = v
        elif k.startswith("adam_v/"):
            adam.v[k[len("adam_v/") :]] = v
    return model, adam, header


def check_compatible(model, dataset):
    if dataset.vocab_size != model.vocab_size or dataset.d_v != model.d_v:
        raise VersionError(
            f"dataset (vocab {dataset.vocab_size}, d_v {dataset.d_v}) does not match "
            f"model (vocab {model.vocab_size}, d_v {model.d_v})"
        )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: SGLModel
    history: list
    checkpoint: str = None


def train(cfg, train_set, val_set=None, out_dir=None, resume=None, log=None):
    """Train per ``cfg``; writes a checkpoint and a JSONL log line per epoch when ``out_dir`` is set."""
    cfg.validate()
    if resume:
        model, adam, header = load_model(resume, with_state=True)
        if model.cfg.to_dict() != cfg.to_dict():
            diff = sorted(k for k, v in cfg.to_dict().items() if model.cfg.to_dict().get(k) != v)
            if set(diff) - {"epochs", "train_path", "val_path", "output_dir", "eval_every"}:
                raise VersionError(f"resume config differs from checkpoint in {diff}")
            model.cfg = cfg
        start = header["epoch"] + 1
    else:
        model, adam, start = SGLModel(cfg, train_set.vocab_size, train_set.d_v), AdamState(), 0
    check_compatible(model, train_set)
    params = list(model.named_parameters())
    ckpt = os.path.join(out_dir, CHECKPOINT_NAME) if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        if not resume and os.path.exists(os.path.join(out_dir, LOG_NAME)):
            os.remove(os.path.join(out_dir, LOG_NAME))
    history = []
    dialogs = train_set.dialogs
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        order = epoch_order(cfg, epoch, len(dialogs))
        totals = {"loss": 0.0, "answer": 0.0, "structural": 0.0}
        for step, first in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[first : first + cfg.batch_size]
            model.zero_grad()
            for item, idx in enumerate(batch):
                loss, parts = model.loss(dialogs[idx], EdgeSampler(True, step_rng(cfg, epoch, step, item)))
                if not np.isfinite(loss.data):
                    raise NumericError(f"loss is not finite at epoch {epoch} step {step}")
                if len(batch) > 1:
                    loss = loss / float(len(batch))
                T.backward(loss)
                totals["loss"] += float(loss.data) * len(batch)
                totals["answer"] += parts["answer"]
                totals["structural"] += parts["structural"]
            adam_step(params, adam, lr)
        record = {"epoch": epoch, "lr": lr}
        record.update({k: v / max(1, len(dialogs)) for k, v in totals.items()})
        if val_set is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            record["val"] = evaluate(model, val_set).values()
        record["seconds"] = round(time.perf_counter() - t0, 3)
        history.append(record)
        if ckpt:
            save_training_state(ckpt, model, adam, epoch)
            with open(os.path.join(out_dir, LOG_NAME), "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        if log:
            log(record)
    return TrainResult(model, history, ckpt)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _accumulate(acc, dialog, scores, A_b):
    for t in range(dialog.rounds):
        acc.add_round(scores[t], dialog.gt_index[t], dialog.relevance[t])
    acc.add_graph(A_b, dialog.C)


def evaluate(model, dataset):
    """Eval-mode MetricsReport, including graph F1 against each dialog's ``C``."""
    check_compatible(model, dataset)
    acc = MetricsAccumulator()
    for dialog in dataset.dialogs:
        scores, graph = model.score_dialog(dialog)
        _accumulate(acc, dialog, scores, block_to_full(graph.binary_block()))
    return acc.report()


def ensemble_scores(member_scores):
    """log(mean(exp(s))) across members: the log of the averaged sigmoid score or likelihood."""
    s = np.stack(member_scores)
    top = s.max(axis=0)
    return top + np.log(np.sum(np.exp(s - top), axis=0)) - np.log(len(member_scores))


def ensemble_evaluate(models, dataset):
    if len(models) < 2:
        raise ConfigError("an ensemble needs at least two models")
    ref = models[0]
    for m in models[1:]:
        shapes = {k: p.shape for k, p in m.named_parameters()}
        if shapes != {k: p.shape for k, p in ref.named_parameters()} or m.cfg.mode != ref.cfg.mode:
            raise VersionError("ensemble members have incompatible configurations")
    for m in models:
        check_compatible(m, dataset)
    acc = MetricsAccumulator()
    for dialog in dataset.dialogs:
        outs = [m.score_dialog(dialog) for m in models]
        scores = ensemble_scores([s for s, _ in outs])
        votes = sum(block_to_full(g.binary_block()) for _, g in outs)
        _accumulate(acc, dialog, scores, (2 * votes > len(models)).astype(np.float64))
    return acc.report()


def ensemble_eval(checkpoints, dataset):
    """Load checkpoint paths and evaluate their ensemble."""
    return ensemble_evaluate([load_model(p) for p in checkpoints], dataset)


def dump_adjacency(model, dataset, path):
    """Write the eval-mode AdjacencySet of every dialog."""
    check_compatible(model, dataset)
    records = []
    for i, dialog in enumerate(dataset.dialogs):
        _, graph = model.score_dialog(dialog)
        records.append((i, graph.adjacency(dialog.C)))
    try:
        write_adjacency_dump(records, path)
    except OSError as exc:
        raise OSError(f"cannot write adjacency dump to {path}: {exc.strerror}") from exc
    return records


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(report))
