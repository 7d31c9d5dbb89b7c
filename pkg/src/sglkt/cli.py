"""Command-line entry point: ``sglkt <subcommand>``.

Errors print one line ``error: <category>: <message>`` to stderr and exit
with status 2 (1 for a failed gradient check).
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

from .config import load_config, save_config
from .data import Dataset, GeneratorConfig, build_world, write_dataset
from .encoders import write_vocab
from .errors import ConfigError, SGLError
from .metrics import format_report
from .train import dump_adjacency, ensemble_eval, evaluate, load_model, train

OUTPUT_ENV = "SGLKT_OUTPUT_ROOT"


def output_path(path):
    """Relative output paths are placed under ``$SGLKT_OUTPUT_ROOT`` when it is set."""
    root = os.environ.get(OUTPUT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def generator_config(path, overrides):
    d = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        d[key] = _parse_value(value)
    return GeneratorConfig.from_dict(d).validate()


def cmd_gen_data(args):
    cfg = generator_config(args.config, args.set)
    out = output_path(args.out)
    os.makedirs(out, exist_ok=True)
    for split, count in (("train", args.train), ("val", args.val), ("test", args.test)):
        if count:
            ds = Dataset.generate(cfg, split, count)
            write_dataset(ds.dialogs, os.path.join(out, f"{split}.jsonl"), cfg, split)
    write_vocab(build_world(cfg).tokens, os.path.join(out, "vocab.txt"))
    with open(os.path.join(out, "generator.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(out)


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    if not cfg.train_path:
        raise ConfigError("train_path is not set (use --set train_path=...)")
    train_set = Dataset.load(cfg.train_path)
    val_set = Dataset.load(cfg.val_path) if cfg.val_path else None
    out = output_path(cfg.output_dir)
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "config.json"))
    res = train(cfg, train_set, val_set, out_dir=out, resume=args.resume,
                log=None if args.quiet else lambda r: print(json.dumps(r), flush=True))
    print(res.checkpoint)


def _emit_report(report, out):
    text = format_report(report)
    if out:
        path = output_path(out)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_eval(args):
    model = load_model(args.checkpoint)
    _emit_report(evaluate(model, Dataset.load(args.data)), args.out)


def cmd_ensemble_eval(args):
    _emit_report(ensemble_eval(args.checkpoints, Dataset.load(args.data)), args.out)


def cmd_dump_adj(args):
    model = load_model(args.checkpoint)
    records = dump_adjacency(model, Dataset.load(args.data), output_path(args.out))
    print(f"{len(records)} dialogs -> {output_path(args.out)}")


def cmd_grad_check(args):
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed, max_coords=args.max_coords, include_model=not args.ops_only)
    failed = 0
    for r in results:
        failed += not r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_err={r.error:.3e}")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="sglkt", description="Sparse graph learning for visual dialog.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic train/val/test splits")
    p.add_argument("--config", help="generator JSON file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--test", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="training JSON file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the metrics report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble-eval", help="evaluate the mean-sigmoid ensemble of checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ensemble_eval)

    p = sub.add_parser("dump-adj", help="write eval-mode adjacency matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_adj)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=20)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_grad_check)
    return parser


def error_category(exc):
    if isinstance(exc, SGLError):
        return exc.category
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (ValueError, KeyError)):
        return "parse"
    return "internal"


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (SGLError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {error_category(exc)}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
