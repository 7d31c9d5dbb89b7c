"""Train every graph mode on the default synthetic set and report edge F1 against C."""

import argparse
import json
import time

from sglkt.data import Dataset
from sglkt.presets import GRAPH_MODE_ORDER, TRAIN_DIALOGS, VAL_DIALOGS, desk_generator, desk_train_config
from sglkt.train import evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--train", type=int, default=TRAIN_DIALOGS)
    ap.add_argument("--val", type=int, default=VAL_DIALOGS)
    ap.add_argument("--modes", nargs="+", default=list(GRAPH_MODE_ORDER))
    ap.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    gen = desk_generator()
    train_set = Dataset.generate(gen, "train", args.train)
    val_set = Dataset.generate(gen, "val", args.val)
    overrides = {k: json.loads(v) for k, v in (s.split("=", 1) for s in args.set)}
    for mode in args.modes:
        cfg = desk_train_config(graph_mode=mode, epochs=args.epochs, **overrides)
        t0 = time.perf_counter()
        res = train(cfg, train_set, log=lambda r: print(json.dumps(r), flush=True))
        report = evaluate(res.model, val_set)
        print(json.dumps({"graph_mode": mode, "seconds": round(time.perf_counter() - t0, 1), **report.values()}), flush=True)


if __name__ == "__main__":
    main()
