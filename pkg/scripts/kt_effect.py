"""Train SGL and SGL+KT on the default synthetic set and compare MRR and NDCG."""

import argparse
import json
import time

from sglkt.data import Dataset
from sglkt.presets import TRAIN_DIALOGS, VAL_DIALOGS, desk_generator, desk_train_config
from sglkt.train import evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--train", type=int, default=TRAIN_DIALOGS)
    ap.add_argument("--val", type=int, default=VAL_DIALOGS)
    args = ap.parse_args()
    gen = desk_generator()
    train_set = Dataset.generate(gen, "train", args.train)
    val_set = Dataset.generate(gen, "val", args.val)
    reports = {}
    for mode in ("sgl", "sgl_kt"):
        t0 = time.perf_counter()
        res = train(desk_train_config(mode=mode, epochs=args.epochs), train_set)
        reports[mode] = evaluate(res.model, val_set)
        print(json.dumps({"mode": mode, "seconds": round(time.perf_counter() - t0, 1), **reports[mode].values()}), flush=True)
    base, kt = reports["sgl"], reports["sgl_kt"]
    print(f"NDCG {100 * base.ndcg:.2f} -> {100 * kt.ndcg:.2f}  MRR {100 * base.mrr:.2f} -> {100 * kt.mrr:.2f}")


if __name__ == "__main__":
    main()
