"""Train AT and PIR-AT toy models for a few seeds and print their clean and SEA accuracy.

Usage: python3 scripts/run_benchmark.py --seeds 0,1,2 --epochs 1,5 --n-val 12 --out bench.json
"""

import argparse
import json
import time

from segrobust.attack import clean_accumulator
from segrobust.experiments import Benchmark
from segrobust.metrics import miou, pixel_accuracy
from segrobust.sea import sea_attack


def ints(text):
    return [int(v) for v in text.split(",")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=ints, default=[0, 1, 2])
    ap.add_argument("--epochs", type=ints, default=[Benchmark.short_epochs, Benchmark().train.epochs])
    ap.add_argument("--n-val", type=int, default=12)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    bench = Benchmark()
    eps = bench.train.epsilon
    rows = []
    for seed in args.seeds:
        start = time.perf_counter()
        train_ds, val = bench.split(seed, "train"), bench.split(seed, "val", args.n_val)
        weights = bench.class_weights(train_ds)
        backbones = bench.backbones(seed)
        for epochs in args.epochs:
            for name, init in (("AT", "clean"), ("PIR-AT", "robust")):
                params, _ = bench.fit(train_ds, init, backbones[init], seed, epochs=epochs)
                clean = clean_accumulator(params, val)
                ens = sea_attack(params, val, eps, weights, iterations=args.iters, seed=seed)
                rows.append({"seed": seed, "epochs": epochs, "model": name,
                             "clean_aacc": pixel_accuracy(clean), "clean_miou": miou(clean),
                             "sea_aacc": ens.aacc, "sea_miou": ens.miou})
                print(json.dumps(rows[-1]), flush=True)
        print(f"seed {seed}: {time.perf_counter() - start:.0f}s", flush=True)

    for epochs in args.epochs:
        for name in ("AT", "PIR-AT"):
            sel = [r["sea_aacc"] for r in rows if r["epochs"] == epochs and r["model"] == name]
            print(f"{epochs} epochs {name:7s} mean SEA aAcc {sum(sel) / len(sel):.3f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
