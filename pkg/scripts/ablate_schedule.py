"""Compare radius reduction with constant-radius APGD at an equal iteration budget.

Trains (or loads) one PIR-AT toy model and reports aAcc per loss, schedule and attack seed.
Usage: python3 scripts/ablate_schedule.py --eps 12/255 --seeds 0,1,2 --n-val 12
"""

import argparse
import json
from fractions import Fraction

import numpy as np

from segrobust.attack import AttackConfig, attack_dataset
from segrobust.cli import schedule_variants
from segrobust.experiments import Benchmark
from segrobust.metrics import pixel_accuracy
from segrobust.models import load_params


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--eps", default="12/255")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--losses", default="mce,mce-bal,js")
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--n-val", type=int, default=12)
    ap.add_argument("--model", default=None, help="checkpoint; trains seed 0 PIR-AT if absent")
    args = ap.parse_args()

    bench = Benchmark()
    eps = float(Fraction(args.eps))
    train_ds, val = bench.split(0, "train"), bench.split(0, "val", args.n_val)
    weights = bench.class_weights(train_ds)
    if args.model:
        params = load_params(args.model)
    else:
        params, _ = bench.fit(train_ds, "robust", bench.backbones(0)["robust"], 0)
    for loss in args.losses.split(","):
        for label, schedule, restarts in schedule_variants(args.iters):
            accs = []
            for seed in (int(s) for s in args.seeds.split(",")):
                cfg = AttackConfig(eps, args.iters, loss, schedule, restarts, seed)
                _, acc = attack_dataset(params, cfg, val, weights)
                accs.append(pixel_accuracy(acc))
            print(json.dumps({"loss": loss, "setting": label, "aacc": accs,
                              "mean": float(np.mean(accs))}), flush=True)


if __name__ == "__main__":
    main()
