"""Calibration sweep for the synthetic-task ordering checks.

Trains the four variants (dense, pair-wise LMS, language-wise LMS, LMS+FD)
on three seeds of the default cipher task, evaluating every few hundred
steps, and records the learning curves to ``demos/calibration.json``. The
step budget used by the acceptance suite was picked from this record.

    python3 demos/calibrate_ordering.py --steps 3000 --eval-every 150
"""

import argparse
import json
from pathlib import Path

from lmsfd.experiments import ORDERING_MODEL, ORDERING_TRAIN, ORDERING_VALID_PER_PAIR, VARIANTS, judge, run_variant, table

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=3000)
parser.add_argument("--eval-every", type=int, default=150)
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
parser.add_argument("--out", default=str(Path(__file__).with_name("calibration.json")))
args = parser.parse_args()

results = {}
for seed in args.seeds:
    for variant in VARIANTS:
        r = run_variant(variant, seed, args.steps, args.eval_every)
        results[variant, seed] = r
        print(f"seed {seed} {variant:<9} {r.seconds:6.1f}s  final " + "  ".join(
            f"{route}={r.mean_at(None, route):.2f}" for route in sorted({c['route'] for c in r.curve})
        ), flush=True)

checkpoints = sorted({c["step"] for r in results.values() for c in r.curve})
summary = []
for step in checkpoints:
    v = judge(results, args.seeds, step)
    summary.append({"step": step, "a": v.a, "b": v.b, "c": v.c, "detail": v.__dict__})
    print(f"\n-- step {step}: (a) {v.a}  (b) {v.b}  (c) {v.c}")
    print(table(results, args.seeds, step))

record = {
    "train": {k: getattr(ORDERING_TRAIN, k) for k in ("batch_size", "lr", "warmup", "temperature")},
    "model": ORDERING_MODEL,
    "valid_per_pair": ORDERING_VALID_PER_PAIR,
    "steps": args.steps,
    "seeds": args.seeds,
    "runs": [
        {"variant": r.variant, "seed": r.seed, "seconds": round(r.seconds, 1), "curve": r.curve}
        for r in results.values()
    ],
    "checks_by_step": summary,
}
Path(args.out).write_text(json.dumps(record, indent=2) + "\n")
print(f"\nwrote {args.out}")
