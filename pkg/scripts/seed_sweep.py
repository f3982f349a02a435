"""Finetune vs replay across seeds, optionally over a grid of loss weights.

    python scripts/seed_sweep.py --out runs/sweep --seeds 0 1 2 3 --weights 1,1 0.5,1
"""

import argparse
import json
import statistics
from pathlib import Path

from kreplay.pipeline import SeedRun

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--weights", nargs="+", default=["1.0,1.0"], help="lambda_k,lambda_d pairs")
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.conf")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    results = {}
    for seed in args.seeds:
        r = SeedRun(args.out / f"seed{seed}", args.config, seed, tuple(args.override)).base()
        results.setdefault("finetune", []).append(r.reports["finetune"])
        for pair in args.weights:
            k, d = pair.split(",")
            name = f"kreplay_k{k}_d{d}"
            results.setdefault(name, []).append(r.replay(name, (f"lambda_k={k}", f"lambda_d={d}")))

    summary = {}
    for name, reps in results.items():
        cols = {"cider": [x["generic"]["cider"] for x in reps], "seen": [x["seen"]["rec"] for x in reps],
                "unseen": [x["unseen"]["rec"] for x in reps]}
        summary[name] = {c: {"mean": statistics.fmean(v), "sd": statistics.pstdev(v), "values": v}
                         for c, v in cols.items()}
        print(f"{name:22s} " + "  ".join(f"{c} {s['mean']:.3f}+-{s['sd']:.3f}" for c, s in summary[name].items()))
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
