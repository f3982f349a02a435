"""Pretrain, finetune, then replay on one seed and print how concept recognition moves.

    python scripts/forgetting_demo.py --out runs/demo [--seed 0] [--config configs/desk.conf]
"""

import argparse
from pathlib import Path

from kreplay.pipeline import SeedRun

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.conf")
    args = ap.parse_args()

    r = SeedRun(args.out, args.config, args.seed).base()
    r.replay("kreplay")
    print(f"{'model':10s} {'generic cider':>14s} {'seen rec':>9s} {'unseen rec':>11s}")
    for name in ("pretrain", "finetune", "kreplay"):
        rep = r.reports[name]
        print(f"{name:10s} {rep['generic']['cider']:14.3f} {rep['seen']['rec']:9.3f} {rep['unseen']['rec']:11.3f}")


if __name__ == "__main__":
    main()
