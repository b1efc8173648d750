"""Naive self-training versus likelihood-regularised self-training on one seed.

    python3 demos/compare_one_seed.py [--config configs/quick.json] [--lam 0.005 5e-6]

Both arms start from the same source segmenter and the same frozen flow. For
each requested lambda the script prints the per-stage mIoU of every domain,
the forgetting on the first target and the final averages. With the quick
configuration this takes under a minute; pass configs/default.json for the
full benchmark schedule.
"""

import argparse
import dataclasses
from pathlib import Path

from conda_cl.benchmark import format_comparison, run_seed
from conda_cl.config import parse_config

ROOT = Path(__file__).resolve().parent.parent


def table(cfg, records):
    names = [d.name for d in cfg.domains]
    rows = ["stage  " + "  ".join(f"{n:>8s}" for n in names)]
    for stage in range(len(names)):
        got = {r.domain: r.miou for r in records if r.stage == stage}
        rows.append(f"{stage:5d}  " + "  ".join(f"{100 * got[n]:8.1f}" for n in names))
    return "\n".join(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "quick.json"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lam", type=float, nargs="+", default=[0.005])
    args = ap.parse_args()

    cfg = dataclasses.replace(parse_config(args.config), seed=args.seed)
    arms = {"naive": 0.0, **{f"lam={lam:g}": lam for lam in args.lam}}
    result = run_seed(cfg, arms)
    for name, arm in result["arms"].items():
        print(f"\n[{name}] mIoU (%) after each stage")
        print(table(cfg, arm["records"]))
    print()
    print(format_comparison({"per_seed": [result], "mean": {}}))


if __name__ == "__main__":
    main()
