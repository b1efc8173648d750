"""Summarise the metrics export of a finished run.

    conda-cl run-all --config configs/quick.json
    python3 demos/read_report.py runs/quick/conda_metrics.json

Prints the mIoU matrix (stage x domain), the forgetting deltas relative to
the stage where each domain was adapted, and the stage averages.
"""

import sys

from conda_cl.metrics import load_export


def main(path):
    records, report, doc = load_export(path)
    domains = list(dict.fromkeys(r.domain for r in sorted(records, key=lambda r: r.stage)))
    stages = sorted({r.stage for r in records})
    by_key = {(r.domain, r.stage): r.miou for r in records}
    print(f"seed {doc['seed']}  config {doc['config_hash'][:12]}")
    print("stage " + "".join(f"{d:>10s}" for d in domains) + "   average")
    for s in stages:
        cells = "".join(f"{100 * by_key[(d, s)]:10.1f}" for d in domains)
        print(f"{s:5d} {cells}   {100 * report.stage_average[s]:7.1f}")
    print("\nforgetting (mIoU points relative to the stage each domain was adapted)")
    for (d, s), delta in sorted(report.deltas.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        if delta:
            print(f"  {d:>10s} at stage {s}: {100 * delta:+.2f}")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])
