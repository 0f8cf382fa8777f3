"""Compare grouping-loss variants across seeds on shared proposals.

For each seed, trains the four variants (no grouping losses, variation
only, omission only, both) on one shared set of mined proposals and
evaluates on held-out images. Prints per-seed rows plus the mean table
with the gap of the full model over the no-loss baseline.

    python scripts/run_ablation.py --workdir runs/ablation --seeds 0 1 2 \
        --set msg.epochs=50
"""

import argparse
import json
import os
import sys

from glandseg.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/ablation",
                    help="artifact directory (default: runs/ablation)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2],
                    help="training seeds (default: 0 1 2)")
    ap.add_argument("--config", default=None, help="key=value config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    args = ap.parse_args()

    per_variant: dict[str, list[float]] = {}
    for seed in args.seeds:
        wd = os.path.join(args.workdir, f"seed_{seed}")
        argv = ["ablate", "--workdir", wd]
        if args.config:
            argv += ["--config", args.config]
        for item in args.set:
            argv += ["--set", item]
        argv += ["--set", f"msg.seed={seed}"]
        code = cli_main(argv)
        if code != 0:
            return code
        with open(os.path.join(wd, "ablation.json")) as fh:
            table = json.load(fh)
        row = {r["variant"]: r["miou"] for r in table["rows"]}
        print(f"seed {seed}: " + "  ".join(f"{k}={v:.4f}" for k, v in row.items()))
        for k, v in row.items():
            per_variant.setdefault(k, []).append(v)

    print("\nmean over seeds:")
    means = {k: sum(v) / len(v) for k, v in per_variant.items()}
    for k, v in means.items():
        print(f"  {k:8s} {v:.4f}")
    gap = means["both"] - means["none"]
    print(f"full model over baseline: {gap:+.4f} miou")
    return 0


if __name__ == "__main__":
    sys.exit(main())
