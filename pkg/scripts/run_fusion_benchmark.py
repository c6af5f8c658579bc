#!/usr/bin/env python3
"""Run the planted-XOR fusion-ordering study and print the summary table.

Six training runs on a fixed seed: two single-modality baselines,
intermediate and hierarchical fusion on the misregistered dataset
variant, and early fusion on both variants.

Usage:
    python3 scripts/run_fusion_benchmark.py --out out/benchmark [--seed 7]
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from mmfusion.experiments import fusion_ordering  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/benchmark")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--n-train", type=int, default=512)
    parser.add_argument("--n-test", type=int, default=256)
    args = parser.parse_args()

    start = time.time()
    result = fusion_ordering(args.out, seed=args.seed, epochs=args.epochs,
                             n_train=args.n_train, n_test=args.n_test,
                             log=print)
    print()
    print(result.table())
    print(f"total wall time: {time.time() - start:.0f} s")
    print(f"summary written to {Path(args.out) / 'summary.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
