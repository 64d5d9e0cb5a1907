#!/usr/bin/env python3
"""Run one loss-ablation grid on the reference benchmark and print the table.

    python3 scripts/run_ablation.py supervised --seeds 0 1 2
    python3 scripts/run_ablation.py weak --seeds 0 --steps 500
"""

import argparse
import logging
from dataclasses import replace

from gandisco import experiments as ex


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("mode", choices=("supervised", "weak"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--steps", type=int, help="override the adversarial step count")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    metric = "SSIM" if args.mode == "supervised" else "mAP"
    check = ex.table2_ordering if args.mode == "supervised" else ex.table3_ordering
    for seed in args.seeds:
        cfg = ex.reference_config(args.mode, seed)
        if args.steps is not None:
            cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
        if args.mode == "supervised":
            vals = {k: s.ssim for k, s in ex.supervised_ablation(cfg).items()}
        else:
            vals = {k: r.map for k, (r, _) in ex.weak_ablation(cfg).items()}
        print(f"seed {seed}")
        for k, v in vals.items():
            print(f"  {k:<16} {metric} {v:.4f}")
        print(f"  ordering holds: {check(vals)}")


if __name__ == "__main__":
    main()
