#!/usr/bin/env python
"""Run the six-row feature-ablation grid and print one result table.

Rows toggle the three ingredients of the fused candidate vector:
appearance only; + station features (plain / GCN); + distances; full
model. Each row trains from scratch on the same cohort and seed.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from lnstation.config import config_hash, config_profile, load_config
from lnstation.experiment import ABLATION_ROWS, run_ablation_row


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="experiment config JSON (default: desk profile)")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--patients", type=int, default=None)
    ap.add_argument("--out", help="optional JSON dump of all rows")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else config_profile("desk")
    if args.patients is not None:
        cfg.n_patients = args.patients
    seed = cfg.seed if args.seed is None else args.seed

    print(f"config {config_hash(cfg)[:12]}  seed {seed}  patients {cfg.n_patients}")
    header = f"{'features':<28} {'mFROC':>7} {'FROC@1':>7} {'FROC@2':>7} {'FROC@3':>7} {'FROC@4':>7}"
    print(header)
    print("-" * len(header))
    results = []
    for row in ABLATION_ROWS:
        t0 = time.time()
        res = run_ablation_row(cfg, seed, row)
        res["seconds"] = round(time.time() - t0, 1)
        results.append(res)
        fr = res["froc_at"]
        print(
            f"{res['row']:<28} {res['mfroc']:>7.4f} "
            f"{fr['1']:>7.4f} {fr['2']:>7.4f} {fr['3']:>7.4f} {fr['4']:>7.4f}"
        )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(results, indent=1, sort_keys=True))
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
