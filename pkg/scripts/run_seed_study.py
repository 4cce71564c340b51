#!/usr/bin/env python
"""Paired multi-seed study: full fusion vs appearance-only detection,
and graph-mixed vs per-node station classification.

Each seed draws a fresh cohort, trains all four models, and reports the
paired deltas plus their across-seed means.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from lnstation.config import config_hash, config_profile, load_config
from lnstation.experiment import run_ablation_pair


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="experiment config JSON (default: desk profile)")
    ap.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed0")
    ap.add_argument("--seed0", type=int, default=0)
    ap.add_argument("--patients", type=int, default=None)
    ap.add_argument("--out", help="optional JSON dump of per-seed outcomes")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else config_profile("desk")
    if args.patients is not None:
        cfg.n_patients = args.patients

    print(f"config {config_hash(cfg)[:12]}  patients {cfg.n_patients}  seeds {args.seeds}")
    header = (
        f"{'seed':>4} {'mFROC full':>11} {'mFROC app':>10} {'delta':>8}"
        f" {'AUC gcn':>8} {'AUC plain':>10} {'delta':>8} {'sec':>6}"
    )
    print(header)
    print("-" * len(header))
    outcomes = []
    for i in range(args.seeds):
        seed = args.seed0 + i
        t0 = time.time()
        res = run_ablation_pair(cfg, seed)
        dt = time.time() - t0
        outcomes.append(res)
        print(
            f"{seed:>4} {res.mfroc_full:>11.4f} {res.mfroc_appearance:>10.4f}"
            f" {res.mfroc_full - res.mfroc_appearance:>+8.4f}"
            f" {res.station_auc_gcn:>8.4f} {res.station_auc_plain:>10.4f}"
            f" {res.station_auc_gcn - res.station_auc_plain:>+8.4f} {dt:>6.1f}"
        )
    n = max(len(outcomes), 1)
    mean_d_froc = sum(o.mfroc_full - o.mfroc_appearance for o in outcomes) / n
    mean_d_auc = sum(o.station_auc_gcn - o.station_auc_plain for o in outcomes) / n
    print("-" * len(header))
    print(f"mean mFROC delta {mean_d_froc:+.4f}   mean station AUC delta {mean_d_auc:+.4f}")
    if args.out:
        payload = [
            {
                "seed": o.seed,
                "station_auc_gcn": o.station_auc_gcn,
                "station_auc_plain": o.station_auc_plain,
                "mfroc_full": o.mfroc_full,
                "mfroc_appearance": o.mfroc_appearance,
                "froc_at_full": o.froc_at_full,
                "froc_at_appearance": o.froc_at_appearance,
            }
            for o in outcomes
        ]
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(payload, indent=1, sort_keys=True))
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
