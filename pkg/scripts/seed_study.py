"""Reruns the whole pipeline for several seeds and tabulates the headline numbers.

Each seed gets its own run directory under ``--root``; expect about 20 min
per seed with the default configuration.

    python3 scripts/seed_study.py --root runs/seeds --seeds 0 1 2
"""

import argparse
import json
from pathlib import Path

from plmnet.config import load_config
from plmnet.experiment import reproduce


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="runs/seeds")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    for seed in args.seeds:
        cfg = load_config(args.config, cli={"seed": seed, "out": str(Path(args.root) / f"seed{seed}")})
        criteria, timing = reproduce(cfg, log=lambda m: None, quick_checks=False)
        reports = {lab: json.loads((Path(cfg.out) / "eval" / lab / "report.json").read_text())
                   for lab in (s.label() for s in cfg.latency_schedules())}
        ratios = {lab: r["steering"]["plm"]["mae"] / r["steering"]["bm_delayed"]["mae"] for lab, r in reports.items()}
        failed = [c.number for c in criteria if c.passed is False]
        print(f"seed {seed}: " + "  ".join(f"{k} {v:.3f}" for k, v in ratios.items())
              + f"  failed {failed or '-'}  {timing['total']:.0f} s", flush=True)


if __name__ == "__main__":
    main()
