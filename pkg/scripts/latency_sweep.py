"""Steering-error ratio of the compensated policy over a grid of constant latencies.

Needs trained checkpoints in the run directory (``plmnet train``). Latencies
beyond the predictor's grid use its last knot, so the ratio there shows how
gracefully the compensation degrades.

    python3 scripts/latency_sweep.py --out runs/default --deltas 0.05 0.1 0.2 0.3 0.4 0.5
"""

import argparse

from plmnet.config import load_config
from plmnet.experiment import evaluate_schedule, load_models
from plmnet.geometry import load_track
from plmnet.latency import LatencySchedule


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/default")
    p.add_argument("--config")
    p.add_argument("--deltas", type=float, nargs="+", default=[0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4])
    args = p.parse_args()
    cfg = load_config(args.config, cli={"out": args.out})
    bm, tapm = load_models(cfg)
    track = load_track(cfg.track)
    print(f"{'delta':>6}{'BM MAE':>10}{'PLM MAE':>10}{'ratio':>8}{'clamps':>8}  off-track")
    for d in args.deltas:
        rep, _, _ = evaluate_schedule(cfg, track, bm, tapm, LatencySchedule.constant(d))
        bm_mae, plm_mae = rep["steering"]["bm_delayed"]["mae"], rep["steering"]["plm"]["mae"]
        off = [a for a, f in rep["flags"].items() if f["off_track"]]
        print(f"{d:>6.2f}{bm_mae:>10.4f}{plm_mae:>10.4f}{plm_mae / bm_mae:>8.3f}{rep['plm_clamp_events']:>8d}  "
              f"{', '.join(off) or '-'}", flush=True)


if __name__ == "__main__":
    main()
