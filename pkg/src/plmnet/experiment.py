"""Pipeline stages: collect, train, evaluate and reproduce, with their file outputs.

Every file is written whole (temporary file, then rename). Reports hold no
wall-clock values so reruns with the same configuration are byte-identical;
timings go to ``timing.json`` instead.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import (ImitationDataset, Jitter, balance_dataset, build_tapm_dataset, collect_dataset,
                      steering_summary, temporal_split)
from .geometry import Track, load_track
from .latency import LatencySchedule
from .metrics import (ARMS, compare_runs, format_steering_table, format_trajectory_table)
from .plm import BaseController, PlmController
from .policies import BaseModel, TimedActionPredictor, train_bm, train_tapm
from .simcore import ExpertController, TrajectoryLog, run_episode

ARM_FILES = {arm: f"{arm}.csv" for arm in ARMS}


class StageError(RuntimeError):
    """A pipeline stage could not run (missing inputs, failed training, ...)."""


# -- files ------------------------------------------------------------------

def write_atomic(path: Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    tmp.replace(path)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> None:
    write_atomic(path, dumps(obj))


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "data" / "dataset.csv"

    @property
    def data_summary(self) -> Path:
        return self.root / "data" / "summary.json"

    @property
    def bm(self) -> Path:
        return self.root / "models" / "bm.npz"

    @property
    def tapm(self) -> Path:
        return self.root / "models" / "tapm.npz"

    @property
    def train_summary(self) -> Path:
        return self.root / "models" / "train_summary.json"

    def eval_dir(self, label: str) -> Path:
        return self.root / "eval" / label


def echo_config(cfg: RunConfig, root: Path) -> None:
    write_json(Path(root) / "config.json", cfg.to_dict())


def update_manifest(root: Path, stage: str, files: list[Path]) -> None:
    """Record content hashes of a stage's outputs in ``manifest.json``."""
    root = Path(root)
    path = root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest[stage] = {str(Path(f).relative_to(root)): sha256_file(f) for f in sorted(files)}
    manifest["config_sha256"] = sha256_file(root / "config.json")
    write_json(path, manifest)


def _history_csv(history: list[dict]) -> str:
    keys = list(history[0]) if history else ["epoch"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in history:
        w.writerow([row[k] if k == "epoch" else repr(float(row[k])) for k in keys])
    return buf.getvalue()


# -- stages -----------------------------------------------------------------

def collect(cfg: RunConfig, log=print) -> dict:
    root = Path(cfg.out)
    echo_config(cfg, root)
    track = load_track(cfg.train_track)
    jitter = Jitter(cfg.jitter_offset, cfg.jitter_heading, cfg.jitter_speed, True,
                    cfg.action_noise, cfg.noise_hold)
    ds = collect_dataset(track, ExpertController(), cfg.episodes, cfg.dt, cfg.episode_duration,
                         jitter, cfg.seed, cfg.speed)
    lay = Layout(root)
    write_atomic(lay.dataset, ds.to_csv())
    summary = {"track": track.name, "episodes": cfg.episodes, "aborted_episodes": list(ds.aborted),
               "records": len(ds), "steering": steering_summary(ds.action)}
    write_json(lay.data_summary, summary)
    update_manifest(root, "collect", [lay.dataset, lay.data_summary])
    log(f"collected {len(ds)} records from {cfg.episodes} episodes on {track.name}")
    if ds.aborted:
        log(f"aborted episodes (dropped): {list(ds.aborted)}")
    log(format_summary(summary["steering"]))
    return summary


def format_summary(stats: dict) -> str:
    return "steering (before balancing)\n" + "\n".join(f"  {k:<6}{v:>14.6f}" if k != "count" else f"  {k:<6}{v:>14d}"
                                                       for k, v in stats.items())


def load_dataset(cfg: RunConfig) -> ImitationDataset:
    path = Layout(Path(cfg.out)).dataset
    if not path.exists():
        raise StageError(f"no dataset at {path}; run collect first")
    return ImitationDataset.from_csv(path.read_text(), cfg.dt)


def train(cfg: RunConfig, log=print) -> dict:
    root = Path(cfg.out)
    lay = Layout(root)
    raw = load_dataset(cfg)
    echo_config(cfg, root)
    # future-action labels come from the raw time series, before any record is dropped
    labelled = build_tapm_dataset(raw, cfg.delta_grid, cfg.dt)
    train_part, val_part = temporal_split(labelled, cfg.val_fraction)
    balanced = balance_dataset(train_part, cfg.bins, cfg.cap_ratio, cfg.seed)
    log(f"training records {len(train_part)} -> {len(balanced)} after balancing; validation {len(val_part)}")

    def every(n):
        return lambda row: log(f"  epoch {row['epoch'] + 1:3d}  train {row['train_mse']:.3e}  val {row['val_mse']:.3e}") \
            if (row["epoch"] + 1) % n == 0 else None

    bm, bm_hist = train_bm(balanced, val_part, cfg.train_config(cfg.bm_epochs), log=every(5))
    bm.freeze()
    hash_before = bm.param_hash()
    bm.save(lay.bm, {"seed": cfg.seed})
    log(f"base model trained; hash {hash_before[:12]}")
    tapm, tapm_hist = train_tapm(balanced, val_part, bm, cfg.train_config(cfg.tapm_epochs), log=every(5))
    hash_after = bm.param_hash()
    tapm.save(lay.tapm, {"seed": cfg.seed, "bm_hash": hash_before})
    bm_loss = lay.root / "models" / "bm_loss.csv"
    tapm_loss = lay.root / "models" / "tapm_loss.csv"
    write_atomic(bm_loss, _history_csv(bm_hist))
    write_atomic(tapm_loss, _history_csv(tapm_hist))
    summary = {
        "records": {"raw": len(raw), "train": len(train_part), "balanced": len(balanced), "val": len(val_part)},
        "bm_best_val_mse": min(r["val_mse"] for r in bm_hist),
        "tapm_best_val_mse": min(r["val_mse"] for r in tapm_hist),
        "bm_hash_before_tapm": hash_before,
        "bm_hash_after_tapm": hash_after,
        "bm_epochs": cfg.bm_epochs,
        "tapm_epochs": cfg.tapm_epochs,
    }
    write_json(lay.train_summary, summary)
    update_manifest(root, "train", [lay.bm, lay.tapm, bm_loss, tapm_loss, lay.train_summary])
    log(f"predictor trained; base model hash unchanged: {hash_before == hash_after}")
    return summary


def load_models(cfg: RunConfig) -> tuple[BaseModel, TimedActionPredictor]:
    lay = Layout(Path(cfg.out))
    for p in (lay.bm, lay.tapm):
        if not p.exists():
            raise StageError(f"missing checkpoint {p}; run train first")
    bm = BaseModel.load(lay.bm)
    tapm = TimedActionPredictor.load(lay.tapm)
    bm.freeze()
    return bm, tapm


def evaluation_duration(cfg: RunConfig, track: Track) -> float:
    if cfg.duration is not None:
        return cfg.duration
    return math.ceil(track.total_length / (cfg.speed * cfg.dt)) * cfg.dt


def run_arm(arm: str, track: Track, bm: BaseModel, tapm: TimedActionPredictor,
            schedule: LatencySchedule, cfg: RunConfig) -> TrajectoryLog:
    if arm == "no_latency":
        ctrl, schedule = BaseController(bm), LatencySchedule.zero()
    elif arm == "bm_delayed":
        ctrl = BaseController(bm)
    elif arm == "plm":
        ctrl = PlmController(bm, tapm)
    else:
        raise ValueError(f"unknown arm {arm!r}")
    log = run_episode(track, ctrl, schedule, cfg.dt, evaluation_duration(cfg, track), cfg.speed)
    if arm == "plm":
        log.clamp_events = ctrl.events.count
    return log


def _plot_csvs(out: Path, logs: dict) -> list[Path]:
    ref = logs["no_latency"]
    n = max(len(l) for l in logs.values())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "delta_sched", *ARMS])
    for i in range(n):
        row = [repr(i * ref.dt)]
        plm = logs["plm"]
        row.append(repr(plm.delta_sched[i]) if i < len(plm) else "")
        row += [repr(logs[a].action[i]) if i < len(logs[a]) else "" for a in ARMS]
        w.writerow(row)
    steering = out / "plots" / "steering.csv"
    write_atomic(steering, buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "t", "x", "y"])
    for a in ARMS:
        for t, x, y in zip(logs[a].t, logs[a].x, logs[a].y):
            w.writerow([a, repr(t), repr(x), repr(y)])
    paths = out / "plots" / "paths.csv"
    write_atomic(paths, buf.getvalue())
    return [steering, paths]


def evaluate_schedule(cfg: RunConfig, track: Track, bm, tapm, schedule: LatencySchedule,
                      reference: TrajectoryLog | None = None) -> tuple[dict, dict, float]:
    """Runs the arms for one schedule; returns ``(report, logs, seconds)``."""
    t0 = time.perf_counter()
    logs = {"no_latency": reference if reference is not None else run_arm("no_latency", track, bm, tapm,
                                                                         schedule, cfg)}
    for arm in ("bm_delayed", "plm"):
        logs[arm] = run_arm(arm, track, bm, tapm, schedule, cfg)
    seconds = time.perf_counter() - t0
    report = compare_runs(logs["no_latency"], logs["bm_delayed"], logs["plm"], track, cfg.centerline_ds,
                          cfg.resample_points, cfg.pcm_offsets, cfg.dtsi_window)
    report["schedule"] = schedule.to_dict()
    report["label"] = schedule.label()
    report["track"] = track.name
    report["plm_clamp_events"] = logs["plm"].clamp_events
    report["max_abs_offset"] = {a: float(np.max(np.abs(l.lateral_offset))) if len(l) else None
                                for a, l in logs.items()}
    report["lane_departure"] = {a: bool(v is not None and v > track.lane_width / 2)
                                for a, v in report["max_abs_offset"].items()}
    return report, logs, seconds


def write_schedule_outputs(out: Path, report: dict, logs: dict) -> list[Path]:
    files = []
    for arm, name in ARM_FILES.items():
        write_atomic(out / name, logs[arm].to_csv())
        files.append(out / name)
    write_json(out / "report.json", report)
    title = f"{report['track']}  schedule {report['label']}"
    write_atomic(out / "report.txt", format_steering_table(report, title) + "\n\n"
                 + format_trajectory_table(report) + "\n")
    files += [out / "report.json", out / "report.txt"]
    files += _plot_csvs(out, logs)
    return files


def centerline_csv(track: Track, ds: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["s", "x", "y"])
    for p in track.sample(ds):
        w.writerow([repr(p.s), repr(p.x), repr(p.y)])
    return buf.getvalue()


def evaluate(cfg: RunConfig, log=print) -> tuple[dict, dict]:
    """Runs every configured schedule. Returns ``(reports by label, timing)``."""
    root = Path(cfg.out)
    echo_config(cfg, root)
    bm, tapm = load_models(cfg)
    track = load_track(cfg.track)
    t0 = time.perf_counter()
    reference = run_arm("no_latency", track, bm, tapm, LatencySchedule.zero(), cfg)
    ref_seconds = time.perf_counter() - t0
    files = []
    center = root / "eval" / "centerline.csv"
    write_atomic(center, centerline_csv(track, cfg.centerline_ds))
    files.append(center)
    reports, timing = {}, {}
    for schedule in cfg.latency_schedules():
        report, logs, seconds = evaluate_schedule(cfg, track, bm, tapm, schedule, reference)
        seconds += ref_seconds  # the shared reference run belongs to every schedule's three arms
        label = schedule.label()
        files += write_schedule_outputs(Layout(root).eval_dir(label), report, logs)
        reports[label] = report
        timing[label] = seconds
        log(format_steering_table(report, f"schedule {label}"))
        for arm, flag in report["flags"].items():
            if flag["off_track"]:
                log(f"  warning: arm {arm} left the track")
    update_manifest(root, "evaluate", files)
    return reports, timing


def any_off_track(reports: dict) -> bool:
    return any(f["off_track"] for r in reports.values() for f in r["flags"].values())


# -- reproduce --------------------------------------------------------------

def _summary_rows(reports: dict) -> list[dict]:
    rows = []
    for label, rep in reports.items():
        for seg, arms in rep["trajectory"].items():
            for arm, metrics in arms.items():
                row = {"schedule": label, "arm": arm, "segment": seg}
                if seg == "full":
                    row.update({f"steering_{k}": v for k, v in rep["steering"].get(arm, {}).items()})
                row.update(metrics or {})
                rows.append(row)
    return rows


def _summary_text(reports: dict, criteria: list) -> str:
    tables = []
    for label, rep in reports.items():
        tables.append(format_steering_table(rep, f"schedule {label}"))
        tables.append(format_trajectory_table(rep))
    lines = "\n".join(c.line() for c in criteria)
    return "\n\n".join(tables) + "\n\nacceptance\n" + lines + "\n"


def reproduce(cfg: RunConfig, log=print, quick_checks: bool = True) -> tuple[list, dict]:
    """collect, train, evaluate, then score every acceptance criterion.

    Returns ``(criteria, timing)``. Criterion 10 is checked inside the run by
    re-collecting the dataset and re-evaluating one schedule from the saved
    checkpoints and comparing bytes; a full second run is left to the caller.
    """
    from . import acceptance as acc

    root = Path(cfg.out)
    lay = Layout(root)
    timing = {}
    t0 = time.perf_counter()
    collect(cfg, log)
    timing["collect"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    train_summary = train(cfg, log)
    timing["train"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    reports, arm_timing = evaluate(cfg, log)
    timing["evaluate"] = time.perf_counter() - t0
    timing["arms"] = arm_timing

    criteria = [
        acc.check_constant_latency(reports, arm_timing),
        acc.check_time_variant(reports),
        acc.check_trajectory(reports),
        acc.check_bm_gate(train_summary, reports),
    ]
    t0 = time.perf_counter()
    if quick_checks:
        bm, tapm = load_models(cfg)
        criteria.append(acc.check_interpolation(seed=cfg.seed, bm=bm, tapm=tapm))
    criteria.append(acc.check_frozen_hash(train_summary))
    if quick_checks:
        criteria += [acc.check_gradients(seed=cfg.seed), acc.check_metric_oracles(seed=cfg.seed),
                     acc.check_latency_plumbing(seed=cfg.seed, dt=cfg.dt)]
    criteria.append(_determinism_check(cfg, reports))
    timing["checks"] = time.perf_counter() - t0
    timing["total"] = timing["collect"] + timing["train"] + timing["evaluate"] + timing["checks"]

    write_json(root / "summary.json", {"rows": _summary_rows(reports),
                                       "acceptance": [c.to_dict() for c in criteria]})
    write_atomic(root / "summary.txt", _summary_text(reports, criteria))
    write_json(root / "timing.json", timing)
    update_manifest(root, "reproduce", [root / "summary.json", root / "summary.txt"])
    for c in criteria:
        log(c.line())
    log(f"total {timing['total']:.0f} s")
    return criteria, timing


def _determinism_check(cfg: RunConfig, reports: dict):
    from .acceptance import Criterion, const_label

    lay = Layout(Path(cfg.out))
    track = load_track(cfg.train_track)
    jitter = Jitter(cfg.jitter_offset, cfg.jitter_heading, cfg.jitter_speed, True,
                    cfg.action_noise, cfg.noise_hold)
    again = collect_dataset(track, ExpertController(), cfg.episodes, cfg.dt, cfg.episode_duration,
                            jitter, cfg.seed, cfg.speed).to_csv()
    same_data = again.encode() == lay.dataset.read_bytes()
    label = const_label(0.2) if const_label(0.2) in reports else next(iter(reports))
    schedule = next(s for s in cfg.latency_schedules() if s.label() == label)
    bm, tapm = load_models(cfg)
    report, _, _ = evaluate_schedule(cfg, load_track(cfg.track), bm, tapm, schedule)
    same_report = dumps(report).encode() == (lay.eval_dir(label) / "report.json").read_bytes()
    return Criterion(10, "determinism", same_data and same_report,
                     f"re-collected dataset {'identical' if same_data else 'differs'}; "
                     f"re-evaluated {label} report {'identical' if same_report else 'differs'}")
