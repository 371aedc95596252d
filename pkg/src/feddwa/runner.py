"""Experiment execution and report emission.

Writes per-round metrics.csv, a summary.json, optional per-round weight
matrices, and a partition manifest. All files go through a temp-file +
rename so an interrupted run never leaves a truncated artifact. Output
paths default to $FEDDWA_OUT (or ./runs) with a config-digest directory
name, so identical configs land in identical locations.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

from . import datagen, fedcore
from .config import RunConfig, apply_sweep_value
from .errors import FedDwaError
from .numkit import Rng

OUTPUT_ROOT_ENV = "FEDDWA_OUT"


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(path) or "."
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def config_digest(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:8]


def resolve_out_dir(config: RunConfig, suffix: str = "") -> str:
    if config.out is not None:
        return config.out
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return os.path.join(root, f"{config.method}_seed{config.seed}_{config_digest(config)}{suffix}")


def _fmt(value: float) -> str:
    return repr(float(value))


@dataclass
class RunOutputs:
    out_dir: str
    reports: list[fedcore.RoundReport]
    summary: dict


def _write_metrics(path: str, reports):
    lines = ["round,client,accuracy,uplink_bytes,downlink_bytes"]
    for report in reports:
        for client_id, acc in enumerate(report.per_client_accuracy):
            lines.append(
                f"{report.round_index},{client_id},{_fmt(acc)},"
                f"{report.per_client_uplink[client_id]},"
                f"{report.per_client_downlink[client_id]}"
            )
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_weights(out_dir: str, reports):
    for report in reports:
        if report.weights is None:
            continue
        rows = [",".join(_fmt(v) for v in row) for row in report.weights.entries]
        _atomic_write(os.path.join(out_dir, f"weights_{report.round_index}.csv"),
                      "\n".join(rows) + "\n")


def build_summary(config: RunConfig, reports) -> dict:
    uplink = sum(r.uplink_bytes for r in reports)
    downlink = sum(r.downlink_bytes for r in reports)
    summary = {
        "method": config.method,
        "seed": config.seed,
        "clients": config.clients,
        "rounds": config.rounds,
        "traffic_multiplier": fedcore.TRAFFIC_MULTIPLIER[config.method],
        "total_uplink_bytes": uplink,
        "total_downlink_bytes": downlink,
        "total_traffic_bytes": uplink + downlink,
        "server_flops": sum(r.server_flops for r in reports),
        "best_mean_accuracy": None,
        "best_round": None,
        "final_mean_accuracy": None,
    }
    if reports:
        best = max(reports, key=lambda r: (r.mean_accuracy, -r.round_index))
        summary["best_mean_accuracy"] = best.mean_accuracy
        summary["best_round"] = best.round_index
        summary["final_mean_accuracy"] = reports[-1].mean_accuracy
    return summary


def run_experiment(config: RunConfig, out_dir: str | None = None) -> RunOutputs:
    """Run one experiment and write metrics.csv / summary.json / weights."""
    out_dir = out_dir or resolve_out_dir(config)
    os.makedirs(out_dir, exist_ok=True)
    fed = config.build_data(Rng(config.seed))
    reports = fedcore.run(config, fed)
    summary = build_summary(config, reports)
    _write_metrics(os.path.join(out_dir, "metrics.csv"), reports)
    _atomic_write(os.path.join(out_dir, "summary.json"),
                  json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _atomic_write(os.path.join(out_dir, "manifest.txt"), datagen.format_manifest(fed))
    if config.export_weights:
        _write_weights(out_dir, reports)
    return RunOutputs(out_dir, reports, summary)


def run_sweep(config: RunConfig, axis: str, values, out_dir: str | None = None):
    """One run per axis value; failures are recorded per row and the sweep continues."""
    out_dir = out_dir or resolve_out_dir(config, suffix="_sweep")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for value in values:
        row = {
            "axis": axis,
            "value": value,
            "status": "ok",
            "best_mean_accuracy": None,
            "best_round": None,
            "total_traffic_bytes": None,
            "seed": config.seed,
            "error": None,
        }
        try:
            cfg = apply_sweep_value(config, axis, value)
            sub_dir = os.path.join(out_dir, f"{axis}_{value}")
            outputs = run_experiment(cfg, out_dir=sub_dir)
            row["best_mean_accuracy"] = outputs.summary["best_mean_accuracy"]
            row["best_round"] = outputs.summary["best_round"]
            row["total_traffic_bytes"] = outputs.summary["total_traffic_bytes"]
        except FedDwaError as err:
            row["status"] = "failed"
            row["error"] = str(err)
        rows.append(row)
    lines = ["axis,value,status,best_mean_accuracy,best_round,total_traffic_bytes,seed,error"]
    for row in rows:
        acc = "" if row["best_mean_accuracy"] is None else _fmt(row["best_mean_accuracy"])
        best_round = "" if row["best_round"] is None else str(row["best_round"])
        traffic = "" if row["total_traffic_bytes"] is None else str(row["total_traffic_bytes"])
        error = (row["error"] or "").replace(",", ";").replace("\n", " ")
        lines.append(
            f"{row['axis']},{row['value']},{row['status']},{acc},{best_round},"
            f"{traffic},{row['seed']},{error}"
        )
    _atomic_write(os.path.join(out_dir, "sweep.csv"), "\n".join(lines) + "\n")
    return rows, out_dir
