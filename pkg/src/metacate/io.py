"""File formats: dataset/task CSVs, manifests, and report serialization.

All writers are deterministic: floats are rendered with repr (shortest
round-trip form), JSON keys are sorted, and nothing embeds timestamps, so
identical inputs yield byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from typing import Iterable

import numpy as np
from numpy.typing import NDArray

from .errors import DataError, MissingInputError
from .synthgen import GroundTruth
from .tasks import SPLIT_NAMES, Sample

DATASET_BASE_COLS = ["sample_id", "task_id", "treated", "y", "tau_true"]


def _fmt(v) -> str:
    return repr(float(v))


def write_dataset_csv(path, samples: list[Sample], d: int) -> None:
    """Write samples; the tau_pseudo column appears once any sample has one."""
    include_pseudo = any(s.tau_pseudo is not None for s in samples)
    cols = list(DATASET_BASE_COLS)
    if include_pseudo:
        cols.append("tau_pseudo")
    cols += [f"x_{i}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for s in samples:
            if s.x.shape != (d,):
                raise DataError(f"sample {s.sample_id} has x of shape {s.x.shape}, expected ({d},)")
            row = [
                s.sample_id,
                "" if s.task_id is None else str(s.task_id),
                "1" if s.treated else "0",
                _fmt(s.y),
                "" if s.tau_true is None else _fmt(s.tau_true),
            ]
            if include_pseudo:
                row.append("" if s.tau_pseudo is None else _fmt(s.tau_pseudo))
            row += [_fmt(v) for v in s.x]
            writer.writerow(row)


def read_dataset_csv(path) -> list[Sample]:
    if not os.path.exists(path):
        raise MissingInputError(f"dataset not found: {path}")
    samples: list[Sample] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[: len(DATASET_BASE_COLS)] != DATASET_BASE_COLS:
            raise DataError(f"{path} does not have the expected dataset header")
        has_pseudo = len(header) > 5 and header[5] == "tau_pseudo"
        x_start = 6 if has_pseudo else 5
        d = len(header) - x_start
        if d < 1 or header[x_start] != "x_0":
            raise DataError(f"{path} has no covariate columns")
        for row in reader:
            samples.append(
                Sample(
                    sample_id=row[0],
                    x=np.array([float(v) for v in row[x_start:]]),
                    y=float(row[3]),
                    treated=row[2] == "1",
                    task_id=int(row[1]) if row[1] else None,
                    tau_true=float(row[4]) if row[4] else None,
                    tau_pseudo=float(row[5]) if has_pseudo and row[5] else None,
                )
            )
    if not samples:
        raise DataError(f"{path} contains no samples")
    return samples


def write_tasks_csv(path, interventions: NDArray[np.float64]) -> None:
    """Sidecar file: one row per task with its intervention vector."""
    arr = np.asarray(interventions, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"interventions must be 2-d, got shape {arr.shape}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id"] + [f"w_{i}" for i in range(arr.shape[1])])
        for j in range(arr.shape[0]):
            writer.writerow([str(j)] + [_fmt(v) for v in arr[j]])


def read_tasks_csv(path) -> NDArray[np.float64]:
    if not os.path.exists(path):
        raise MissingInputError(f"task file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "task_id":
            raise DataError(f"{path} does not have the expected task header")
        for row in reader:
            if int(row[0]) != len(rows):
                raise DataError(f"{path} task ids must be consecutive from 0")
            rows.append([float(v) for v in row[1:]])
    if not rows:
        raise DataError(f"{path} contains no tasks")
    return np.asarray(rows, dtype=np.float64)


def write_ground_truth(path, gt: GroundTruth) -> None:
    with open(path, "w") as fh:
        fh.write(gt.to_json())


def read_ground_truth(path) -> GroundTruth:
    if not os.path.exists(path):
        raise MissingInputError(f"ground truth not found: {path}")
    with open(path) as fh:
        return GroundTruth.from_json(fh.read())


def write_split_manifest(path, split_of: dict[int, str]) -> None:
    payload = {str(k): v for k, v in split_of.items()}
    for v in payload.values():
        if v not in SPLIT_NAMES:
            raise DataError(f"unknown split name {v!r}")
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)


def read_split_manifest(path) -> dict[int, str]:
    if not os.path.exists(path):
        raise MissingInputError(f"split manifest not found: {path}")
    with open(path) as fh:
        raw = json.load(fh)
    return {int(k): v for k, v in raw.items()}


def config_hash(config: dict) -> str:
    """Hash of the canonical config JSON; out_dir does not affect identity."""
    trimmed = {k: v for k, v in config.items() if k != "out_dir"}
    blob = json.dumps(trimmed, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_manifest(path, config: dict, files: Iterable[str]) -> None:
    payload = {
        "schema": 1,
        "config": config,
        "config_hash": config_hash(config),
        "files": sorted(files),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)


def read_manifest(path) -> dict:
    if not os.path.exists(path):
        raise MissingInputError(f"manifest not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def write_report_csv(path, rows: list[tuple]) -> None:
    """Flat metric rows: task_id,metric,u,value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "metric", "u", "value"])
        for task_id, metric, u, value in rows:
            writer.writerow([str(task_id), metric, "" if u == "" else _fmt(u), _fmt(value)])


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
