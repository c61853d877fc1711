"""Dice and HD95 over the whole-tumour, tumour-core and enhancing-tumour composites."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError

DEFAULT_HD95_PENALTY = 373.13


@dataclass(frozen=True)
class RegionSpec:
    name: str
    classes: frozenset


REGIONS = {
    "WT": RegionSpec("WT", frozenset({1, 2, 3})),
    "TC": RegionSpec("TC", frozenset({1, 3})),
    "ET": RegionSpec("ET", frozenset({3})),
}
REGION_ORDER = ("WT", "TC", "ET")


def region_mask(labels: np.ndarray, region) -> np.ndarray:
    spec = REGIONS[region] if isinstance(region, str) else region
    return np.isin(np.asarray(labels), sorted(spec.classes))


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def dice(pred, truth) -> float:
    """``2TP / (2TP + FP + FN)``; 1.0 when both masks are empty."""
    pred, truth = _check_pair(pred, truth)
    tp = np.count_nonzero(pred & truth)
    fp = np.count_nonzero(pred & ~truth)
    fn = np.count_nonzero(~pred & truth)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def hd95(pred, truth, spacing=(1.0, 1.0, 1.0), penalty: float = DEFAULT_HD95_PENALTY) -> float:
    """95th percentile of the pooled directed nearest-voxel distances in both directions.

    Both masks empty gives 0; exactly one empty gives ``penalty``.
    """
    pred, truth = _check_pair(pred, truth)
    has_p, has_t = pred.any(), truth.any()
    if not has_p and not has_t:
        return 0.0
    if not (has_p and has_t):
        return float(penalty)
    to_truth = ndimage.distance_transform_edt(~truth, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~pred, sampling=spacing)
    dists = np.concatenate([to_truth[pred], to_pred[truth]])
    return float(np.percentile(dists, 95))


@dataclass
class CaseReport:
    case_id: str
    dice: dict
    hd95: dict
    flags: list = field(default_factory=list)

    def row(self) -> list:
        return ([self.case_id] + [self.dice[r] for r in REGION_ORDER]
                + [self.hd95[r] for r in REGION_ORDER] + [";".join(self.flags)])


def evaluate_case(pred: np.ndarray, truth: np.ndarray, spacing=(1.0, 1.0, 1.0),
                  penalty: float = DEFAULT_HD95_PENALTY, case_id: str = "") -> CaseReport:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    d, h, flags = {}, {}, []
    for name in REGION_ORDER:
        p, t = region_mask(pred, name), region_mask(truth, name)
        d[name] = dice(p, t)
        h[name] = hd95(p, t, spacing, penalty)
        if not p.any() and not t.any():
            flags.append(f"{name}:both_empty")
        elif not p.any() or not t.any():
            flags.append(f"{name}:one_empty")
    return CaseReport(case_id, d, h, flags)


def missing_case_report(case_id: str, penalty: float = DEFAULT_HD95_PENALTY) -> CaseReport:
    return CaseReport(case_id, {r: 0.0 for r in REGION_ORDER}, {r: float(penalty) for r in REGION_ORDER},
                      ["missing_prediction"])


COLUMNS = [f"dice_{r}" for r in REGION_ORDER] + [f"hd95_{r}" for r in REGION_ORDER]


def aggregate(reports: Sequence[CaseReport]) -> dict:
    """Mean and median per metric column."""
    table = np.array([r.row()[1:7] for r in reports], dtype=np.float64).reshape(-1, 6)
    return {"mean": dict(zip(COLUMNS, table.mean(axis=0).tolist())),
            "median": dict(zip(COLUMNS, np.median(table, axis=0).tolist()))}


def write_report(path, reports: Sequence[CaseReport]) -> dict:
    """Per-case CSV rows followed by mean and median summary rows."""
    summary = aggregate(reports)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id"] + COLUMNS + ["flags"])
        for r in reports:
            w.writerow([r.case_id] + [f"{x:.6f}" for x in r.row()[1:7]] + [r.row()[7]])
        for stat in ("mean", "median"):
            w.writerow([f"#{stat}"] + [f"{summary[stat][c]:.6f}" for c in COLUMNS] + [""])
    return summary


def read_report(path) -> tuple[list[dict], dict]:
    rows, summary = [], {}
    with open(Path(path), newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["case_id"].startswith("#"):
                summary[rec["case_id"][1:]] = {c: float(rec[c]) for c in COLUMNS}
            else:
                rows.append({"case_id": rec["case_id"], **{c: float(rec[c]) for c in COLUMNS},
                             "flags": rec["flags"]})
    return rows, summary
