"""Region composition and the two reported metrics: Dice overlap and the
95th-percentile symmetric Hausdorff surface distance in millimeters.

Regions follow the standard composition: the whole tumor is every lesion
class, the core drops the edema, and the enhancing region is the
enhancing class alone, so they nest by construction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .data import LABEL_CORE, LABEL_EDEMA, LABEL_ENHANCING, Volume

REGIONS = ("WT", "TC", "ET")


@dataclass
class RegionMask:
    region: str
    voxels: np.ndarray  # binary (D, H, W)
    spacing: tuple = (1.0, 1.0, 1.0)


def region_masks(labels: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    """Decompose a label volume into nested WT / TC / ET masks."""
    labels = np.asarray(labels)
    wt = labels > 0
    tc = (labels == LABEL_CORE) | (labels == LABEL_ENHANCING)
    et = labels == LABEL_ENHANCING
    return (RegionMask("WT", wt, spacing), RegionMask("TC", tc, spacing),
            RegionMask("ET", et, spacing))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); both masks empty scores 1.0, exactly one empty
    scores 0.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbor outside the mask (voxels on
    the array border count as boundary)."""
    mask = np.asarray(mask, dtype=bool)
    interior = mask.copy()
    for axis in range(3):
        for shift in (1, -1):
            neighbor = np.zeros_like(mask)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[axis] = slice(1, None)
                dst[axis] = slice(None, -1)
            else:
                src[axis] = slice(None, -1)
                dst[axis] = slice(1, None)
            neighbor[tuple(dst)] = mask[tuple(src)]
            interior &= neighbor
    return mask & ~interior


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)
         ) -> Optional[float]:
    """Symmetric 95th-percentile boundary distance in mm, linear percentile
    interpolation. Returns None when either mask is empty (reported as a
    missing value, never folded into aggregates)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return None
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary_voxels(a)) * sp
    pb = np.argwhere(boundary_voxels(b)) * sp
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


@dataclass
class SubjectScores:
    subject: str
    region: str
    dice: float
    hd95: Optional[float]


@dataclass
class MetricsReport:
    per_subject: list
    aggregates: dict

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject", "region", "dice", "hd95"])
            for row in self.per_subject:
                hd = "" if row.hd95 is None else row.hd95
                writer.writerow([row.subject, row.region, row.dice, hd])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.aggregates, fh, indent=2, sort_keys=True)


def _aggregate(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "median": float(np.percentile(arr, 50)),
        "q25": float(np.percentile(arr, 25)),
        "q75": float(np.percentile(arr, 75)),
        "n": int(arr.size),
    }


def evaluate(predictions, truths) -> MetricsReport:
    """Per-subject Dice and HD95 for each region plus aggregate statistics
    (mean, std, median, 25/75 quantiles).

    predictions/truths: matched lists of Volumes (labels are compared;
    spacing is taken from the truth volume). Subjects are matched by id.
    """
    pred_by_id = {v.subject_id: v for v in predictions}
    truth_by_id = {v.subject_id: v for v in truths}
    if set(pred_by_id) != set(truth_by_id):
        raise ValueError(
            f"subject mismatch: {sorted(set(pred_by_id) ^ set(truth_by_id))}")
    rows = []
    for subject in sorted(truth_by_id):
        pred = pred_by_id[subject]
        truth = truth_by_id[subject]
        if pred.labels.shape != truth.labels.shape:
            raise ValueError(f"extent mismatch for subject {subject!r}")
        pred_regions = region_masks(pred.labels, truth.spacing)
        truth_regions = region_masks(truth.labels, truth.spacing)
        for pr, tr in zip(pred_regions, truth_regions):
            rows.append(SubjectScores(
                subject, pr.region,
                dice(pr.voxels, tr.voxels),
                hd95(pr.voxels, tr.voxels, truth.spacing)))
    aggregates = {}
    for region in REGIONS:
        region_rows = [r for r in rows if r.region == region]
        dices = [r.dice for r in region_rows]
        hds = [r.hd95 for r in region_rows if r.hd95 is not None]
        missing = sum(1 for r in region_rows if r.hd95 is None)
        aggregates[region] = {
            "dice": _aggregate(dices),
            "hd95": (_aggregate(hds) if hds else None),
            "hd95_missing": missing,
        }
    return MetricsReport(rows, aggregates)
