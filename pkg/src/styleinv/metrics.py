"""Overlap and boundary-distance metrics for LV / MYO / RV masks.

Distances are 2D, in pixels, computed slice by slice on 4-connected
boundaries, then averaged per case and over cases.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

STRUCTURES = ("LV", "MYO", "RV")
STRUCTURE_LABELS = {"LV": 1, "MYO": 2, "RV": 3}
METRICS = ("Dice", "Jac", "HDB", "ASSD")
ROW_BLOCKS = ("AVG",) + STRUCTURES

_CROSS = ndimage.generate_binary_structure(2, 1)


class EmptyMaskError(ValueError):
    """A distance metric was requested for an empty mask."""


def dice_jaccard(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = int(np.count_nonzero(pred & gt))
    total = int(np.count_nonzero(pred)) + int(np.count_nonzero(gt))
    if total == 0:
        return 1.0, 1.0
    union = total - inter
    return 2.0 * inter / total, inter / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """(K, 2) row/col coordinates of mask pixels with a 4-neighbour outside the mask.

    Pixels on the image border count as boundary.
    """
    m = np.asarray(mask, bool)
    interior = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return np.argwhere(m & ~interior)


def _boundaries(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        raise EmptyMaskError("distance metrics need two non-empty masks")
    return boundary(pred), boundary(gt)


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(b).query(a, k=1)
    return np.asarray(d, dtype=np.float64)


def hdb(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric Hausdorff distance between the two boundary point sets."""
    a, b = _boundaries(pred, gt)
    return float(max(_nearest(a, b).max(), _nearest(b, a).max()))


def assd(pred: np.ndarray, gt: np.ndarray) -> float:
    """Average symmetric surface distance between the two boundaries."""
    a, b = _boundaries(pred, gt)
    return float((_nearest(a, b).sum() + _nearest(b, a).sum()) / (len(a) + len(b)))


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class SliceScores:
    dice: float
    jaccard: float
    hdb: Optional[float]
    assd: Optional[float]
    missing: bool  # exactly one of pred / gt empty


def score_slice(pred: np.ndarray, gt: np.ndarray) -> SliceScores:
    d, j = dice_jaccard(pred, gt)
    p_any, g_any = bool(np.any(pred)), bool(np.any(gt))
    if p_any and g_any:
        return SliceScores(d, j, hdb(pred, gt), assd(pred, gt), False)
    if p_any != g_any:
        return SliceScores(0.0, 0.0, None, None, True)
    return SliceScores(d, j, None, None, False)


def _nanmean(values: Sequence[float]) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def score_case(pred: np.ndarray, gt: np.ndarray) -> Tuple[Dict[str, Dict[str, float]], Dict[str, int]]:
    """Slice-averaged metrics per structure for one (S, H, W) case."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape:
        raise ValueError(f"case shapes differ: {pred.shape} vs {gt.shape}")
    out: Dict[str, Dict[str, float]] = {}
    missing: Dict[str, int] = {}
    for name in STRUCTURES:
        lab = STRUCTURE_LABELS[name]
        scores = [score_slice(p == lab, g == lab) for p, g in zip(pred, gt)]
        out[name] = {
            "Dice": 100.0 * _nanmean([s.dice for s in scores]),
            "Jac": 100.0 * _nanmean([s.jaccard for s in scores]),
            "HDB": _nanmean([s.hdb for s in scores]),
            "ASSD": _nanmean([s.assd for s in scores]),
        }
        missing[name] = sum(s.missing for s in scores)
    return out, missing


@dataclass
class MetricsReport:
    """Per-structure and AVG values for one vendor (Dice/Jac in percent, distances in pixels)."""

    vendor: str
    values: Dict[str, Dict[str, float]]
    n_cases: int
    missing: Dict[str, int] = field(default_factory=dict)
    per_case: List[Dict[str, Dict[str, float]]] = field(default_factory=list)

    def get(self, metric: str, structure: str = "AVG") -> float:
        return self.values[structure][metric]

    @property
    def dice_avg(self) -> float:
        return self.values["AVG"]["Dice"]


def evaluate_cases(
    preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], vendor: str = "all"
) -> MetricsReport:
    """Average case-level metrics over paired cases; AVG row is the mean of LV/MYO/RV."""
    if len(preds) != len(gts):
        raise ValueError(f"unpaired cases: {len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("no cases to evaluate")
    per_case, missing = [], {s: 0 for s in STRUCTURES}
    for p, g in zip(preds, gts):
        vals, miss = score_case(p, g)
        per_case.append(vals)
        for s in STRUCTURES:
            missing[s] += miss[s]
    values: Dict[str, Dict[str, float]] = {}
    for s in STRUCTURES:
        values[s] = {m: _nanmean([c[s][m] for c in per_case]) for m in METRICS}
    values["AVG"] = {m: _nanmean([values[s][m] for s in STRUCTURES]) for m in METRICS}
    return MetricsReport(vendor, values, len(preds), missing, per_case)


def case_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Dice (percent) over the three structures for one case."""
    vals, _ = score_case(pred, gt)
    return float(np.mean([vals[s]["Dice"] for s in STRUCTURES]))


# ---------------------------------------------------------------------------
# CSV: metric,structure,vendor,value


CSV_HEADER = ("metric", "structure", "vendor", "value")


def report_rows(reports: Iterable[MetricsReport]) -> List[Tuple[str, str, str, str]]:
    reports = list(reports)
    rows = []
    for block in ROW_BLOCKS:
        for metric in METRICS:
            for rep in reports:
                v = rep.values[block][metric]
                rows.append((metric, block, rep.vendor, "nan" if math.isnan(v) else f"{v:.2f}"))
    return rows


def reports_to_csv(reports: Iterable[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(report_rows(reports))
    return buf.getvalue()


def write_csv(path, reports: Iterable[MetricsReport]) -> None:
    with open(path, "w", newline="") as f:
        f.write(reports_to_csv(reports))


def read_csv(path) -> Dict[Tuple[str, str, str], float]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return {(m, s, v): float(val) for m, s, v, val in r}
