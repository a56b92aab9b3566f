"""Binary segmentation metrics: overlap scores and surface distances (mm).

Conventions:

* surface voxel: foreground with at least one background 6-neighbour
  (outside the volume counts as background);
* HD95 uses the nearest-rank 95th percentile of each directed distance set;
* both masks empty gives 1 for every overlap score, one empty gives 0;
  surface distances refuse empty masks.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy.spatial import cKDTree


class EmptyMaskError(ValueError):
    pass


def as_mask(m) -> np.ndarray:
    m = np.asarray(m.data if hasattr(m, "data") and not isinstance(m, np.ndarray) else m)
    if m.dtype != bool and not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    return m.astype(bool)


def _pair(pred, gt):
    pred, gt = as_mask(pred), as_mask(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def confusion_counts(pred, gt) -> tuple[int, int, int]:
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def _frac(num: int, den: int) -> Fraction:
    return Fraction(0) if den == 0 else Fraction(num, den)


def overlap_metrics(pred, gt) -> dict[str, float]:
    """Dice, IoU, recall, precision and F2, each the correctly rounded exact ratio."""
    tp, fp, fn = confusion_counts(pred, gt)
    if tp + fp + fn == 0:
        return dict(dice=1.0, iou=1.0, recall=1.0, precision=1.0, f2=1.0)
    recall = _frac(tp, tp + fn)
    precision = _frac(tp, tp + fp)
    f2 = Fraction(0) if recall == 0 else 5 * precision * recall / (4 * precision + recall)
    return dict(
        dice=float(Fraction(2 * tp, 2 * tp + fp + fn)),
        iou=float(Fraction(tp, tp + fp + fn)),
        recall=float(recall),
        precision=float(precision),
        f2=float(f2),
    )


def surface_extract(mask) -> np.ndarray:
    """Integer coordinates ``[n, 3]`` of surface voxels, in C order."""
    m = as_mask(mask)
    p = np.pad(m, 1, constant_values=False)
    core = p[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & ~interior)


def _scaled(points: np.ndarray, spacing) -> np.ndarray:
    return points.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one fixed formula shared with the brute-force oracle
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def directed_surface_distances(src: np.ndarray, dst: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """For each point of ``src`` the distance to its nearest point of ``dst`` (mm)."""
    a, b = _scaled(src, spacing), _scaled(dst, spacing)
    if len(a) == 0:
        return np.zeros(0)
    tree = cKDTree(b)
    d0, _ = tree.query(a, k=1)
    # re-evaluate every candidate within a hair of the tree's answer with the
    # shared formula, so the result matches an exhaustive search bit for bit
    radius = d0 * (1 + 1e-9) + 1e-12
    out = np.empty(len(a))
    for i, cand in enumerate(tree.query_ball_point(a, radius)):
        out[i] = _dist(a[i], b[np.asarray(cand, dtype=np.intp)]).min()
    return out


def _surfaces(pred, gt):
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        raise EmptyMaskError("surface distance undefined for an empty mask")
    return surface_extract(pred), surface_extract(gt)


def nearest_rank_percentile(values: np.ndarray, q: int = 95) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, (q * len(v) + 99) // 100)  # ceil(q/100 * n), in integers
    return float(v[rank - 1])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    sp, sg = _surfaces(pred, gt)
    return max(nearest_rank_percentile(directed_surface_distances(sp, sg, spacing)),
               nearest_rank_percentile(directed_surface_distances(sg, sp, spacing)))


def assd(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    sp, sg = _surfaces(pred, gt)
    d1 = directed_surface_distances(sp, sg, spacing)
    d2 = directed_surface_distances(sg, sp, spacing)
    return math.fsum(np.concatenate([d1, d2])) / (len(d1) + len(d2))


# --------------------------------------------------------------------------
# Reports


@dataclass
class CaseReport:
    case_id: str
    dice: float
    iou: float
    recall: float
    precision: float
    f2: float
    hd95_mm: float | None
    assd_mm: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


REPORT_COLUMNS = ["case_id", "dice", "iou", "recall", "precision", "f2", "hd95_mm", "assd_mm"]


def evaluate_case(pred, gt, spacing=(1.0, 1.0, 1.0), case_id: str = "case") -> CaseReport:
    """All seven metrics; distance fields are ``None`` when a mask is empty."""
    ov = overlap_metrics(pred, gt)
    try:
        h, a = hd95(pred, gt, spacing), assd(pred, gt, spacing)
    except EmptyMaskError:
        h = a = None
    return CaseReport(case_id, hd95_mm=h, assd_mm=a, **ov)


def reports_to_csv(reports, fh=None) -> str:
    buf = fh or io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})
    return buf.getvalue() if fh is None else ""
