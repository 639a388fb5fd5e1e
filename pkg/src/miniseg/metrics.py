"""Segmentation metrics on binary masks (foreground = infected)."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np
from scipy import ndimage

FOUR_CONN = ndimage.generate_binary_structure(2, 1)
EIGHT_CONN = ndimage.generate_binary_structure(2, 2)

METRIC_FIELDS = ("mIoU", "SEN", "SPC", "DSC", "HD", "infected_area", "lesion_count")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class SliceReport:
    mIoU: float
    SEN: float
    SPC: float
    DSC: float
    HD: float
    infected_area: float
    lesion_count: int


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values 0/1)")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in extent")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    # empty denominator means nothing to get wrong
    return 1.0 if den == 0 else num / den


def compute_metrics(c: ConfusionCounts) -> Dict[str, float]:
    """SEN, SPC, DSC and the two-class mean IoU.

    Empty denominators score 1 (both masks empty on that class); DSC with
    exactly one empty mask comes out as 0 from the formula.
    """
    if c.total <= 0:
        raise ValueError("confusion counts cover no pixels")
    iou_fg = _ratio(c.tp, c.tp + c.fp + c.fn)
    iou_bg = _ratio(c.tn, c.tn + c.fn + c.fp)
    return {
        "mIoU": 0.5 * (iou_fg + iou_bg),
        "SEN": _ratio(c.tp, c.tp + c.fn),
        "SPC": _ratio(c.tn, c.tn + c.fp),
        "DSC": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "IoU_fg": iou_fg,
        "IoU_bg": iou_bg,
    }


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the foreground or off-image."""
    m = _as_binary(mask, "mask")
    inner = ndimage.binary_erosion(m, structure=FOUR_CONN, border_value=0)
    return m & ~inner


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance in pixels between the two boundary sets.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    p = _as_binary(pred, "prediction")
    g = _as_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in extent")
    bp, bg = boundary(p), boundary(g)
    has_p, has_g = bp.any(), bg.any()
    if not has_p and not has_g:
        return 0.0
    if not has_p or not has_g:
        return math.hypot(*p.shape)
    # distance from every pixel to the nearest boundary pixel of the other set
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    return float(max(to_g[bp].max(), to_p[bg].max()))


def lesion_count(gt) -> int:
    _, n = ndimage.label(_as_binary(gt, "mask"), structure=EIGHT_CONN)
    return int(n)


def slice_analysis(pred, gt) -> SliceReport:
    g = _as_binary(gt, "ground truth")
    m = compute_metrics(confusion(pred, g))
    return SliceReport(
        mIoU=m["mIoU"],
        SEN=m["SEN"],
        SPC=m["SPC"],
        DSC=m["DSC"],
        HD=hausdorff(pred, g),
        infected_area=float(g.mean()),
        lesion_count=lesion_count(g),
    )


def aggregate(reports: Sequence[SliceReport]) -> Dict[str, float]:
    """Mean of each field over slices."""
    if not reports:
        return {k: float("nan") for k in METRIC_FIELDS}
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_FIELDS}


def write_metrics_csv(
    path: Union[str, Path],
    rows: Iterable[tuple],
) -> None:
    """Write per-slice rows plus per-fold aggregates and a mean/std summary.

    ``rows`` yields ``(slice_id, fold, SliceReport)``.
    """
    rows = list(rows)
    by_fold: Dict[int, List[SliceReport]] = {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("slice_id", "fold") + METRIC_FIELDS)
        for sid, fold, rep in rows:
            by_fold.setdefault(fold, []).append(rep)
            d = asdict(rep)
            w.writerow([sid, fold] + [d[k] for k in METRIC_FIELDS])
        fold_means = []
        for fold in sorted(by_fold):
            agg = aggregate(by_fold[fold])
            fold_means.append(agg)
            w.writerow([f"fold{fold}_mean", fold] + [agg[k] for k in METRIC_FIELDS])
        if fold_means:
            mean = {k: float(np.mean([f[k] for f in fold_means])) for k in METRIC_FIELDS}
            std = {k: float(np.std([f[k] for f in fold_means])) for k in METRIC_FIELDS}
            w.writerow(["all_folds_mean", ""] + [mean[k] for k in METRIC_FIELDS])
            w.writerow(["all_folds_std", ""] + [std[k] for k in METRIC_FIELDS])
