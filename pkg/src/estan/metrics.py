"""Area and boundary segmentation metrics, tumor size and size stratification.

Area metrics follow the BUS benchmark convention of normalising false
positives by the ground-truth area, so FPR (and AER) can exceed 1:

    TPR = |A & G| / |G|          FPR = |A - G| / |G|
    JI  = |A & G| / |A | G|      DSC = 2 |A & G| / (|A| + |G|)
    AER = (|A - G| + |G - A|) / |G|

Boundary metrics work on 4-connected boundary pixels with Euclidean
distances between pixel centres.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.distance import pdist

from .errors import ShapeError, UndefinedMetricError, ValidationError

SIZE_GROUPS = ("0-100", "100-120", "120-160", "160+")
SIZE_CUTS = (100.0, 120.0, 160.0)
METRIC_NAMES = ("tpr", "fpr", "ji", "dsc", "aer", "he", "mae")


def as_binary_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError("mask must be binary (0/1)")
    return arr.astype(bool)


def binarize(prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """``1`` where ``prob >= threshold`` (inclusive), as uint8 of the same shape."""
    return (np.asarray(prob_map) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class ConfusionAreas:
    tp: int
    fp: int
    fn: int
    tn: int


def confusion(pred, gt) -> ConfusionAreas:
    a, g = as_binary_mask(pred), as_binary_mask(gt)
    if a.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {g.shape}")
    tp = int(np.count_nonzero(a & g))
    fp = int(np.count_nonzero(a & ~g))
    fn = int(np.count_nonzero(~a & g))
    return ConfusionAreas(tp, fp, fn, a.size - tp - fp - fn)


def jaccard_index(pred, gt) -> float:
    c = confusion(pred, gt)
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def dice_coefficient(pred, gt) -> float:
    c = confusion(pred, gt)
    total = 2 * c.tp + c.fp + c.fn
    return 1.0 if total == 0 else 2 * c.tp / total


class AreaMetrics(NamedTuple):
    tpr: float
    fpr: float
    ji: float
    dsc: float
    aer: float


def area_metrics(pred, gt) -> AreaMetrics:
    c = confusion(pred, gt)
    g = c.tp + c.fn
    if g == 0:
        raise UndefinedMetricError("TPR/FPR/AER are undefined for an empty ground truth")
    return AreaMetrics(
        tpr=c.tp / g,
        fpr=c.fp / g,
        ji=c.tp / (c.tp + c.fp + c.fn),
        dsc=2 * c.tp / (2 * c.tp + c.fp + c.fn),
        aer=(c.fp + c.fn) / g,
    )


def boundary_extract(mask) -> np.ndarray:
    """(row, col) of foreground pixels with a background or off-grid 4-neighbour.

    Returned as an int array of shape (k, 2) in row-major order.
    """
    m = as_binary_mask(mask)
    if m.ndim != 2:
        raise ShapeError(f"boundary extraction needs a 2-D mask, got {m.shape}")
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return np.argwhere(m & ~interior)


def _nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def _check_boundaries(b1, b2):
    b1 = np.asarray(b1, dtype=np.float64).reshape(-1, 2)
    b2 = np.asarray(b2, dtype=np.float64).reshape(-1, 2)
    if len(b1) == 0 or len(b2) == 0:
        raise UndefinedMetricError("boundary metrics are undefined for an empty boundary")
    return b1, b2


def hausdorff_error(b1, b2) -> float:
    b1, b2 = _check_boundaries(b1, b2)
    return float(max(_nearest_distances(b1, b2).max(), _nearest_distances(b2, b1).max()))


def mean_abs_boundary_error(b1, b2) -> float:
    b1, b2 = _check_boundaries(b1, b2)
    total = _nearest_distances(b1, b2).sum() + _nearest_distances(b2, b1).sum()
    return float(total / (len(b1) + len(b2)))


def tumor_longest_axis(mask) -> float:
    """Diameter of the foreground pixel-centre set (0 for a single pixel)."""
    pts = np.argwhere(as_binary_mask(mask)).astype(np.float64)
    if len(pts) == 0:
        raise UndefinedMetricError("tumor size is undefined for an empty mask")
    if len(pts) == 1:
        return 0.0
    # the diameter is attained between convex hull vertices
    rows, cols = pts[:, 0], pts[:, 1]
    if np.ptp(rows) > 0 and np.ptp(cols) > 0:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # collinear sets make qhull fail; fall through
            pass
    return float(pdist(pts).max())


def size_group(tumor_size: float) -> str:
    """Half-open bins [0,100), [100,120), [120,160), [160, inf)."""
    return SIZE_GROUPS[int(np.searchsorted(SIZE_CUTS, tumor_size, side="right"))]


@dataclass
class MetricsReport:
    image_id: str
    tpr: float | None = None
    fpr: float | None = None
    ji: float | None = None
    dsc: float | None = None
    aer: float | None = None
    he: float | None = None
    mae: float | None = None
    tumor_size: float | None = None
    size_group: str | None = None
    flags: list = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.flags)


def evaluate_image(image_id: str, pred, gt, original_gt=None) -> MetricsReport:
    """All seven metrics for one prediction; undefined values are flagged, not zeroed."""
    report = MetricsReport(image_id)
    pred, gt = as_binary_mask(pred), as_binary_mask(gt)
    report.ji = jaccard_index(pred, gt)
    report.dsc = dice_coefficient(pred, gt)
    try:
        area = area_metrics(pred, gt)
        report.tpr, report.fpr, report.aer = area.tpr, area.fpr, area.aer
    except UndefinedMetricError as exc:
        report.flags.append(f"area: {exc}")
    try:
        b_pred, b_gt = boundary_extract(pred), boundary_extract(gt)
        report.he = hausdorff_error(b_pred, b_gt)
        report.mae = mean_abs_boundary_error(b_pred, b_gt)
    except UndefinedMetricError as exc:
        report.flags.append(f"boundary: {exc}")
    try:
        report.tumor_size = tumor_longest_axis(gt if original_gt is None else original_gt)
        report.size_group = size_group(report.tumor_size)
    except UndefinedMetricError as exc:
        report.flags.append(f"size: {exc}")
    return report


@dataclass
class GroupSummary:
    group: str
    count: int
    means: dict | None  # metric name -> mean over defined values; None when empty


def stratify(reports) -> "dict[str, GroupSummary]":
    """Per size group counts and metric means, in group order."""
    buckets = {g: [] for g in SIZE_GROUPS}
    for r in reports:
        if r.tumor_size is None:
            raise ValidationError(f"report {r.image_id} has no tumor size")
        buckets[size_group(r.tumor_size)].append(r)
    out = {}
    for g, rs in buckets.items():
        means = None
        if rs:
            means = {}
            for m in METRIC_NAMES:
                vals = [getattr(r, m) for r in rs if getattr(r, m) is not None]
                means[m] = float(np.mean(vals)) if vals else None
        out[g] = GroupSummary(g, len(rs), means)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", *METRIC_NAMES, "tumor_size", "group", "flags"])
    for r in reports:
        w.writerow(
            [r.image_id, *(_fmt(getattr(r, m)) for m in METRIC_NAMES), _fmt(r.tumor_size), r.size_group or "", "; ".join(r.flags)]
        )
    return buf.getvalue()


def groups_to_csv(groups) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "count", *METRIC_NAMES])
    for g in groups.values():
        means = g.means or {}
        w.writerow([g.group, g.count, *(_fmt(means.get(m)) for m in METRIC_NAMES)])
    return buf.getvalue()
