"""
Image-quality metrics for voxsynth: MAE, PSNR, global SSIM, ROI variants and
cross-subject aggregation.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError, ShapeError
from volume_io import Volume

logger = logging.getLogger(__name__)

DEFAULT_ROI_NAMES = {
    1: "Hippocampus",
    2: "Para Hippocampus",
    3: "Posterior Cingulate",
    4: "Precuneus",
    5: "Anterior Cingulate",
    6: "Orbito Frontal",
}
REPORT_COLUMNS = ("subject", "mae", "psnr", "ssim")


def _pair(x: Volume, y: Volume, mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    if x.dims != y.dims:
        raise ShapeError(f"volumes differ in dims: {x.dims} vs {y.dims}")
    a = x.data.astype(np.float64)
    b = y.data.astype(np.float64)
    if mask is None:
        return a.ravel(), b.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.dims:
        raise ShapeError(f"mask {mask.shape} does not match volume dims {x.dims}")
    if not mask.any():
        raise DataError("mask selects no voxels")
    return a[mask], b[mask]


def mae(x: Volume, y: Volume, mask: Optional[np.ndarray] = None) -> float:
    a, b = _pair(x, y, mask)
    return float(np.abs(a - b).mean())


def psnr(x: Volume, y: Volume, max_intensity: float = 1.0, mask: Optional[np.ndarray] = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    a, b = _pair(x, y, mask)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_intensity ** 2 / mse)


def ssim_global(x: Volume, y: Volume, c1: float = 1e-4, c2: float = 9e-4,
                mask: Optional[np.ndarray] = None) -> float:
    """
    SSIM from whole-volume statistics.

    Uses the product of the luminance and the contrast-structure terms, with
    population variances and covariance. Identical volumes give exactly 1.
    With a mask the statistics come from the masked voxels only.
    """
    a, b = _pair(x, y, mask)
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b = (da * da).mean(), (db * db).mean()
    cov = (da * db).mean()
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(numerator / denominator)


@dataclass
class RoiRecord:
    roi_id: int
    name: str
    voxels: int
    mae: float
    psnr: float


def roi_metrics(x: Volume, y: Volume, labels: np.ndarray, roi_ids: Optional[Sequence[int]] = None,
                names: Optional[Dict[int, str]] = None, max_intensity: float = 1.0) -> List[RoiRecord]:
    """MAE and PSNR inside each labelled region, in the order requested."""
    labels = np.asarray(labels)
    if labels.shape != x.dims:
        raise ShapeError(f"label volume {labels.shape} does not match volume dims {x.dims}")
    names = names or DEFAULT_ROI_NAMES
    roi_ids = list(roi_ids) if roi_ids is not None else sorted(names)
    table = []
    for roi_id in roi_ids:
        region = labels == roi_id
        if not region.any():
            raise DataError(f"ROI {roi_id} ({names.get(roi_id, 'unnamed')}) has no voxels in the label volume")
        table.append(RoiRecord(int(roi_id), names.get(roi_id, f"ROI {roi_id}"), int(region.sum()),
                               mae(x, y, region), psnr(x, y, max_intensity, region)))
    return table


def aggregate_folds(values: Sequence[float]) -> Tuple[float, Optional[float]]:
    """Mean and sample standard deviation; the deviation is None below two values."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise DataError("nothing to aggregate")
    mean = float(data.mean())
    if data.size < 2:
        return mean, None
    return mean, float(data.std(ddof=1))


def _finite_only(values: Sequence[float], what: str) -> List[float]:
    kept = [v for v in values if math.isfinite(v)]
    if len(kept) != len(values):
        logger.warning("%d infinite %s value(s) excluded from aggregation", len(values) - len(kept), what)
    return kept


def format_mean_std(mean: float, std: Optional[float], digits: int = 4) -> str:
    if std is None:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


@dataclass
class SubjectRecord:
    subject: str
    mae: float
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    method: str
    records: List[SubjectRecord] = field(default_factory=list)
    roi_table: List[RoiRecord] = field(default_factory=list)

    def aggregate(self, metric: str) -> Optional[Tuple[float, Optional[float]]]:
        values = [getattr(r, metric) for r in self.records]
        if metric == "psnr":
            values = _finite_only(values, "PSNR")
        if not values:
            return None
        return aggregate_folds(values)

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.records:
            lines.append(f"{r.subject},{r.mae!r},{r.psnr!r},{r.ssim!r}")
        return "\n".join(lines) + "\n"

    def roi_csv(self) -> str:
        lines = ["roi_id,name,voxels,mae,psnr"]
        lines += [f"{r.roi_id},{r.name},{r.voxels},{r.mae!r},{r.psnr!r}" for r in self.roi_table]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [f"method: {self.method}", f"subjects: {len(self.records)}"]
        for metric in ("ssim", "mae", "psnr"):
            agg = self.aggregate(metric)
            lines.append(f"{metric}: {format_mean_std(*agg) if agg else 'n/a'}")
        infinite = sum(1 for r in self.records if math.isinf(r.psnr))
        if infinite:
            lines.append(f"psnr: {infinite} subject(s) identical to target (infinite PSNR, excluded)")
        return "\n".join(lines) + "\n"


def evaluate_subjects(method: str,
                      items: Sequence[Tuple[str, Volume, Volume, Optional[np.ndarray]]],
                      max_intensity: float = 1.0,
                      c1: float = 1e-4,
                      c2: float = 9e-4,
                      workers: int = 1) -> MetricsReport:
    """Score (subject, prediction, target, mask) items; records keep the input order."""
    def score(item) -> SubjectRecord:
        subject, pred, target, mask = item
        return SubjectRecord(subject, mae(pred, target, mask), psnr(pred, target, max_intensity, mask),
                             ssim_global(pred, target, c1, c2, mask))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(score, items))
    else:
        records = [score(item) for item in items]
    return MetricsReport(method, records)


def comparison_table(reports: Sequence[MetricsReport]) -> str:
    """One row per method: SSIM, MAE and PSNR as mean ± std."""
    lines = ["method,ssim,mae,psnr"]
    for report in reports:
        cells = []
        for metric in ("ssim", "mae", "psnr"):
            agg = report.aggregate(metric)
            cells.append(format_mean_std(*agg) if agg else "n/a")
        lines.append(",".join([report.method] + cells))
    return "\n".join(lines) + "\n"
