# services/metrics.py
"""
Оценка качества: NMAE по ROI, эмпирическое покрытие интервалов неопределённости,
детекция ядра инфаркта по порогу CBF.
"""

from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional

import numpy as np
import pandas as pd

from db.models import BRAIN_ROIS, MAP_NAMES, GroundTruth, PerfusionMaps, RoiLabel
from services.errors import PerfusionError
from services.phantom import CORE_CBF_THRESHOLD

TAU_CASE = 0.1
NMAE_COLUMNS = ["case", "method", "param", "roi", "nmae", "n"]
COVERAGE_COLUMNS = ["case", "method", "k", "mode", "coverage", "n"]
DETECTION_COLUMNS = [
    "case", "method", "sensitivity", "detected", "tp", "fn", "false_positives", "excluded",
]


@dataclass
class RoiStats:
    roi: str
    param: str
    nmae: float
    n: int


@dataclass
class DetectionResult:
    sensitivity: float
    detected: bool
    tp: int
    fn: int
    false_positives: int = 0
    excluded: bool = False


def nmae(est, gt, roi) -> float:
    """mean |est - gt| / mean gt over the ROI."""
    roi = np.asarray(roi, dtype=bool)
    if not roi.any():
        raise PerfusionError("empty-roi", "ROI has no voxels")
    est_v = np.asarray(est, dtype=np.float64)[roi]
    gt_v = np.asarray(gt, dtype=np.float64)[roi]
    gt_mean = gt_v.mean()
    if gt_mean <= 0:
        raise PerfusionError("degenerate-roi", f"ground-truth ROI mean is {gt_mean}")
    return float(np.abs(est_v - gt_v).mean() / gt_mean)


def coverage(residuals, sigmas, k: float) -> float:
    """Fraction of samples with |r| <= k * sigma."""
    r = np.abs(np.asarray(residuals, dtype=np.float64).ravel())
    s = np.asarray(sigmas, dtype=np.float64).ravel()
    if r.size == 0:
        raise PerfusionError("no-samples", "coverage needs at least one residual")
    if s.size != r.size:
        raise PerfusionError("invalid-params", f"{r.size} residuals vs {s.size} sigmas")
    return float(np.mean(r <= k * s))


def per_voxel_coverage(residuals, sigmas, k: float) -> float:
    """residuals (N, T) per voxel against voxel sigma (N,): time-RMS residual vs k * sigma."""
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.size == 0:
        raise PerfusionError("no-samples", "coverage needs at least one voxel")
    rms = np.sqrt(np.mean(residuals**2, axis=-1))
    return coverage(rms, sigmas, k)


def detect_core(
    cbf_map,
    core_mask_gt,
    brain_mask=None,
    threshold: float = CORE_CBF_THRESHOLD,
    tau_case: float = TAU_CASE,
    reference_mask=None,
) -> DetectionResult:
    """Predicted core = {cbf < threshold} within the brain; sensitivity over the gt core."""
    cbf_map = np.asarray(cbf_map, dtype=np.float64)
    core = np.asarray(core_mask_gt, dtype=bool)
    if cbf_map.shape != core.shape:
        raise PerfusionError("invalid-params", f"shape mismatch {cbf_map.shape} vs {core.shape}")
    brain = np.ones_like(core) if brain_mask is None else np.asarray(brain_mask, dtype=bool)
    predicted = (cbf_map < threshold) & brain
    false_positives = 0
    if reference_mask is not None:
        false_positives = int(np.sum(predicted & np.asarray(reference_mask, dtype=bool)))
    if not core.any():
        return DetectionResult(sensitivity=0.0, detected=False, tp=0, fn=0, false_positives=false_positives, excluded=True)
    tp = int(np.sum(predicted & core))
    fn = int(np.sum(~predicted & core))
    sensitivity = tp / (tp + fn)
    return DetectionResult(
        sensitivity=sensitivity, detected=sensitivity >= tau_case, tp=tp, fn=fn, false_positives=false_positives
    )


def roi_nmae_stats(pred: PerfusionMaps, truth: GroundTruth, params: Iterable[str] = MAP_NAMES) -> List[RoiStats]:
    gt_maps = truth.maps.as_dict()
    est_maps = pred.as_dict()
    rows = []
    for param in params:
        for label in BRAIN_ROIS:
            roi = truth.roi_mask(label)
            if not roi.any():
                continue
            rows.append(RoiStats(roi=label.short, param=param, nmae=nmae(est_maps[param], gt_maps[param], roi), n=int(roi.sum())))
    return rows


def nmae_table(pred: PerfusionMaps, truth: GroundTruth, case_id: str, method: str) -> pd.DataFrame:
    rows = [{"case": case_id, "method": method, **asdict(s)} for s in roi_nmae_stats(pred, truth)]
    return pd.DataFrame(rows, columns=NMAE_COLUMNS)


def detection_row(pred: PerfusionMaps, truth: GroundTruth, case_id: str, method: str) -> dict:
    brain = truth.roi_labels != int(RoiLabel.BACKGROUND)
    result = detect_core(
        pred.cbf, truth.lesion_mask, brain_mask=brain, reference_mask=truth.roi_mask(RoiLabel.HEALTHY_GM)
    )
    return {"case": case_id, "method": method, **asdict(result)}


def detection_table(rows: List[dict]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=DETECTION_COLUMNS)


def cohort_detection(detections: pd.DataFrame) -> pd.DataFrame:
    """detected / total per method, excluded cases left out of the total."""
    included = detections[~detections["excluded"].astype(bool)]
    summary = included.groupby("method").agg(
        detected=("detected", "sum"),
        total=("detected", "size"),
        mean_sensitivity=("sensitivity", "mean"),
        false_positives=("false_positives", "sum"),
    )
    summary["detected"] = summary["detected"].astype(int)
    return summary.reset_index()


def coverage_rows(case_id: str, method: str, residuals, sigmas, voxel_residuals=None, voxel_sigmas=None, ks=(1.0, 2.0)) -> List[dict]:
    rows = []
    for k in ks:
        rows.append({"case": case_id, "method": method, "k": k, "mode": "sample",
                     "coverage": coverage(residuals, sigmas, k), "n": int(np.size(residuals))})
        if voxel_residuals is not None:
            rows.append({"case": case_id, "method": method, "k": k, "mode": "voxel",
                         "coverage": per_voxel_coverage(voxel_residuals, voxel_sigmas, k),
                         "n": int(np.shape(voxel_residuals)[0])})
    return rows


def coverage_table(rows: List[dict], case_id: Optional[str] = None) -> pd.DataFrame:
    table = pd.DataFrame(rows, columns=COVERAGE_COLUMNS)
    if case_id is not None:
        table["case"] = case_id
    return table
