# db/models.py
"""Контейнеры данных кейса и результатов (то, что хранится на диске в db/case_store.py)."""

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from services.errors import PerfusionError
from services.kinetics import TimeSeries, derive_cbf, derive_tmax

MAP_NAMES = ("cbf", "cbv", "mtt", "delay", "tmax")
UNCERTAINTY_NAMES = ("ale", "epi", "total")
MAP_UNITS = {
    "cbf": "ml/100g/min",
    "cbv": "ml/100g",
    "mtt": "s",
    "delay": "s",
    "tmax": "s",
}


class RoiLabel(IntEnum):
    BACKGROUND = 0
    HEALTHY_GM = 1
    HEALTHY_WM = 2
    GMR = 3
    GMSR = 4
    WMR = 5
    WMSR = 6

    @property
    def short(self) -> str:
        return {
            RoiLabel.BACKGROUND: "Background",
            RoiLabel.HEALTHY_GM: "HealthyGM",
            RoiLabel.HEALTHY_WM: "HealthyWM",
            RoiLabel.GMR: "GMR",
            RoiLabel.GMSR: "GMSR",
            RoiLabel.WMR: "WMR",
            RoiLabel.WMSR: "WMSR",
        }[self]


BRAIN_ROIS = tuple(label for label in RoiLabel if label != RoiLabel.BACKGROUND)


@dataclass
class PerfusionMaps:
    """Воксельные карты (Z, Y, X) float32; cbf и tmax всегда производные."""
    cbv: np.ndarray
    mtt: np.ndarray
    delay: np.ndarray
    cbf: np.ndarray
    tmax: np.ndarray

    @classmethod
    def from_primary(cls, cbv, mtt, delay) -> "PerfusionMaps":
        cbv = np.asarray(cbv, dtype=np.float32)
        mtt = np.asarray(mtt, dtype=np.float32)
        delay = np.asarray(delay, dtype=np.float32)
        cbf = np.asarray(derive_cbf(cbv, mtt), dtype=np.float32)
        tmax = np.asarray(derive_tmax(delay, mtt), dtype=np.float32)
        return cls(cbv=cbv, mtt=mtt, delay=delay, cbf=cbf, tmax=tmax)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in MAP_NAMES}

    def validate(self):
        for name, grid in self.as_dict().items():
            if not np.all(np.isfinite(grid)):
                raise PerfusionError("train-diverged", f"non-finite values in {name} map")
        if np.any(self.cbv < 0) or np.any(self.mtt <= 0) or np.any(self.delay < 0):
            raise PerfusionError("invalid-params", "maps violate cbv>=0, mtt>0, delay>=0")
        return self


@dataclass
class NigField:
    """Эвиденциальные параметры NIG и разложение неопределённости по вокселям."""
    alpha: np.ndarray
    beta: np.ndarray
    nu: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray

    def uncertainty_dict(self) -> Dict[str, np.ndarray]:
        return {"ale": self.aleatoric, "epi": self.epistemic, "total": self.total}


@dataclass
class GroundTruth:
    cbv: np.ndarray
    mtt: np.ndarray
    delay: np.ndarray
    roi_labels: np.ndarray
    lesion_mask: np.ndarray

    @property
    def maps(self) -> PerfusionMaps:
        return PerfusionMaps.from_primary(self.cbv, self.mtt, self.delay)

    @property
    def cbf(self) -> np.ndarray:
        return self.maps.cbf

    def roi_mask(self, label: RoiLabel) -> np.ndarray:
        return self.roi_labels == int(label)


@dataclass
class CaseBundle:
    """4D CTP кейс: tissue (T, Z, Y, X), AIF (T,), времена кадров и геометрия."""
    tissue: np.ndarray
    aif: np.ndarray
    times: np.ndarray
    spacing: tuple
    brain_mask: Optional[np.ndarray] = None
    ground_truth: Optional[GroundTruth] = None
    seed: Optional[int] = None
    provenance: Dict[str, Any] = field(default_factory=dict)
    units: Dict[str, str] = field(default_factory=lambda: {"concentration": "a.u.", "time": "s", "spacing": "mm"})

    def __post_init__(self):
        self.tissue = np.asarray(self.tissue, dtype=np.float32)
        self.aif = np.asarray(self.aif, dtype=np.float32)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.tissue.ndim != 4:
            raise PerfusionError("invalid-bundle", f"tissue must be (T, Z, Y, X), got {self.tissue.shape}")
        if self.aif.shape != (self.tissue.shape[0],) or self.times.shape != self.aif.shape:
            raise PerfusionError("invalid-bundle", "aif/times length must equal number of frames")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise PerfusionError("invalid-bundle", f"invalid voxel spacing {self.spacing}")
        if not np.all(np.diff(self.times) > 0):
            raise PerfusionError("invalid-bundle", "frame times must be strictly increasing")
        if self.brain_mask is None:
            self.brain_mask = np.ones(self.tissue.shape[1:], dtype=bool)
        self.brain_mask = np.asarray(self.brain_mask, dtype=bool)

    @property
    def case_id(self) -> str:
        return str(self.provenance.get("case_id", "case"))

    @property
    def dims(self) -> tuple:
        """(X, Y, Z, T), как в манифесте."""
        t, z, y, x = self.tissue.shape
        return (x, y, z, t)

    @property
    def grid_shape(self) -> tuple:
        return self.tissue.shape[1:]

    @property
    def dt(self) -> float:
        return self.aif_series().dt

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0] + self.dt)

    @property
    def fov(self) -> np.ndarray:
        """Физическое поле зрения (x, y, z) в мм."""
        x, y, z, _ = self.dims
        return np.array([x, y, z], dtype=np.float64) * np.array(self.spacing)

    def aif_series(self, extension: str = "zero") -> TimeSeries:
        return TimeSeries(self.times, self.aif, extension=extension)

    def voxel_curve(self, z: int, y: int, x: int) -> np.ndarray:
        return self.tissue[:, z, y, x]

    def brain_curves(self) -> np.ndarray:
        """(T, N) кривые вокселей мозга в порядке np.nonzero(brain_mask)."""
        return self.tissue[:, self.brain_mask]


@dataclass
class ResultBundle:
    method: str
    maps: PerfusionMaps
    nig: Optional[NigField] = None
    trace: Optional[pd.DataFrame] = None
    metrics: Optional[pd.DataFrame] = None
    coverage: Optional[pd.DataFrame] = None
    resolved_config: Dict[str, Any] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
