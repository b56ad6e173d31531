# services/phantom.py
"""
Synthetic 4D CTP phantom with known ground truth.

Layout: a background ring around a rectangular brain region. The left half is
gray matter, the right half white matter; each half is cut into three bands
along y (healthy, reduced, severely reduced).
"""

import math
import re
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from db.models import CaseBundle, GroundTruth, RoiLabel
from services.errors import PerfusionError
from services.kinetics import TimeSeries, VoxelParams, derive_cbf, gamma_variate, tissue_curve_box
from services.logger import run_logger

CORE_CBF_THRESHOLD = 25.0
AIF_NOISE_FACTOR = 0.25
SWEEP_DTS = (1.0, 2.0, 3.0, 4.0)
SWEEP_PSNR_RANGE = (18.0, 27.0)

# Stand-in ROI table (cbv ml/100g, mtt s, delay s); not the published phantom values.
# HealthyWM mtt is 4.6 s so that its CBF (26.1) stays above the core threshold.
DEFAULT_ROI_TABLE: Dict[str, Tuple[float, float, float]] = {
    "HealthyGM": (4.0, 4.0, 1.0),
    "GMR": (3.0, 6.0, 2.5),
    "GMSR": (1.5, 9.0, 4.0),
    "HealthyWM": (2.0, 4.6, 1.5),
    "WMR": (1.5, 6.0, 3.0),
    "WMSR": (0.8, 9.6, 5.0),
}


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (48, 48, 4)
    spacing: Tuple[float, float, float] = (2.0, 2.0, 10.0)
    duration: float = 60.0
    dt: float = 1.0
    psnr: Optional[float] = 27.0
    seed: int = 0
    aif_peak: float = 100.0
    aif_t0: float = 5.0
    aif_shape: float = 3.0
    aif_scale: float = 1.5
    roi_table: Dict[str, Tuple[float, float, float]] = field(default_factory=lambda: dict(DEFAULT_ROI_TABLE))

    @property
    def noiseless(self) -> bool:
        return self.psnr is None or math.isinf(self.psnr)

    @property
    def aif_amplitude(self) -> float:
        """A such that the gamma-variate peak equals aif_peak."""
        a = self.aif_shape
        return self.aif_peak / (a**a * math.exp(-a))

    @property
    def frame_times(self) -> np.ndarray:
        n_frames = int(round(self.duration / self.dt))
        return np.arange(n_frames, dtype=np.float64) * self.dt

    def validate(self) -> "PhantomSpec":
        x, y, z = self.dims
        if x < 8 or y < 8 or z < 1:
            raise PerfusionError("invalid-spec", f"dims {self.dims} too small (need X, Y >= 8)")
        if x < 16 or y < 16 or z < 4:
            run_logger.log_warning("Phantom", f"dims {self.dims} below recommended 16x16x4")
        if self.dt <= 0 or self.duration <= 0 or round(self.duration / self.dt) < 2:
            raise PerfusionError("invalid-spec", f"dt={self.dt}, duration={self.duration}")
        if self.psnr is not None and math.isnan(self.psnr):
            raise PerfusionError("invalid-spec", "psnr is NaN")
        if min(self.spacing) <= 0:
            raise PerfusionError("invalid-spec", f"spacing {self.spacing}")
        missing = set(DEFAULT_ROI_TABLE) - set(self.roi_table)
        if missing:
            raise PerfusionError("invalid-spec", f"roi table misses {sorted(missing)}")
        for name, (cbv, mtt, delay) in self.roi_table.items():
            if mtt <= 0 or cbv < 0 or delay < 0:
                raise PerfusionError("invalid-spec", f"roi {name}: cbv={cbv}, mtt={mtt}, delay={delay}")
        if self.aif_scale <= 0 or self.aif_shape <= 0 or self.aif_peak <= 0:
            raise PerfusionError("invalid-spec", "aif parameters must be positive")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["psnr"] = None if self.noiseless else float(self.psnr)
        data["roi_table"] = {k: list(v) for k, v in self.roi_table.items()}
        data["dims"] = list(self.dims)
        data["spacing"] = list(self.spacing)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        data = dict(data)
        data["dims"] = tuple(data["dims"])
        data["spacing"] = tuple(data["spacing"])
        data["roi_table"] = {k: tuple(v) for k, v in data["roi_table"].items()}
        return cls(**data)


def roi_layout(dims: Tuple[int, int, int]) -> np.ndarray:
    """ROI label grid (Z, Y, X) as uint8."""
    x_dim, y_dim, z_dim = dims
    labels = np.full((z_dim, y_dim, x_dim), int(RoiLabel.BACKGROUND), dtype=np.uint8)
    border = max(1, round(min(x_dim, y_dim) / 16))
    x0, x1 = border, x_dim - border
    y0, y1 = border, y_dim - border
    x_mid = (x0 + x1) // 2
    y_cuts = np.linspace(y0, y1, 4).round().astype(int)
    bands = {
        "gm": (RoiLabel.HEALTHY_GM, RoiLabel.GMR, RoiLabel.GMSR),
        "wm": (RoiLabel.HEALTHY_WM, RoiLabel.WMR, RoiLabel.WMSR),
    }
    for side, (xa, xb) in (("gm", (x0, x_mid)), ("wm", (x_mid, x1))):
        for band, label in enumerate(bands[side]):
            labels[:, y_cuts[band]:y_cuts[band + 1], xa:xb] = int(label)
    return labels


def _voxel_rng(seed: int, stream: int) -> np.random.Generator:
    # Counter-based stream per voxel: stream 0 is the AIF, voxel i uses stream i + 1
    return np.random.Generator(np.random.Philox(key=seed).jumped(stream + 1))


def noise_sigma(max_signal: float, psnr: float) -> float:
    return max_signal / 10 ** (psnr / 20.0)


def generate(spec: PhantomSpec) -> Tuple[CaseBundle, GroundTruth]:
    """Builds a CaseBundle plus its GroundTruth from a PhantomSpec."""
    spec.validate()
    started = time.perf_counter()
    times = spec.frame_times
    aif_clean = gamma_variate(times, spec.aif_amplitude, spec.aif_t0, spec.aif_shape, spec.aif_scale)
    aif_series = TimeSeries(times, aif_clean)

    labels = roi_layout(spec.dims)
    grid_shape = labels.shape
    cbv = np.zeros(grid_shape, dtype=np.float32)
    mtt = np.ones(grid_shape, dtype=np.float32)
    delay = np.zeros(grid_shape, dtype=np.float32)
    tissue = np.zeros((times.size,) + grid_shape, dtype=np.float64)

    for label in RoiLabel:
        if label == RoiLabel.BACKGROUND:
            continue
        roi = labels == int(label)
        params = VoxelParams(*spec.roi_table[label.short])
        cbv[roi], mtt[roi], delay[roi] = params.cbv, params.mtt, params.delay
        tissue[:, roi] = tissue_curve_box(aif_series, params, times)[:, None]

    brain = labels != int(RoiLabel.BACKGROUND)
    cbf = derive_cbf(cbv, mtt)
    lesion = brain & (cbf < CORE_CBF_THRESHOLD)

    aif = aif_clean.copy()
    if not spec.noiseless:
        max_signal = float(tissue[:, brain].max())
        sigma = noise_sigma(max_signal, spec.psnr)
        aif += AIF_NOISE_FACTOR * sigma * _voxel_rng(spec.seed, 0).standard_normal(times.size)
        for flat in np.flatnonzero(brain.ravel()):
            z, y, x = np.unravel_index(flat, grid_shape)
            tissue[:, z, y, x] += sigma * _voxel_rng(spec.seed, int(flat) + 1).standard_normal(times.size)
        run_logger.log_info("Phantom", f"noise sigma={sigma:.4f} a.u. (max signal {max_signal:.2f}, PSNR {spec.psnr} dB)")

    truth = GroundTruth(cbv=cbv, mtt=mtt, delay=delay, roi_labels=labels, lesion_mask=lesion)
    psnr_tag = "inf" if spec.noiseless else f"{spec.psnr:g}"
    case = CaseBundle(
        tissue=tissue.astype(np.float32),
        aif=aif.astype(np.float32),
        times=times,
        spacing=spec.spacing,
        brain_mask=brain,
        ground_truth=truth,
        seed=spec.seed,
        provenance={
            "generator": "phantom",
            "case_id": f"phantom_psnr{psnr_tag}_dt{spec.dt:g}_seed{spec.seed}",
            "roi_table_note": "stand-in ROI parameter table",
            "spec": spec.to_dict(),
        },
    )
    run_logger.log_case_event(case.case_id, "generated", f"{time.perf_counter() - started:.2f}s, dims={case.dims}")
    return case, truth


def resample_dt(case: CaseBundle, new_dt: float, spec: Optional[PhantomSpec] = None) -> CaseBundle:
    """Keeps every k-th frame when new_dt = k * dt; otherwise regenerates from the PhantomSpec."""
    dt = case.dt
    ratio = new_dt / dt
    step = int(round(ratio))
    if step >= 1 and abs(ratio - step) < 1e-9:
        provenance = dict(case.provenance)
        provenance["resampled_from_dt"] = dt
        provenance["dt"] = new_dt
        if "case_id" in provenance:
            provenance["case_id"] = re.sub(r"_dt[^_]+_", f"_dt{new_dt:g}_", str(provenance["case_id"]), count=1)
        if "spec" in provenance:
            provenance["spec"] = {**provenance["spec"], "dt": new_dt}
        return CaseBundle(
            tissue=case.tissue[::step].copy(),
            aif=case.aif[::step].copy(),
            times=case.times[::step].copy(),
            spacing=case.spacing,
            brain_mask=case.brain_mask,
            ground_truth=case.ground_truth,
            seed=case.seed,
            provenance=provenance,
            units=dict(case.units),
        )
    if spec is None and "spec" in case.provenance:
        spec = PhantomSpec.from_dict(case.provenance["spec"])
    if spec is None:
        raise PerfusionError("resample-unsupported", f"new_dt={new_dt} is not a multiple of dt={dt}")
    run_logger.log_info("Phantom", f"regenerating case at dt={new_dt} (not a multiple of {dt})")
    return generate(replace(spec, dt=new_dt))[0]
