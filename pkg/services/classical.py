# services/classical.py
"""
Baseline deconvolution estimators: truncated SVD, block-circulant SVD and
box-shaped nonlinear regression (grid search + Nelder-Mead refinement).

Volume-level functions share one pseudo-inverse across voxels; the per-voxel
functions are thin wrappers used by tests and by boxNLR.
"""

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import circulant, toeplitz
from scipy.optimize import minimize

from config import DeconvConfig
from db.models import CaseBundle, PerfusionMaps
from services.errors import PerfusionError
from services.kinetics import TimeSeries, VoxelParams, tissue_curves_box
from services.logger import run_logger


@dataclass
class DeconvResult:
    params: VoxelParams
    irf: Optional[np.ndarray] = None
    flags: Tuple[str, ...] = ()
    history: List[float] = field(default_factory=list)


def _check_inputs(aif: TimeSeries, tissue: TimeSeries) -> float:
    if aif.times.shape != tissue.times.shape or not np.allclose(aif.times, tissue.times):
        raise PerfusionError("invalid-series", "aif and tissue must share the time grid")
    dt = aif.dt
    if not np.any(aif.values != 0):
        raise PerfusionError("singular-aif", "AIF is identically zero")
    return dt


def convolution_matrix(aif_values: np.ndarray, dt: float) -> np.ndarray:
    """Lower-triangular A[i, j] = dt * C_a(t_{i-j})."""
    first_row = np.zeros_like(aif_values)
    first_row[0] = aif_values[0]
    return dt * toeplitz(aif_values, first_row)


def block_circulant_matrix(aif_values: np.ndarray, dt: float, padded_length: int) -> np.ndarray:
    """D[i, j] = dt * a_pad[(i - j) mod L] for the zero-padded AIF."""
    padded = np.zeros(padded_length)
    padded[: aif_values.size] = aif_values
    return dt * circulant(padded)


def truncated_pinv(matrix: np.ndarray, truncation: float) -> np.ndarray:
    """Pseudo-inverse keeping singular values >= truncation * sigma_max."""
    u, s, vt = np.linalg.svd(matrix)
    keep = s >= truncation * s[0] if truncation > 0 else s > 0
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


def _area_cbv(aif_values: np.ndarray, curves: np.ndarray, times: np.ndarray) -> np.ndarray:
    aif_area = trapezoid(aif_values, times)
    if aif_area <= 0:
        raise PerfusionError("singular-aif", "AIF area is not positive")
    return np.clip(trapezoid(curves, times, axis=0) / aif_area, 0.0, None)


def irf_to_params(irf: np.ndarray, cbv: np.ndarray, dt: float, cfg: DeconvConfig):
    """Maps IRFs (L, N) and area CBV (N,) to (cbv, mtt, delay) arrays.

    MTT = CBV / CBF_rate; when flow vanishes MTT is capped at cfg.mtt_cap.
    Delay = Tmax - MTT/2 clamped at 0, Tmax = dt * argmax(irf).
    """
    rate = np.clip(irf.max(axis=0), 0.0, None)
    tmax = dt * np.argmax(irf, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        mtt = np.where(rate > 0, cbv / rate, cfg.mtt_cap)
    mtt = np.clip(mtt, 1e-3, cfg.mtt_cap)
    # CBV = 0 with positive flow would give mtt = 0; keep mtt > 0 and the identity via cbv
    delay = np.clip(tmax - 0.5 * mtt, 0.0, None)
    return cbv, mtt, delay


def svd_deconvolve_curves(aif_values, curves, times, cfg: DeconvConfig, truncation: Optional[float] = None):
    """Truncated-SVD deconvolution of curves (T, N); returns (irf, cbv, mtt, delay)."""
    times = np.asarray(times, dtype=np.float64)
    dt = float(times[1] - times[0])
    frac = cfg.svd_truncation if truncation is None else truncation
    pinv = truncated_pinv(convolution_matrix(np.asarray(aif_values, dtype=np.float64), dt), frac)
    irf = pinv @ np.asarray(curves, dtype=np.float64)
    cbv = _area_cbv(aif_values, curves, times)
    return (irf,) + irf_to_params(irf, cbv, dt, cfg)


def bcsvd_deconvolve_curves(aif_values, curves, times, cfg: DeconvConfig, truncation: Optional[float] = None):
    """Block-circulant SVD on zero-padded series (length padding_factor * T)."""
    times = np.asarray(times, dtype=np.float64)
    curves = np.asarray(curves, dtype=np.float64)
    dt = float(times[1] - times[0])
    n_frames = times.size
    padded_length = cfg.padding_factor * n_frames
    frac = cfg.bcsvd_truncation if truncation is None else truncation
    pinv = truncated_pinv(block_circulant_matrix(np.asarray(aif_values, dtype=np.float64), dt, padded_length), frac)
    padded = np.zeros((padded_length, curves.shape[1]))
    padded[:n_frames] = curves
    irf = pinv @ padded
    cbv = _area_cbv(aif_values, curves, times)
    return (irf,) + irf_to_params(irf, cbv, dt, cfg)


def _single(fn, aif: TimeSeries, tissue: TimeSeries, cfg: DeconvConfig, truncation) -> DeconvResult:
    _check_inputs(aif, tissue)
    irf, cbv, mtt, delay = fn(aif.values, tissue.values[:, None], aif.times, cfg, truncation)
    params = VoxelParams(cbv=float(cbv[0]), mtt=float(mtt[0]), delay=float(delay[0]))
    return DeconvResult(params=params, irf=irf[:, 0])


def svd_deconvolve(aif: TimeSeries, tissue: TimeSeries, cfg: DeconvConfig = None, truncation: Optional[float] = None) -> DeconvResult:
    return _single(svd_deconvolve_curves, aif, tissue, cfg or DeconvConfig(), truncation)


def bcsvd_deconvolve(aif: TimeSeries, tissue: TimeSeries, cfg: DeconvConfig = None, truncation: Optional[float] = None) -> DeconvResult:
    return _single(bcsvd_deconvolve_curves, aif, tissue, cfg or DeconvConfig(), truncation)


# --- boxNLR ---

def _parameter_grid(cfg: DeconvConfig):
    lo, hi, n = cfg.nlr_cbv_grid
    cbv = np.geomspace(lo, hi, int(n))
    mtt = np.linspace(*cfg.nlr_mtt_grid[:2], int(cfg.nlr_mtt_grid[2]))
    delay = np.linspace(*cfg.nlr_delay_grid[:2], int(cfg.nlr_delay_grid[2]))
    return cbv, mtt, delay


def _grid_search(aif: TimeSeries, target: np.ndarray, cfg: DeconvConfig):
    cbv_grid, mtt_grid, delay_grid = _parameter_grid(cfg)
    mtt_m, delay_m = np.meshgrid(mtt_grid, delay_grid, indexing="ij")
    # Кривые с единичным cbv: (n_mtt, n_delay, T); cbv масштабирует линейно
    shapes = tissue_curves_box(aif, 1.0, mtt_m, delay_m, aif.times)
    curves = cbv_grid[:, None, None, None] * shapes[None]
    sse = np.sum((target - curves) ** 2, axis=-1)
    i, j, k = np.unravel_index(np.argmin(sse), sse.shape)
    return np.array([cbv_grid[i], mtt_grid[j], delay_grid[k]]), float(sse[i, j, k])


def boxnlr_fit(aif: TimeSeries, tissue: TimeSeries, cfg: DeconvConfig = None) -> DeconvResult:
    """Least-squares box-model fit over theta = (cbv, mtt, delay).

    Coarse grid search, then bounded Nelder-Mead. If refinement fails to improve
    on the grid point the grid point is returned with flag 'nlr-no-refine'.
    """
    cfg = cfg or DeconvConfig()
    _check_inputs(aif, tissue)
    target = tissue.values
    bounds = [cfg.nlr_cbv_bounds, cfg.nlr_mtt_bounds, cfg.nlr_delay_bounds]

    def objective(theta):
        curve = tissue_curves_box(aif, theta[0], theta[1], theta[2], aif.times)
        return float(np.sum((target - curve) ** 2))

    theta0, sse0 = _grid_search(aif, target, cfg)
    theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
    history = [sse0]
    scale = float(np.sum(target**2)) + 1e-12
    result = minimize(
        objective,
        theta0,
        method="Nelder-Mead",
        bounds=bounds,
        callback=lambda xk: history.append(objective(xk)),
        options={"maxiter": cfg.nlr_max_iter, "xatol": 1e-6, "fatol": 1e-12 * scale},
    )
    flags: Tuple[str, ...] = ()
    refined_ok = np.all(np.isfinite(result.x)) and np.isfinite(result.fun) and result.fun <= sse0
    if not refined_ok:
        theta, flags = theta0, ("nlr-no-refine",)
    else:
        theta = result.x
        if not result.success:
            flags = ("nlr-maxiter",)
    params = VoxelParams(cbv=float(max(theta[0], 0.0)), mtt=float(theta[1]), delay=float(max(theta[2], 0.0)))
    return DeconvResult(params=params, flags=flags, history=history)


# --- volume level ---

def deconvolve_case(case: CaseBundle, method: str, cfg: DeconvConfig = None) -> Tuple[PerfusionMaps, dict]:
    """Runs a classical method over all brain voxels; background stays at (0, cap, 0)."""
    cfg = (cfg or DeconvConfig()).validate()
    started = time.perf_counter()
    aif = case.aif_series()
    # invalid-series on a non-uniform frame grid
    dt = aif.dt
    grid_shape = case.grid_shape
    cbv_map = np.zeros(grid_shape, dtype=np.float64)
    mtt_map = np.full(grid_shape, cfg.mtt_cap, dtype=np.float64)
    delay_map = np.zeros(grid_shape, dtype=np.float64)
    curves = case.brain_curves().astype(np.float64)
    if not np.any(aif.values != 0):
        raise PerfusionError("singular-aif", "AIF is identically zero")
    flag_counts: dict = {}

    if method in ("svd", "bcsvd"):
        fn = svd_deconvolve_curves if method == "svd" else bcsvd_deconvolve_curves
        _, cbv, mtt, delay = fn(aif.values, curves, aif.times, cfg)
    elif method == "boxnlr":
        cbv = np.empty(curves.shape[1])
        mtt = np.empty_like(cbv)
        delay = np.empty_like(cbv)
        for n in range(curves.shape[1]):
            fit = boxnlr_fit(aif, TimeSeries(aif.times, curves[:, n]), cfg)
            cbv[n], mtt[n], delay[n] = fit.params.cbv, fit.params.mtt, fit.params.delay
            for flag in fit.flags:
                flag_counts[flag] = flag_counts.get(flag, 0) + 1
    else:
        raise PerfusionError("invalid-config", f"unknown classical method {method!r}")

    cbv_map[case.brain_mask] = cbv
    mtt_map[case.brain_mask] = mtt
    delay_map[case.brain_mask] = delay
    maps = PerfusionMaps.from_primary(cbv_map, mtt_map, delay_map)
    elapsed = time.perf_counter() - started
    run_logger.log_info("Classical", f"{method} on {curves.shape[1]} voxels (dt={dt:g}s) in {elapsed:.2f}s", str(flag_counts or ""))
    return maps, {"method": method, "seconds": elapsed, "flags": flag_counts}
