# db/case_store.py
"""
Хранение кейсов и результатов на диске: raw little-endian float32 + JSON манифест.

CaseBundle directory:
    manifest.json   dims (X, Y, Z, T), spacing, frame times, units, provenance, seed, version
    ctp.f32         tissue, row-major t-major then z, y, x
    aif.f32         T floats
    brain_mask.u8   optional
    gt/             cbv.f32 mtt.f32 delay.f32 cbf.f32 tmax.f32 lesion_mask.u8 roi_labels.u8
"""

import json
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from db.models import (
    MAP_NAMES,
    MAP_UNITS,
    UNCERTAINTY_NAMES,
    CaseBundle,
    GroundTruth,
    NigField,
    PerfusionMaps,
    ResultBundle,
)
from services.errors import PerfusionError

MANIFEST_VERSION = 1
F32 = np.dtype("<f4")
U8 = np.dtype("u1")


def prepare_output_dir(path, force: bool = False) -> Path:
    """Создаёт выходную директорию; отказывается перезаписывать непустую без force."""
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise PerfusionError("output-not-empty", f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise PerfusionError("output-not-empty", f"{path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_array(path: Path, array: np.ndarray, dtype: np.dtype):
    path.write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_array(path: Path, shape: tuple, dtype: np.dtype) -> np.ndarray:
    if not path.exists():
        raise PerfusionError("invalid-bundle", f"missing file {path.name}")
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise PerfusionError(
            "truncated-array", f"{path.name}: expected {expected} bytes for shape {shape}, found {actual}"
        )
    return np.frombuffer(path.read_bytes(), dtype=dtype).reshape(shape).copy()


def _dump_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_case(case: CaseBundle, out_dir, force: bool = False) -> Path:
    out = prepare_output_dir(out_dir, force)
    x, y, z, t = case.dims
    manifest = {
        "version": MANIFEST_VERSION,
        "dims": {"X": x, "Y": y, "Z": z, "T": t},
        "spacing_mm": list(case.spacing),
        "frame_times_s": [float(v) for v in case.times],
        "units": dict(case.units),
        "provenance": case.provenance,
        "seed": case.seed,
        "has_brain_mask": case.brain_mask is not None,
        "has_ground_truth": case.ground_truth is not None,
    }
    _dump_json(out / "manifest.json", manifest)
    _write_array(out / "ctp.f32", case.tissue, F32)
    _write_array(out / "aif.f32", case.aif, F32)
    _write_array(out / "brain_mask.u8", case.brain_mask, U8)
    if case.ground_truth is not None:
        gt_dir = out / "gt"
        gt_dir.mkdir(exist_ok=True)
        write_maps(gt_dir, case.ground_truth.maps)
        _write_array(gt_dir / "lesion_mask.u8", case.ground_truth.lesion_mask, U8)
        _write_array(gt_dir / "roi_labels.u8", case.ground_truth.roi_labels, U8)
    return out


def read_manifest(case_dir) -> dict:
    path = Path(case_dir) / "manifest.json"
    if not path.exists():
        raise PerfusionError("invalid-bundle", f"{path} not found")
    manifest = json.loads(path.read_text())
    if "version" not in manifest:
        raise PerfusionError("invalid-bundle", "manifest has no version field")
    if manifest["version"] != MANIFEST_VERSION:
        raise PerfusionError("invalid-bundle", f"unsupported manifest version {manifest['version']}")
    return manifest


def read_ground_truth(gt_dir, grid_shape: tuple) -> GroundTruth:
    gt_dir = Path(gt_dir)
    maps = read_maps(gt_dir, grid_shape)
    return GroundTruth(
        cbv=maps.cbv,
        mtt=maps.mtt,
        delay=maps.delay,
        roi_labels=_read_array(gt_dir / "roi_labels.u8", grid_shape, U8),
        lesion_mask=_read_array(gt_dir / "lesion_mask.u8", grid_shape, U8).astype(bool),
    )


def read_case(case_dir) -> CaseBundle:
    case_dir = Path(case_dir)
    manifest = read_manifest(case_dir)
    dims = manifest["dims"]
    grid_shape = (dims["Z"], dims["Y"], dims["X"])
    n_frames = dims["T"]
    times = np.asarray(manifest["frame_times_s"], dtype=np.float64)
    if times.size != n_frames:
        raise PerfusionError("invalid-bundle", f"{times.size} frame times for T={n_frames}")
    brain_mask = None
    if manifest.get("has_brain_mask"):
        brain_mask = _read_array(case_dir / "brain_mask.u8", grid_shape, U8).astype(bool)
    ground_truth = None
    if manifest.get("has_ground_truth"):
        if not (case_dir / "gt").is_dir():
            raise PerfusionError("invalid-bundle", "manifest declares ground truth but gt/ is missing")
        ground_truth = read_ground_truth(case_dir / "gt", grid_shape)
    return CaseBundle(
        tissue=_read_array(case_dir / "ctp.f32", (n_frames,) + grid_shape, F32),
        aif=_read_array(case_dir / "aif.f32", (n_frames,), F32),
        times=times,
        spacing=tuple(manifest["spacing_mm"]),
        brain_mask=brain_mask,
        ground_truth=ground_truth,
        seed=manifest.get("seed"),
        provenance=manifest.get("provenance", {}),
        units=manifest.get("units", {}),
    )


def write_maps(out_dir, maps: PerfusionMaps):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, grid in maps.as_dict().items():
        _write_array(out_dir / f"{name}.f32", grid, F32)


def read_maps(maps_dir, grid_shape: tuple) -> PerfusionMaps:
    maps_dir = Path(maps_dir)
    grids = {name: _read_array(maps_dir / f"{name}.f32", grid_shape, F32) for name in MAP_NAMES}
    return PerfusionMaps(**grids)


def write_results(result: ResultBundle, out_dir, grid_shape: tuple, force: bool = False) -> Path:
    """Пишет ResultBundle: maps/, uncertainty/, trace.csv, metrics.csv, resolved_config.json."""
    out = prepare_output_dir(out_dir, force)
    write_maps(out / "maps", result.maps)
    if result.nig is not None:
        unc_dir = out / "uncertainty"
        unc_dir.mkdir(exist_ok=True)
        for name, grid in result.nig.uncertainty_dict().items():
            _write_array(unc_dir / f"{name}.f32", grid, F32)
        for name in ("alpha", "beta", "nu"):
            _write_array(unc_dir / f"{name}.f32", getattr(result.nig, name), F32)
    if result.trace is not None:
        result.trace.to_csv(out / "trace.csv", index=False)
    if result.metrics is not None:
        result.metrics.to_csv(out / "metrics.csv", index=False)
    if result.coverage is not None:
        result.coverage.to_csv(out / "coverage.csv", index=False)
    config = dict(result.resolved_config)
    config.setdefault("method", result.method)
    _dump_json(out / "resolved_config.json", config)
    _dump_json(
        out / "result_manifest.json",
        {
            "version": MANIFEST_VERSION,
            "method": result.method,
            "grid_shape_zyx": list(grid_shape),
            "map_units": MAP_UNITS,
            "has_uncertainty": result.nig is not None,
        },
    )
    if result.summary:
        _dump_json(out / "train_summary.json", result.summary)
    return out


def read_results(result_dir) -> ResultBundle:
    result_dir = Path(result_dir)
    manifest_path = result_dir / "result_manifest.json"
    if not manifest_path.exists():
        raise PerfusionError("invalid-bundle", f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    grid_shape = tuple(manifest["grid_shape_zyx"])
    maps = read_maps(result_dir / "maps", grid_shape)
    nig: Optional[NigField] = None
    if manifest.get("has_uncertainty"):
        unc = {n: _read_array(result_dir / "uncertainty" / f"{n}.f32", grid_shape, F32) for n in UNCERTAINTY_NAMES}
        evid = {n: _read_array(result_dir / "uncertainty" / f"{n}.f32", grid_shape, F32) for n in ("alpha", "beta", "nu")}
        nig = NigField(aleatoric=unc["ale"], epistemic=unc["epi"], total=unc["total"], **evid)
    coverage = None
    if (result_dir / "coverage.csv").exists():
        coverage = pd.read_csv(result_dir / "coverage.csv")
    trace = pd.read_csv(result_dir / "trace.csv") if (result_dir / "trace.csv").exists() else None
    config_path = result_dir / "resolved_config.json"
    config = json.loads(config_path.read_text()) if config_path.exists() else {}
    return ResultBundle(
        method=manifest["method"], maps=maps, nig=nig, trace=trace, coverage=coverage, resolved_config=config
    )
