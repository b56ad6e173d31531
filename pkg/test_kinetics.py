#!/usr/bin/env python3
"""Forward model: AIF interpolation, exact box convolution, physics residual."""

import os
import sys

import numpy as np
from scipy.integrate import trapezoid

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from services.kinetics import (
    ResidueModel,
    TimeSeries,
    VoxelParams,
    derive_cbf,
    derive_tmax,
    endpoint_difference,
    gamma_variate,
    physics_residual,
    tissue_curve_box,
    tissue_curves_box,
)
from testkit import expect_error, run_tests

TIMES = np.arange(60, dtype=np.float64)


def _aif(extension="zero"):
    return TimeSeries(TIMES, gamma_variate(TIMES, 5.0, 5.0, 3.0, 1.5), extension=extension)


def test_gamma_variate_zero_before_arrival():
    values = gamma_variate(TIMES, 5.0, 5.0, 3.0, 1.5)
    assert np.all(values[:6] == 0.0)
    assert abs(TIMES[values.argmax()] - 9.5) <= 0.5


def test_timeseries_interpolation_and_extensions():
    series = TimeSeries([0.0, 1.0, 2.0], [0.0, 2.0, 4.0])
    np.testing.assert_allclose(series([0.5, 1.5]), [1.0, 3.0])
    assert series(-0.5) == 0.0
    assert series(3.0) == 0.0
    assert TimeSeries([0.0, 1.0, 2.0], [0.0, 2.0, 4.0], extension="hold")(3.0) == 4.0


def test_timeseries_rejects_bad_input():
    expect_error("invalid-series", TimeSeries, [0.0, 0.0, 1.0], [1.0, 2.0, 3.0])
    expect_error("invalid-series", TimeSeries, [0.0, 1.0], [1.0, np.nan])
    expect_error("invalid-series", lambda: TimeSeries([0.0, 1.0, 3.0], [0.0, 1.0, 2.0]).dt)


def test_integral_matches_fine_quadrature():
    aif = _aif()
    for t in (0.0, 3.3, 7.5, 20.25, 59.0, 70.0):
        grid = np.linspace(-1.0, t, 200001)
        expected = trapezoid(aif(grid), grid)
        np.testing.assert_allclose(aif.integral(t), expected, rtol=1e-6, atol=1e-9)


def test_hold_extension_integrates_last_value():
    series = TimeSeries([0.0, 1.0], [1.0, 1.0], extension="hold")
    np.testing.assert_allclose(series.integral(3.0), 3.0)
    assert TimeSeries([0.0, 1.0], [1.0, 1.0]).integral(3.0) == 1.0


def test_tissue_curve_matches_riemann_oracle():
    rng = np.random.default_rng(7)
    aif = _aif()
    for _ in range(200):
        params = VoxelParams(cbv=rng.uniform(0.5, 6.0), mtt=rng.uniform(1.0, 12.0), delay=rng.uniform(0.0, 8.0))
        t = rng.uniform(0.0, 59.0)
        upper, lower = max(0.0, t - params.delay), max(0.0, t - params.delay - params.mtt)
        grid = np.linspace(lower, upper, 20001)
        oracle = params.cbf_rate * trapezoid(aif(grid), grid)
        np.testing.assert_allclose(tissue_curve_box(aif, params, t), oracle, rtol=1e-4, atol=1e-9)


def test_vectorized_curves_agree_with_scalar():
    aif = _aif()
    params = VoxelParams(cbv=3.0, mtt=6.0, delay=2.5)
    batch = tissue_curves_box(aif, [3.0, 1.0], [6.0, 4.0], [2.5, 0.0], TIMES)
    np.testing.assert_allclose(batch[0], tissue_curve_box(aif, params, TIMES))
    assert batch.shape == (2, TIMES.size)


def test_zero_cbv_gives_zero_curve():
    assert np.all(tissue_curve_box(_aif(), VoxelParams(0.0, 4.0, 1.0), TIMES) == 0.0)


def test_residual_vanishes_on_exact_curve():
    aif = _aif()
    params = VoxelParams(cbv=4.0, mtt=3.5, delay=1.25)
    t = np.array([10.6, 14.3, 20.3, 33.7])
    h = 1e-4
    dcdt = (tissue_curve_box(aif, params, t + h) - tissue_curve_box(aif, params, t - h)) / (2 * h)
    np.testing.assert_allclose(physics_residual(dcdt, aif, params, t), 0.0, atol=1e-6)
    np.testing.assert_allclose(dcdt, endpoint_difference(aif, params.cbf_rate, params.delay, params.mtt, t), rtol=1e-6)


def test_voxel_params_domain():
    expect_error("invalid-params", VoxelParams, -1.0, 4.0, 1.0)
    expect_error("invalid-params", VoxelParams, 1.0, 0.0, 1.0)
    expect_error("invalid-params", VoxelParams, 1.0, 4.0, np.inf)
    expect_error("invalid-params", derive_cbf, -1.0, 4.0)
    params = VoxelParams(4.0, 4.0, 1.0)
    np.testing.assert_allclose(params.cbf, 60.0 * 4.0 / 4.001)
    assert params.tmax == 3.0
    assert derive_tmax(1.0, 4.0) == 3.0


def test_box_residue_support():
    residue = ResidueModel(support=4.0)
    np.testing.assert_array_equal(residue([-0.1, 0.0, 2.0, 4.0, 4.1]), [0.0, 1.0, 1.0, 1.0, 0.0])


if __name__ == "__main__":
    run_tests(dict(globals()))
