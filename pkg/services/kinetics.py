# services/kinetics.py
"""
Tracer-kinetic forward model with a box residue function.

All times are seconds. Concentrations are arbitrary attenuation units (a.u.).
CBF is the only quantity stored per minute; UNIT_K is the single s -> min factor.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from services.errors import PerfusionError

UNIT_K = 60.0
EPS_CBF = 1e-3


def gamma_variate(t, amplitude: float, t0: float, shape: float, scale: float):
    """Bolus model A*((t-t0)/scale)^shape * exp(-(t-t0)/scale) for t > t0, else 0."""
    t = np.asarray(t, dtype=np.float64)
    s = np.clip((t - t0) / scale, 0.0, None)
    return np.where(t > t0, amplitude * s**shape * np.exp(-s), 0.0)


class TimeSeries:
    """Sampled curve evaluable on the whole real line.

    Inside the samples the curve is piecewise linear. Before the first sample it
    is 0; past the last sample it is 0 (extension="zero") or holds the last
    value (extension="hold").
    """

    def __init__(self, times, values, extension: str = "zero"):
        times = np.asarray(times, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if times.ndim != 1 or times.shape != values.shape:
            raise PerfusionError("invalid-series", "times and values must be 1-D of equal length")
        if times.size < 2:
            raise PerfusionError("invalid-series", "at least two samples required")
        if not np.all(np.diff(times) > 0):
            raise PerfusionError("invalid-series", "times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise PerfusionError("invalid-series", "non-finite samples")
        if extension not in ("zero", "hold"):
            raise PerfusionError("invalid-series", f"unknown extension {extension!r}")
        self.times = times
        self.values = values
        self.extension = extension
        self._slopes = np.diff(values) / np.diff(times)
        # Интеграл от начала до каждого узла (точная трапеция для кусочно-линейной функции)
        self._cumulative = np.concatenate(
            [[0.0], np.cumsum(0.5 * (values[1:] + values[:-1]) * np.diff(times))]
        )

    def __len__(self):
        return self.times.size

    @property
    def dt(self) -> float:
        steps = np.diff(self.times)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise PerfusionError("invalid-series", "time grid is not uniform")
        return float(steps[0])

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        inside = np.interp(t, self.times, self.values)
        after = self.values[-1] if self.extension == "hold" else 0.0
        out = np.where(t > self.times[-1], after, inside)
        return np.where(t < self.times[0], 0.0, out)

    def integral(self, t):
        """Exact antiderivative F(t) = integral of the curve from -inf to t."""
        t = np.asarray(t, dtype=np.float64)
        last = self.times.size - 1
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, last - 1)
        tau = np.clip(t, self.times[0], self.times[-1]) - self.times[k]
        value = self._cumulative[k] + self.values[k] * tau + 0.5 * self._slopes[k] * tau**2
        if self.extension == "hold":
            value = value + self.values[-1] * np.clip(t - self.times[-1], 0.0, None)
        return np.where(t <= self.times[0], 0.0, value)


class ResidueKind(Enum):
    BOX = "box"


@dataclass(frozen=True)
class ResidueModel:
    """R(s): fraction of tracer remaining s seconds after an impulse."""
    support: float
    kind: ResidueKind = ResidueKind.BOX

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.where((s >= 0.0) & (s <= self.support), 1.0, 0.0)


@dataclass(frozen=True)
class VoxelParams:
    """Primary (cbv, mtt, delay) perfusion parameters; cbf and tmax are derived."""
    cbv: float
    mtt: float
    delay: float

    def __post_init__(self):
        values = np.array([self.cbv, self.mtt, self.delay], dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise PerfusionError("invalid-params", f"non-finite parameters {values.tolist()}")
        if self.cbv < 0 or self.mtt <= 0 or self.delay < 0:
            raise PerfusionError(
                "invalid-params", f"cbv={self.cbv}, mtt={self.mtt}, delay={self.delay} out of domain"
            )

    @property
    def cbf(self) -> float:
        return float(derive_cbf(self.cbv, self.mtt))

    @property
    def tmax(self) -> float:
        return float(derive_tmax(self.delay, self.mtt))

    @property
    def cbf_rate(self) -> float:
        """Flow as a per-second rate constant, cbv/(mtt+eps)."""
        return self.cbv / (self.mtt + EPS_CBF)

    @property
    def residue(self) -> ResidueModel:
        return ResidueModel(support=self.mtt)


def derive_cbf(cbv, mtt):
    """Central volume principle: CBF = UNIT_K * CBV / (MTT + eps), ml/100g/min."""
    cbv_a = np.asarray(cbv, dtype=np.float64)
    mtt_a = np.asarray(mtt, dtype=np.float64)
    if np.any(cbv_a < 0) or np.any(mtt_a < 0):
        raise PerfusionError("invalid-params", "cbv and mtt must be non-negative")
    result = UNIT_K * cbv_a / (mtt_a + EPS_CBF)
    return float(result) if result.ndim == 0 else result


def derive_tmax(delay, mtt):
    result = np.asarray(delay, dtype=np.float64) + 0.5 * np.asarray(mtt, dtype=np.float64)
    return float(result) if result.ndim == 0 else result


def endpoint_difference(aif, cbf_rate, delay, mtt, t):
    """CBF_rate * [C_a(t - delay) - C_a(t - delay - mtt)].

    Backend-agnostic: works for numpy arrays with a TimeSeries and for torch
    tensors with a differentiable AIF callable.
    """
    return cbf_rate * (aif(t - delay) - aif(t - delay - mtt))


def tissue_curve_box(aif: TimeSeries, params: VoxelParams, t):
    """C(t) = CBF_rate * integral of C_a over [max(0, t-delay-mtt), max(0, t-delay)].

    Exact for the piecewise-linear AIF: no sampled quadrature is involved.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise PerfusionError("invalid-params", "non-finite evaluation times")
    upper = np.maximum(0.0, t - params.delay)
    lower = np.maximum(0.0, t - params.delay - params.mtt)
    curve = params.cbf_rate * (aif.integral(upper) - aif.integral(lower))
    return float(curve) if curve.ndim == 0 else curve


def tissue_curves_box(aif: TimeSeries, cbv, mtt, delay, t):
    """Vectorized tissue_curve_box over broadcastable parameter arrays (last axis = time)."""
    cbv = np.asarray(cbv, dtype=np.float64)[..., None]
    mtt = np.asarray(mtt, dtype=np.float64)[..., None]
    delay = np.asarray(delay, dtype=np.float64)[..., None]
    upper = np.maximum(0.0, t - delay)
    lower = np.maximum(0.0, t - delay - mtt)
    return cbv / (mtt + EPS_CBF) * (aif.integral(upper) - aif.integral(lower))


def physics_residual(dcdt, aif, params: VoxelParams, t):
    """r(t) = dC/dt - CBF_rate * [C_a(t - delay) - C_a(t - delay - mtt)]."""
    dcdt = np.asarray(dcdt, dtype=np.float64)
    if not np.all(np.isfinite(dcdt)):
        raise PerfusionError("invalid-params", "non-finite dC/dt")
    r = dcdt - endpoint_difference(aif, params.cbf_rate, params.delay, params.mtt, np.asarray(t, dtype=np.float64))
    return float(r) if np.ndim(r) == 0 else r
