# services/trainer.py
"""
EPPINN per-case optimization.

One session owns a NetworkBundle for one case: the AIF network is pretrained on
the arterial samples, the parameter head is initialized near physiological
values, then all networks are optimized jointly on

    lambda_data * L_data
  + lambda_res * (|r| + omega(i) * lambda_edl * (L_nll + lambda_reg * L_reg))
  + L_ac + L_prior

with r = dC/dt - CBF_rate * [C_a(t - delay) - C_a(t - delay - mtt)].
L_nll and L_reg see r as a constant, so only the NIG outputs learn from them.

Concentrations are divided by the global signal scale S (max brain signal);
the AIF network predicts C_a / peak and is rescaled by peak / S inside the
residual. Residual-space variances are multiplied by S^2 on export.
"""

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from config import RuntimeConfig, TrainConfig, conf
from db.models import CaseBundle, NigField, PerfusionMaps
from networks import NetworkBundle, OptimState, SirenMlp, adam_step, hash_encode
from services import evidential
from services.errors import PerfusionError, TrainingDiverged
from services.kinetics import EPS_CBF, UNIT_K, endpoint_difference
from services.logger import run_logger
from services.metrics import coverage_rows, coverage_table

# Воксель считается "на полу" задержки, если delay <= eps_p + DELAY_FLOOR_BAND
DELAY_FLOOR_BAND = 0.15
DELAY_LOGIT_MAX = 6.0
CHUNK = 8192
TRACE_COLUMNS = [
    "iteration", "loss", "data", "res", "nll", "reg", "ac", "prior",
    "omega", "lr", "mean_cbf", "mean_delay", "delay_floor_fraction",
]


def inverse_softplus(y: float) -> float:
    return float(math.log(math.expm1(y)))


def fov_normalize(x_mm, fov) -> np.ndarray:
    """Physical coordinates (mm) divided by the field of view per axis."""
    fov = np.asarray(fov, dtype=np.float64)
    if np.any(fov <= 0):
        raise PerfusionError("invalid-params", f"field of view must be positive, got {fov.tolist()}")
    return np.asarray(x_mm, dtype=np.float64) / fov


def index_normalize(indices, grid_extent) -> np.ndarray:
    """Voxel-center indices divided by the largest grid extent (ignores spacing)."""
    return (np.asarray(indices, dtype=np.float64) + 0.5) / float(max(grid_extent))


def voxel_coordinates(case: CaseBundle, adaptive: bool = True) -> np.ndarray:
    """Normalized (x, y, z) of every voxel center, in C order of the (Z, Y, X) grid."""
    z, y, x = np.indices(case.grid_shape).reshape(3, -1)
    idx = np.stack([x, y, z], axis=1).astype(np.float64)
    if adaptive:
        return fov_normalize((idx + 0.5) * np.asarray(case.spacing), case.fov)
    x_dim, y_dim, z_dim, _ = case.dims
    return index_normalize(idx, (x_dim, y_dim, z_dim))


@dataclass
class HeadOutput:
    cbv: torch.Tensor
    mtt: torch.Tensor
    delay: torch.Tensor
    cbf: torch.Tensor
    nig: Optional[evidential.NigParams] = None


@dataclass
class ParamHead:
    """Maps raw parameter-net outputs to strictly positive perfusion parameters.

    cbv = s_cbv * softplus(theta_0)        (or cbf = s_cbf * softplus(theta_0) with predict_cbf)
    mtt = s_mtt * softplus(theta_1) + mtt_floor
    delay = s_delay * exp(theta_2) + eps_p
    """
    scale_cbv: float = 6.0
    scale_mtt: float = 12.0
    scale_delay: float = 2.0
    scale_cbf: float = 30.0
    mtt_floor: float = 0.1
    eps_p: float = 0.05
    predict_cbf: bool = False
    evidential: bool = True

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "ParamHead":
        return cls(
            scale_cbv=cfg.scale_cbv,
            scale_mtt=cfg.scale_mtt,
            scale_delay=cfg.scale_delay,
            scale_cbf=cfg.scale_cbf,
            mtt_floor=cfg.mtt_floor,
            eps_p=cfg.eps_p,
            predict_cbf=cfg.no_cbv_param,
            evidential=not cfg.no_evidential,
        )

    def __call__(self, raw: torch.Tensor) -> HeadOutput:
        mtt = self.scale_mtt * F.softplus(raw[:, 1]) + self.mtt_floor
        delay = self.scale_delay * torch.exp(raw[:, 2].clamp(max=DELAY_LOGIT_MAX)) + self.eps_p
        if self.predict_cbf:
            cbf = self.scale_cbf * F.softplus(raw[:, 0])
            cbv = cbf * (mtt + EPS_CBF) / UNIT_K
        else:
            cbv = self.scale_cbv * F.softplus(raw[:, 0])
            cbf = UNIT_K * cbv / (mtt + EPS_CBF)
        nig = evidential.transform(raw[:, 3], raw[:, 4], raw[:, 5]) if self.evidential else None
        return HeadOutput(cbv=cbv, mtt=mtt, delay=delay, cbf=cbf, nig=nig)

    def init_biases(self, target_cbf: float = 20.0, target_mtt: float = 4.0, target_delay: float = 2.0) -> torch.Tensor:
        mtt_raw = inverse_softplus((target_mtt - self.mtt_floor) / self.scale_mtt)
        if self.predict_cbf:
            first = inverse_softplus(target_cbf / self.scale_cbf)
        else:
            first = inverse_softplus(target_cbf * (target_mtt + EPS_CBF) / UNIT_K / self.scale_cbv)
        delay_raw = math.log(target_delay / self.scale_delay)
        return torch.tensor([first, mtt_raw, delay_raw, 0.0, 0.0, 0.0])


def phys_init(param_net: SirenMlp, head: ParamHead) -> SirenMlp:
    """Sets output biases so the initial maps sit at CBF ~ 20, MTT ~ 4 s, delay ~ 2 s."""
    with torch.no_grad():
        param_net.head.bias.copy_(head.init_biases().to(param_net.head.bias.dtype))
    return param_net


def pretrain_aif(
    aif_net: SirenMlp,
    t_norm: torch.Tensor,
    targets: torch.Tensor,
    iters: int,
    learning_rate: float = 1e-3,
    warmup_fraction: float = 0.3,
) -> float:
    """L1 fit of the AIF network to the arterial samples. Returns the max abs error."""
    if t_norm.numel() == 0:
        raise PerfusionError("no-samples", "AIF pretraining needs at least one sample")
    started = time.perf_counter()
    state = OptimState(aif_net.parameters(), iters, learning_rate, warmup_fraction)
    inputs = t_norm[:, None]
    for i in range(iters):
        loss = torch.mean(torch.abs(aif_net(inputs)[:, 0] - targets))
        if not torch.isfinite(loss):
            raise PerfusionError("aif-pretrain-diverged", f"loss {loss.item()} at iteration {i}")
        loss.backward()
        adam_step(state)
    with torch.no_grad():
        max_error = float(torch.max(torch.abs(aif_net(inputs)[:, 0] - targets)))
    run_logger.log_info(
        "Trainer", f"AIF pretrained ({iters} it) in {time.perf_counter() - started:.1f}s", f"max abs error {max_error:.4f}"
    )
    return max_error


def annealing_weight(i: int, iterations: int, enabled: bool = True) -> float:
    if not enabled:
        return 1.0
    return min(1.0, i / iterations)


def anticollapse_loss(delays: torch.Tensor, mtts: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """lambda_ac * [mean exp(-delay) + exp(-Var mtt)]."""
    return cfg.lambda_ac * (torch.exp(-delays).mean() + torch.exp(-mtts.var(unbiased=False)))


def evidential_terms(r: torch.Tensor, nig: evidential.NigParams):
    """(L_nll, L_reg) of the residual under the NIG head.

    The residual enters as a constant: these terms fit (alpha, beta, nu) to the
    residual and never pull dC/dt, CBF, MTT or delay toward a flat curve.
    """
    r_const = r.detach()
    return evidential.nig_nll(r_const, nig), evidential.nig_reg(r_const, nig)


def prior_loss(delays: torch.Tensor, mtts: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    penalty = (
        F.relu(cfg.delay_min - delays) ** 2
        + F.relu(delays - cfg.delay_max) ** 2
        + F.relu(mtts - cfg.mtt_max) ** 2
    )
    return cfg.lambda_pr * penalty.mean()


def configure_torch(runtime: RuntimeConfig, seed: int):
    torch.set_num_threads(max(1, int(runtime.threads)))
    if runtime.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)


class NetworkAif:
    """Network AIF in tissue-normalized units; 0 before the first frame."""

    def __init__(self, bundle: NetworkBundle, t_first: float, t_last: float, duration: float, gain: float, extension: str):
        self.bundle = bundle
        self.t_first = t_first
        self.t_last = t_last
        self.duration = duration
        self.gain = gain
        self.extension = extension

    def to_norm(self, t: torch.Tensor) -> torch.Tensor:
        return 2.0 * (t - self.t_first) / self.duration - 1.0

    def __call__(self, t: torch.Tensor) -> torch.Tensor:
        value = self.gain * self.bundle.aif(self.to_norm(t))
        if self.extension == "hold":
            last = self.gain * self.bundle.aif(self.to_norm(torch.full_like(t[:1], self.t_last)))
            value = torch.where(t > self.t_last, last.expand_as(value), value)
        else:
            value = torch.where(t > self.t_last, torch.zeros_like(value), value)
        return torch.where(t < self.t_first, torch.zeros_like(value), value)


@dataclass
class TrainResult:
    maps: PerfusionMaps
    nig: Optional[NigField]
    trace: pd.DataFrame
    coverage: Optional[pd.DataFrame]
    summary: dict
    bundle: NetworkBundle = field(repr=False, default=None)


class CaseTrainer:
    """Одна сессия обучения EPPINN на один кейс."""

    def __init__(self, case: CaseBundle, cfg: TrainConfig, runtime: RuntimeConfig = None):
        self.cfg = cfg.validate()
        self.case = case
        configure_torch(runtime or conf.runtime, cfg.seed)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.bundle = NetworkBundle(cfg)
        self.head = ParamHead.from_config(cfg)

        curves = case.brain_curves().astype(np.float64)
        if curves.shape[1] == 0:
            raise PerfusionError("no-samples", "brain mask is empty")
        aif_peak = float(np.max(np.abs(case.aif)))
        if aif_peak <= 0:
            raise PerfusionError("singular-aif", "AIF is identically zero")
        self.signal_scale = max(float(np.max(np.abs(curves))), 1e-6)
        self.aif_peak = aif_peak
        self.t_first = float(case.times[0])
        self.duration = case.duration
        self.time_scale = 2.0 / self.duration
        self.aif = NetworkAif(
            self.bundle, self.t_first, float(case.times[-1]), self.duration,
            gain=aif_peak / self.signal_scale, extension=cfg.aif_extension,
        )

        self.frame_t = torch.tensor(case.times, dtype=torch.float32)
        self.frame_tn = self.aif.to_norm(self.frame_t)
        self.tissue = torch.tensor(curves / self.signal_scale, dtype=torch.float32)
        self.aif_targets = torch.tensor(case.aif / aif_peak, dtype=torch.float32)
        coords = torch.tensor(voxel_coordinates(case, adaptive=not cfg.no_adaptive_hash), dtype=torch.float32)
        self.all_coords = coords
        self.brain_coords = coords[torch.from_numpy(case.brain_mask.ravel())]
        self.n_clamped = 0
        self.trace_rows: List[dict] = []

        if not cfg.no_phys_init:
            phys_init(self.bundle.param_net, self.head)

    # --- sampling ---

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        feats, n_clamped = self.bundle.encoder.encode(coords)
        self.n_clamped += n_clamped
        return feats

    def random_voxels(self, n: int) -> torch.Tensor:
        return torch.randint(self.brain_coords.shape[0], (n,), generator=self.generator)

    def residual_times(self, n: int) -> torch.Tensor:
        margin = self.cfg.residual_margin
        span = self.duration - 2.0 * margin
        if span <= 0:
            margin, span = 0.0, self.duration
        return self.t_first + margin + span * torch.rand(n, generator=self.generator)

    def data_loss(self, n: int) -> torch.Tensor:
        vox = self.random_voxels(n)
        frames = torch.randint(self.frame_t.shape[0], (n,), generator=self.generator)
        pred = self.bundle.tissue(self.frame_tn[frames], self.encode(self.brain_coords[vox]))
        tissue_l1 = torch.mean(torch.abs(pred - self.tissue[frames, vox]))
        aif_l1 = torch.mean(torch.abs(self.bundle.aif(self.frame_tn) - self.aif_targets))
        return tissue_l1 + aif_l1

    def residual(self, coords: torch.Tensor, t: torch.Tensor):
        """Normalized residual r / S, dC/dt / S and the head output at (coords, t)."""
        feats = self.encode(coords)
        _, dcdt = self.bundle.tissue_with_time_derivative(self.aif.to_norm(t), feats, self.time_scale)
        out = self.head(self.bundle.params_raw(feats))
        rate = out.cbv / (out.mtt + EPS_CBF)
        r = dcdt - endpoint_difference(self.aif, rate, out.delay, out.mtt, t)
        return r, dcdt, out

    # --- optimization ---

    def step(self, i: int, state: OptimState) -> dict:
        cfg = self.cfg
        half = cfg.batch_samples // 2
        l_data = self.data_loss(half)
        n_res = cfg.batch_samples - half
        r, _, out = self.residual(self.brain_coords[self.random_voxels(n_res)], self.residual_times(n_res))
        l_res = torch.mean(torch.abs(r))
        omega = annealing_weight(i, cfg.iterations, enabled=not cfg.no_annealing)
        zero = torch.zeros((), dtype=r.dtype)
        l_nll, l_reg = zero, zero
        if out.nig is not None:
            l_nll, l_reg = evidential_terms(r, out.nig)
        l_ac = zero if cfg.no_anticollapse else anticollapse_loss(out.delay, out.mtt, cfg)
        l_pr = prior_loss(out.delay, out.mtt, cfg)
        loss = (
            cfg.lambda_data * l_data
            + cfg.lambda_res * (l_res + omega * cfg.lambda_edl * (l_nll + cfg.lambda_reg * l_reg))
            + l_ac
            + l_pr
        )
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                "train-diverged", f"non-finite loss at iteration {i}", trace=self.trace_frame()
            )
        loss.backward()
        lr = adam_step(state)
        return {
            "iteration": i,
            "loss": loss.item(),
            "data": l_data.item(),
            "res": l_res.item(),
            "nll": l_nll.item(),
            "reg": l_reg.item(),
            "ac": l_ac.item(),
            "prior": l_pr.item(),
            "omega": omega,
            "lr": lr,
        }

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trace_rows, columns=TRACE_COLUMNS)

    @torch.no_grad()
    def evaluate_head(self, coords: torch.Tensor) -> dict:
        """Head outputs at coords as float64 numpy arrays, evaluated in chunks."""
        parts = {k: [] for k in ("cbv", "mtt", "delay", "cbf", "alpha", "beta", "nu")}
        for start in range(0, coords.shape[0], CHUNK):
            out = self.head(self.bundle.params_raw(hash_encode(self.bundle.encoder, coords[start:start + CHUNK])))
            for name in ("cbv", "mtt", "delay", "cbf"):
                parts[name].append(getattr(out, name))
            if out.nig is not None:
                for name in ("alpha", "beta", "nu"):
                    parts[name].append(getattr(out.nig, name))
        return {k: torch.cat(v).double().numpy() for k, v in parts.items() if v}

    def brain_stats(self) -> dict:
        values = self.evaluate_head(self.brain_coords)
        floor = self.cfg.eps_p + DELAY_FLOOR_BAND
        return {
            "mean_cbf": float(values["cbf"].mean()),
            "mean_delay": float(values["delay"].mean()),
            "delay_floor_fraction": float(np.mean(values["delay"] <= floor)),
        }

    # --- extraction ---

    def extract(self):
        grid_shape = self.case.grid_shape
        values = self.evaluate_head(self.all_coords)
        maps = PerfusionMaps.from_primary(
            values["cbv"].reshape(grid_shape),
            values["mtt"].reshape(grid_shape),
            values["delay"].reshape(grid_shape),
        ).validate()
        nig = None
        if "alpha" in values:
            p = evidential.NigParams(
                alpha=torch.from_numpy(values["alpha"]),
                beta=torch.from_numpy(values["beta"]),
                nu=torch.from_numpy(values["nu"]),
            )
            unc = evidential.decompose(p)
            s2 = self.signal_scale**2
            nig = NigField(
                alpha=values["alpha"].reshape(grid_shape).astype(np.float32),
                beta=values["beta"].reshape(grid_shape).astype(np.float32),
                nu=values["nu"].reshape(grid_shape).astype(np.float32),
                aleatoric=(s2 * unc.aleatoric.numpy()).reshape(grid_shape).astype(np.float32),
                epistemic=(s2 * unc.epistemic.numpy()).reshape(grid_shape).astype(np.float32),
                total=(s2 * unc.total.numpy()).reshape(grid_shape).astype(np.float32),
            )
        return maps, nig

    @torch.no_grad()
    def final_residuals(self, method: str):
        """Fresh residual draws: physics summary plus per-sample and per-voxel coverage."""
        cfg = self.cfg
        n = cfg.coverage_samples
        r, dcdt, out = self.residual(self.brain_coords[self.random_voxels(n)], self.residual_times(n))
        summary = {
            "mean_abs_residual": float(self.signal_scale * r.abs().mean()),
            "peak_abs_dcdt": float(self.signal_scale * dcdt.abs().max()),
        }
        summary["residual_to_peak_ratio"] = summary["mean_abs_residual"] / max(summary["peak_abs_dcdt"], 1e-12)
        if out.nig is None:
            return summary, None

        sigma = torch.sqrt(evidential.decompose(out.nig).total)
        n_t = cfg.coverage_time_points
        margin = min(cfg.residual_margin, 0.25 * self.duration)
        t_grid = torch.linspace(self.t_first + margin, self.t_first + self.duration - margin, n_t)
        voxel_r, voxel_sigma = [], []
        per_chunk = max(1, CHUNK // n_t)
        for start in range(0, self.brain_coords.shape[0], per_chunk):
            coords = self.brain_coords[start:start + per_chunk]
            m = coords.shape[0]
            rv, _, ov = self.residual(coords.repeat_interleave(n_t, dim=0), t_grid.repeat(m))
            voxel_r.append(rv.reshape(m, n_t))
            voxel_sigma.append(torch.sqrt(evidential.decompose(ov.nig).total).reshape(m, n_t)[:, 0])
        rows = coverage_rows(
            self.case.case_id, method,
            r.double().numpy(), sigma.double().numpy(),
            voxel_residuals=torch.cat(voxel_r).double().numpy(),
            voxel_sigmas=torch.cat(voxel_sigma).double().numpy(),
        )
        return summary, coverage_table(rows)

    def run(self, method: str = "eppinn") -> TrainResult:
        cfg = self.cfg
        case_id = self.case.case_id
        started = time.perf_counter()
        run_logger.log_case_event(case_id, "training started", f"method={method}, iterations={cfg.iterations}")
        aif_error = None
        if not cfg.no_aif_pretrain:
            aif_error = pretrain_aif(
                self.bundle.aif_net, self.frame_tn, self.aif_targets,
                cfg.aif_pretrain_iters, cfg.aif_learning_rate, cfg.warmup_fraction,
            )
        state = OptimState(self.bundle.parameters(), cfg.iterations, cfg.learning_rate, cfg.warmup_fraction)
        for i in range(cfg.iterations):
            row = self.step(i, state)
            if i % cfg.trace_every == 0 or i == cfg.iterations - 1:
                row.update(self.brain_stats())
                self.trace_rows.append(row)
                run_logger.log_info(
                    "Trainer",
                    f"{case_id} it {i}: loss={row['loss']:.4f} res={row['res']:.4f} mean CBF={row['mean_cbf']:.2f}",
                    f"omega={row['omega']:.2f}, lr={row['lr']:.2e}, floor={row['delay_floor_fraction']:.2f}",
                )

        maps, nig = self.extract()
        physics, coverage = self.final_residuals(method)
        elapsed = time.perf_counter() - started
        summary = {
            "method": method,
            "iterations": cfg.iterations,
            "seconds": elapsed,
            "signal_scale": self.signal_scale,
            "aif_peak": self.aif_peak,
            "aif_pretrain_max_error": aif_error,
            "clamped_queries": self.n_clamped,
            **physics,
        }
        run_logger.log_case_event(case_id, "training finished", f"{elapsed:.1f}s, mean |r|/peak={physics['residual_to_peak_ratio']:.4f}")
        return TrainResult(maps=maps, nig=nig, trace=self.trace_frame(), coverage=coverage, summary=summary, bundle=self.bundle)


def train_case(case: CaseBundle, cfg: TrainConfig, runtime: RuntimeConfig = None, method: str = "eppinn") -> TrainResult:
    return CaseTrainer(case, cfg, runtime).run(method)
