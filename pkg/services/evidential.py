# services/evidential.py
"""
Normal-Inverse-Gamma evidential head over the physics residual.

The predictive mean is fixed at 0, so the head only carries (alpha, beta, nu).
Variances are in units of r^2.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from services.errors import PerfusionError

EPS_EDL = 1e-3


@dataclass
class NigParams:
    alpha: torch.Tensor
    beta: torch.Tensor
    nu: torch.Tensor


@dataclass
class UncertaintyMaps:
    aleatoric: torch.Tensor
    epistemic: torch.Tensor
    total: torch.Tensor


def transform(raw_alpha, raw_beta, raw_nu) -> NigParams:
    """alpha = 1 + softplus + eps, beta = softplus + eps, nu = softplus + eps."""
    return NigParams(
        alpha=1.0 + F.softplus(raw_alpha) + EPS_EDL,
        beta=F.softplus(raw_beta) + EPS_EDL,
        nu=F.softplus(raw_nu) + EPS_EDL,
    )


def nig_nll(r: torch.Tensor, p: NigParams, reduce: bool = True) -> torch.Tensor:
    """Student-t negative log-likelihood of r under NIG(0, nu, alpha, beta)."""
    loss = (
        -p.alpha * torch.log(p.beta)
        + (p.alpha + 0.5) * torch.log(p.beta + 0.5 * p.nu * r**2)
        + 0.5 * torch.log(math.pi / p.nu)
        + torch.lgamma(p.alpha)
        - torch.lgamma(p.alpha + 0.5)
    )
    return loss.mean() if reduce else loss


def nig_reg(r: torch.Tensor, p: NigParams, reduce: bool = True) -> torch.Tensor:
    loss = torch.abs(r) * (2.0 * p.nu + p.alpha)
    return loss.mean() if reduce else loss


def decompose(p: NigParams) -> UncertaintyMaps:
    alpha = torch.as_tensor(p.alpha)
    if torch.any(alpha <= 1.0):
        raise PerfusionError("invalid-alpha", "alpha must exceed 1")
    aleatoric = torch.as_tensor(p.beta) / (alpha - 1.0)
    epistemic = aleatoric / torch.as_tensor(p.nu)
    return UncertaintyMaps(aleatoric=aleatoric, epistemic=epistemic, total=aleatoric + epistemic)


def coverage_interval(p: NigParams, k: float) -> torch.Tensor:
    """Half-width k * sqrt(total variance) of the interval centred at 0."""
    if k <= 0:
        raise PerfusionError("invalid-params", f"k={k} must be positive")
    return k * torch.sqrt(decompose(p).total)
