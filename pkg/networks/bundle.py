# networks/bundle.py
"""Three networks of one EPPINN session sharing a single hash encoder."""

import torch
from torch import nn

from config import TrainConfig
from networks.hash_grid import HashGrid
from networks.siren import SirenMlp

# Сырые выходы головы параметров
PARAM_OUTPUTS = ("cbv", "mtt", "delay", "alpha", "beta", "nu")


class NetworkBundle(nn.Module):
    """AIF net C_a(t), tissue net C(t, h(x)) and parameter net p(h(x))."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.encoder = HashGrid(
            levels=cfg.hash_levels,
            log2_table=cfg.hash_log2_table,
            features=cfg.hash_features,
            base_resolution=cfg.hash_base_resolution,
            growth=cfg.hash_growth,
        )
        enc_dim = self.encoder.output_dim
        self.aif_net = SirenMlp(1, cfg.aif_hidden, cfg.hidden_layers, 1, omega0=cfg.omega0)
        self.tissue_net = SirenMlp(1 + enc_dim, cfg.tissue_hidden, cfg.hidden_layers, 1, omega0=cfg.omega0)
        self.param_net = SirenMlp(enc_dim, cfg.param_hidden, cfg.hidden_layers, len(PARAM_OUTPUTS), omega0=cfg.omega0)

    def aif(self, t_norm: torch.Tensor) -> torch.Tensor:
        return self.aif_net(t_norm[:, None])[:, 0]

    def tissue(self, t_norm: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        return self.tissue_net(torch.cat([t_norm[:, None], feats], dim=-1))[:, 0]

    def tissue_with_time_derivative(self, t_norm: torch.Tensor, feats: torch.Tensor, time_scale: float):
        value, deriv = self.tissue_net.forward_with_time_derivative(
            torch.cat([t_norm[:, None], feats], dim=-1), time_scale=time_scale
        )
        return value[:, 0], deriv[:, 0]

    def params_raw(self, feats: torch.Tensor) -> torch.Tensor:
        return self.param_net(feats)
