# networks/hash_grid.py
"""Multi-resolution hash encoding of normalized 3-D coordinates."""

import math
from typing import Tuple

import torch
from torch import nn

# Хеш-простые числа для координат (x, y, z)
PRIMES = (1, 2654435761, 805459861)


class HashGrid(nn.Module):
    """L levels, 2**log2_table entries per level, F features per entry.

    Level l has resolution N_l = floor(N_base * b**l); corner features are
    blended trilinearly and the levels are concatenated (output L * F).
    """

    def __init__(
        self,
        levels: int = 8,
        log2_table: int = 14,
        features: int = 2,
        base_resolution: int = 4,
        growth: float = 1.5,
    ):
        super().__init__()
        self.levels = levels
        self.table_size = 2**log2_table
        self.features = features
        self.resolutions = [int(math.floor(base_resolution * growth**l)) for l in range(levels)]
        self.table = nn.Parameter(torch.empty(levels, self.table_size, features).uniform_(-1e-4, 1e-4))
        offsets = torch.tensor([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.int64)
        self.register_buffer("box_offsets", offsets, persistent=False)
        self.register_buffer("primes", torch.tensor(PRIMES, dtype=torch.int64), persistent=False)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features

    def hash(self, corners: torch.Tensor) -> torch.Tensor:
        """XOR spatial hash of integer corners (..., 3) modulo the table size."""
        scaled = corners * self.primes
        h = torch.bitwise_xor(torch.bitwise_xor(scaled[..., 0], scaled[..., 1]), scaled[..., 2])
        return h & (self.table_size - 1)

    def interpolation_weights(self, x: torch.Tensor, level: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Table indices (B, 8) and trilinear weights (B, 8) of x in [0, 1]^3 at one level."""
        pos = x * self.resolutions[level]
        base = torch.floor(pos)
        frac = pos - base
        corners = base.to(torch.int64)[:, None, :] + self.box_offsets[None]
        off = self.box_offsets.to(x.dtype)[None]
        weights = torch.prod(torch.where(off > 0, frac[:, None, :], 1.0 - frac[:, None, :]), dim=-1)
        return self.hash(corners), weights

    def encode(self, x: torch.Tensor) -> Tuple[torch.Tensor, int]:
        """Features (B, L*F) and the number of queries clamped into [0, 1]^3."""
        outside = ((x < 0.0) | (x > 1.0)).any(dim=-1)
        n_clamped = int(outside.sum())
        x = x.clamp(0.0, 1.0)
        per_level = []
        for level in range(self.levels):
            idx, w = self.interpolation_weights(x, level)
            corner_feats = self.table[level][idx]
            per_level.append((w[..., None].to(corner_feats.dtype) * corner_feats).sum(dim=1))
        return torch.cat(per_level, dim=-1), n_clamped

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode(x)[0]


def hash_encode(grid: HashGrid, x_norm: torch.Tensor) -> torch.Tensor:
    return grid(x_norm)
