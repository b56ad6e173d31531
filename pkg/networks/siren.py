# networks/siren.py
"""
SIREN layers with an exact forward-mode time-derivative channel.

The tangent (d/dt) is propagated alongside the value through every layer:
    z = omega0 * (W h + b),  dz = omega0 * W dh
    y = sin(z),              dy = cos(z) * dz
so dC/dt is available in one pass and stays differentiable w.r.t. the weights.
"""

import math
from typing import List, Tuple

import torch
from torch import nn


class SineLayer(nn.Module):
    def __init__(self, in_features: int, out_features: int, omega0: float = 15.0, is_first: bool = False):
        super().__init__()
        self.omega0 = omega0
        self.is_first = is_first
        self.linear = nn.Linear(in_features, out_features)
        self.init_weights()

    def init_weights(self):
        with torch.no_grad():
            fan_in = self.linear.in_features
            if self.is_first:
                bound = 1.0 / fan_in
            else:
                bound = math.sqrt(6.0 / fan_in) / self.omega0
            self.linear.weight.uniform_(-bound, bound)
            self.linear.bias.uniform_(-bound, bound)

    def preactivation(self, x: torch.Tensor) -> torch.Tensor:
        return self.omega0 * self.linear(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sin(self.preactivation(x))

    def forward_dual(self, x: torch.Tensor, dx: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        z = self.preactivation(x)
        dz = self.omega0 * (dx @ self.linear.weight.T)
        return torch.sin(z), torch.cos(z) * dz


class SirenMlp(nn.Module):
    """Sine hidden layers followed by a linear head. Input column 0 is time."""

    def __init__(self, in_features: int, hidden: int, hidden_layers: int, out_features: int, omega0: float = 15.0):
        super().__init__()
        layers = []
        width = in_features
        for depth in range(hidden_layers):
            layers.append(SineLayer(width, hidden, omega0=omega0, is_first=depth == 0))
            width = hidden
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(width, out_features)
        if hidden_layers:
            with torch.no_grad():
                bound = math.sqrt(6.0 / width) / omega0
                self.head.weight.uniform_(-bound, bound)
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.head(x)

    def forward_with_time_derivative(self, x: torch.Tensor, time_scale: float = 1.0) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (f(x), df/dt) where t = x[:, 0] / ... scaled by time_scale = d x[:, 0] / dt."""
        dx = torch.zeros_like(x)
        dx[:, 0] = time_scale
        h, dh = x, dx
        for layer in self.layers:
            h, dh = layer.forward_dual(h, dh)
        return self.head(h), dh @ self.head.weight.T

    def preactivations(self, x: torch.Tensor) -> List[torch.Tensor]:
        out = []
        for layer in self.layers:
            out.append(layer.preactivation(x))
            x = torch.sin(out[-1])
        return out


def forward_with_time_derivative(net: SirenMlp, inputs: torch.Tensor, time_scale: float = 1.0):
    return net.forward_with_time_derivative(inputs, time_scale=time_scale)
