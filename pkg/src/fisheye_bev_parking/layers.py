"""Convolutional building blocks shared by the BEV trunk and the task heads."""

from __future__ import annotations

from torch import Tensor, nn


def activation(name: str) -> nn.Module:
    return nn.GELU() if name == "gelu" else nn.ReLU()


def norm2d(channels: int) -> nn.GroupNorm:
    # one group: normalises over channels and space, per sample
    return nn.GroupNorm(1, channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, act: str = "relu") -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            norm2d(channels),
            activation(act),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            norm2d(channels),
        )
        self.out = activation(act)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(x + self.body(x))
