"""Small residual CNN producing a stride 8/16/32 feature pyramid."""

from __future__ import annotations

import math

import torch
from torch import nn

STRIDES = (8, 16, 32)


class ConvBNAct(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, k: int = 3, s: int = 1, d: int = 1, act: bool = True):
        super().__init__(
            nn.Conv2d(c_in, c_out, k, s, padding=d * (k - 1) // 2, dilation=d, bias=False),
            nn.BatchNorm2d(c_out),
            nn.SiLU() if act else nn.Identity(),
        )


class Residual(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv1 = ConvBNAct(c, c)
        self.conv2 = ConvBNAct(c, c, act=False)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(x + self.conv2(self.conv1(x)))


def init_weights(module: nn.Module) -> None:
    """Fan-in normal conv/linear weights, zero biases, unit BN scale."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Stem (two stride-2 convs) followed by three stride-2 residual stages."""

    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.input_size = cfg.input_size
        c0 = cfg.stem_channels
        self.stem = nn.Sequential(ConvBNAct(3, c0, s=2), ConvBNAct(c0, c0, s=2))
        stages = []
        c_prev = c0
        for c, n in zip(cfg.stage_channels, cfg.blocks_per_stage):
            stages.append(nn.Sequential(ConvBNAct(c_prev, c, s=2), *[Residual(c) for _ in range(n)]))
            c_prev = c
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(cfg.stage_channels)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W input, got {tuple(x.shape)}")
        if x.shape[-2:] != (self.input_size, self.input_size):
            raise ValueError(f"input must be {self.input_size}x{self.input_size}, got {tuple(x.shape[-2:])}")
        x = self.stem(x)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


def pyramid_shapes(input_size: int) -> list[tuple[int, int]]:
    return [(math.ceil(input_size / s), math.ceil(input_size / s)) for s in STRIDES]
