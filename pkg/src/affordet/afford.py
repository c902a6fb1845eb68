"""Dense affordance branch at stride 8 and its soft-target BCE loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import init_weights

WORKING_STRIDE = 8


@dataclass
class AffordanceLogits:
    logits: torch.Tensor  # N x A x H/8 x W/8

    def probabilities(self, size: int | tuple[int, int]) -> torch.Tensor:
        """Sigmoid map bilinearly upsampled to ``size`` (N x A x H x W)."""
        return upsample_probs(self.logits, size)


def upsample_probs(logits: torch.Tensor, size) -> torch.Tensor:
    if isinstance(size, int):
        size = (size, size)
    return F.interpolate(torch.sigmoid(logits), size=size, mode="bilinear", align_corners=False)


class AffordanceBranch(nn.Module):
    """Top-down fusion, then Conv -> dilated Conv -> BN -> SiLU -> 1x1 MLP."""

    def __init__(self, in_channels, num_affordances: int, channels: int = 64, hidden: int = 64):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1, bias=False) for c in in_channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.dconv = nn.Conv2d(channels, channels, 3, padding=2, dilation=2, bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.act = nn.SiLU()
        self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.SiLU(), nn.Conv2d(hidden, num_affordances, 1))
        init_weights(self)

    def forward(self, levels) -> AffordanceLogits:
        fine = levels[0]
        x = self.lateral[0](fine)
        for lat, lvl in zip(self.lateral[1:], levels[1:]):
            x = x + F.interpolate(lat(lvl), size=fine.shape[-2:], mode="nearest")
        x = self.act(self.bn(self.dconv(self.conv(x))))
        return AffordanceLogits(self.mlp(x))


def area_downsample(maps: torch.Tensor, factor: int = WORKING_STRIDE) -> torch.Tensor:
    """Block-average N x A x H x W maps by ``factor`` (ceil-padded with edge means)."""
    return F.adaptive_avg_pool2d(maps, (-(-maps.shape[-2] // factor), -(-maps.shape[-1] // factor)))


def loss_aff(logits: torch.Tensor, target: torch.Tensor, pos_weight: float = 1.0, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean soft-target BCE; ``target`` must already be at the logits' resolution.

    With ``mask`` (broadcastable to ``logits``), the mean runs over masked
    entries only and an empty mask gives 0.
    """
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    if pos_weight != 1.0:
        pw = torch.as_tensor(pos_weight, dtype=logits.dtype)
        per = F.binary_cross_entropy_with_logits(logits, target, reduction="none", pos_weight=pw)
    else:
        per = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    if mask is None:
        return per.mean()
    mask = mask.to(per.dtype).expand_as(per)
    total = mask.sum()
    if total == 0:
        return per.sum() * 0
    return (per * mask).sum() / total
