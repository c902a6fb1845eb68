"""Shared value types, box geometry and determinism helpers."""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch

LOGIT_EPS = 1e-4


class Box(NamedTuple):
    """Axis-aligned box in absolute pixel corners, origin top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def is_valid(self) -> bool:
        return (
            all(math.isfinite(v) for v in self)
            and self.x1 <= self.x2
            and self.y1 <= self.y2
        )


class Detection(NamedTuple):
    box: Box
    class_id: int
    score: float


@dataclass
class Sample:
    """One labelled image.

    ``image`` is H x W x 3 float32 in [0, 1] and ``affordance`` is H x W x A
    float32 in [0, 1]; ``classes`` and ``boxes`` are parallel lists.
    """

    id: str
    image: np.ndarray
    classes: list[int] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    affordance: np.ndarray | None = None

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    def boxes_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4), dtype=np.float32)
        return np.asarray(self.boxes, dtype=np.float32)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = Box(*a).area + Box(*b).area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def clamp_box(b: Box, width: int, height: int) -> Box:
    if width <= 0 or height <= 0:
        raise ValueError(f"image size must be positive, got {width}x{height}")
    x1 = min(max(b.x1, 0.0), width)
    y1 = min(max(b.y1, 0.0), height)
    x2 = min(max(b.x2, x1), width)
    y2 = min(max(b.y2, y1), height)
    return Box(float(x1), float(y1), float(x2), float(y2))


def logit(p, eps: float = LOGIT_EPS):
    """Clamped log-odds; works on floats, numpy arrays and tensors."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    if isinstance(p, torch.Tensor):
        q = p.clamp(eps, 1 - eps)
        return torch.log(q) - torch.log1p(-q)
    q = np.clip(p, eps, 1 - eps)
    out = np.log(q) - np.log1p(-q)
    return float(out) if np.ndim(out) == 0 else out


def sigmoid(x):
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x)
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))
    return float(out) if out.ndim == 0 else out


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (ints, strings)."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def deterministic_requested() -> bool:
    return os.environ.get("YOLOA_DETERMINISTIC", "0") == "1"


def set_deterministic(enabled: bool | None = None) -> bool:
    """Switch torch into deterministic execution; returns the active flag."""
    if enabled is None:
        enabled = deterministic_requested()
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return enabled


def boxes_to_list(arr: Sequence) -> list[Box]:
    return [Box(*map(float, row)) for row in np.asarray(arr, dtype=np.float64).reshape(-1, 4)]
