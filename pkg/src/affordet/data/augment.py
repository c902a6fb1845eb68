from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..core import Box, Sample, derive_seed


def flip_decision(seed: int, sample_id: str, epoch: int) -> bool:
    rng = np.random.default_rng(derive_seed("flip", seed, sample_id, epoch))
    return bool(rng.random() < 0.5)


def hflip(sample: Sample) -> Sample:
    w = sample.width
    boxes = [Box(w - b.x2, b.y1, w - b.x1, b.y2) for b in sample.boxes]
    aff = None if sample.affordance is None else np.ascontiguousarray(sample.affordance[:, ::-1])
    return Sample(
        id=sample.id,
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        classes=list(sample.classes),
        boxes=boxes,
        affordance=aff,
    )


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def resize(sample: Sample, size: int) -> Sample:
    if sample.height == size and sample.width == size:
        return sample
    sx, sy = size / sample.width, size / sample.height
    boxes = [Box(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy) for b in sample.boxes]
    aff = None if sample.affordance is None else np.clip(_resize(sample.affordance, size), 0, 1)
    return Sample(
        id=sample.id,
        image=np.clip(_resize(sample.image, size), 0, 1),
        classes=list(sample.classes),
        boxes=boxes,
        affordance=aff,
    )


def augment(sample: Sample, seed: int, epoch: int = 0, size: int | None = None, flip: bool = True) -> Sample:
    """Random horizontal flip (p=0.5) and resize; deterministic per (seed, id, epoch)."""
    out = sample
    if flip and flip_decision(seed, sample.id, epoch):
        out = hflip(out)
    if size is not None:
        out = resize(out, size)
    return out
