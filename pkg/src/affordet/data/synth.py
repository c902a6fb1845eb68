"""Synthetic tabletop-tool scenes with box and affordance-heatmap labels.

Each object class is a shape archetype drawn from a few primitives; each
affordance of an archetype is tied to one functional part, and the ground
truth heatmap is a Gaussian blob on that part with sigma = 0.15 * min(w, h)
of the object's box.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..core import Box, Sample, derive_seed

BLOB_SIGMA_SCALE = 0.15
MAX_PLACEMENT_ATTEMPTS = 50


@dataclass(frozen=True)
class Archetype:
    color: tuple[int, int, int]
    # affordance name -> functional part center as (fx, fy) fractions of the box
    parts: dict[str, tuple[float, float]]
    draw: Callable[[np.ndarray, np.ndarray, float, float, float, float], np.ndarray]
    size_range: tuple[tuple[int, int], tuple[int, int]]


def _rect(xx, yy, x1, y1, x2, y2):
    return (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)


def _draw_hammer(xx, yy, x, y, w, h):
    head = _rect(xx, yy, x, y, x + w, y + 0.3 * h)
    handle = _rect(xx, yy, x + 0.375 * w, y, x + 0.625 * w, y + h)
    return head | handle


def _draw_cup(xx, yy, x, y, w, h):
    body = _rect(xx, yy, x, y, x + 0.7 * w, y + h)
    cx, cy = x + 0.7 * w, y + 0.5 * h
    r_out, r_in = 0.3 * w, 0.16 * w
    d2 = ((xx - cx) / r_out) ** 2 + ((yy - cy) / (0.35 * h)) ** 2
    d2_in = ((xx - cx) / r_in) ** 2 + ((yy - cy) / (0.2 * h)) ** 2
    handle = (d2 <= 1) & (d2_in > 1) & (xx >= cx)
    return body | handle


def _draw_knife(xx, yy, x, y, w, h):
    handle = _rect(xx, yy, x, y + 0.3 * h, x + 0.4 * w, y + 0.7 * h)
    # blade: triangle with its base on the handle side, tip at the right edge
    t = (xx - (x + 0.4 * w)) / (0.6 * w)
    half = 0.5 * h * (1 - t)
    blade = (t >= 0) & (t < 1) & (yy >= y + 0.5 * h - half) & (yy < y + 0.5 * h + half)
    return handle | blade


def _draw_bowl(xx, yy, x, y, w, h):
    cx = x + 0.5 * w
    return (yy >= y) & (yy < y + h) & (((xx - cx) / (0.5 * w)) ** 2 + ((yy - y) / h) ** 2 <= 1)


def _draw_scissors(xx, yy, x, y, w, h):
    r = min(0.2 * w, 0.25 * h)
    mask = np.zeros(xx.shape, dtype=bool)
    for fy in (0.25, 0.75):
        cx, cy = x + r, y + fy * h
        d = np.hypot(xx - cx, yy - cy)
        mask |= (d <= r) & (d > 0.55 * r)
    mid = y + 0.5 * h
    # arms from the rings to the pivot
    px = x + 0.45 * w
    for fy in (0.25, 0.75):
        y0 = y + fy * h
        t = (xx - (x + 2 * r * 0.9)) / max(px - (x + 2 * r * 0.9), 1e-6)
        yline = y0 + (mid - y0) * t
        mask |= (t >= 0) & (t <= 1) & (np.abs(yy - yline) <= 0.07 * h + 1)
    # two blades diverging slightly from the pivot to the tip
    t = (xx - px) / (x + w - px)
    for sign in (-1, 1):
        yc = mid + sign * 0.08 * h * t
        half = 0.1 * h * (1 - t) + 0.5
        mask |= (t >= 0) & (t < 1) & (np.abs(yy - yc) <= half)
    return mask


ARCHETYPES: dict[str, Archetype] = {
    "hammer": Archetype((200, 60, 50), {"pound": (0.5, 0.15), "grasp": (0.5, 0.7)}, _draw_hammer, ((48, 96), (56, 104))),
    "cup": Archetype((60, 170, 70), {"contain": (0.35, 0.35), "wrap-grasp": (0.35, 0.7), "grasp": (0.86, 0.5)}, _draw_cup, ((48, 96), (44, 88))),
    "knife": Archetype((70, 90, 210), {"cut": (0.6, 0.5), "grasp": (0.2, 0.5)}, _draw_knife, ((64, 120), (28, 48))),
    "bowl": Archetype((220, 190, 40), {"contain": (0.5, 0.3), "wrap-grasp": (0.5, 0.75)}, _draw_bowl, ((56, 104), (32, 60))),
    "scissors": Archetype((190, 70, 190), {"cut": (0.75, 0.5), "grasp": (0.15, 0.5)}, _draw_scissors, ((64, 112), (40, 72))),
}


def gaussian_blob(height: int, width: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    """Peak-1 isotropic Gaussian; pixel (i, j) is evaluated at its center (j+0.5, i+0.5)."""
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    gx = np.exp(-((xs - cx) ** 2) / (2 * sigma**2))
    gy = np.exp(-((ys - cy) ** 2) / (2 * sigma**2))
    return np.outer(gy, gx)


def _try_render(cfg, rng: np.random.Generator, sid: str) -> Sample | None:
    size = cfg.image_size
    scale = size / 256.0
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    bg = rng.integers(150, 236)
    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = bg + rng.integers(-12, 13, size=3)
    heat = np.zeros((size, size, len(cfg.affordance_classes)), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    classes: list[int] = []
    boxes: list[Box] = []
    for _ in range(n_obj):
        cls = int(rng.integers(len(cfg.object_classes)))
        arch = ARCHETYPES[cfg.object_classes[cls]]
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            (wmin, wmax), (hmin, hmax) = arch.size_range
            w = rng.uniform(wmin, wmax) * scale
            h = rng.uniform(hmin, hmax) * scale
            x = rng.uniform(2, size - w - 2)
            y = rng.uniform(2, size - h - 2)
            # keep a small gap between objects so boxes never overlap
            if all(x > b.x2 + 4 or x + w < b.x1 - 4 or y > b.y2 + 4 or y + h < b.y1 - 4 for b in boxes):
                break
        else:
            return None
        mask = arch.draw(xx, yy, x, y, w, h)
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size < 2 or cols.size < 2:
            return None
        box = Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
        color = np.clip(np.asarray(arch.color) + rng.integers(-25, 26, size=3), 0, 255)
        image[mask] = color
        sigma = BLOB_SIGMA_SCALE * min(box.width, box.height)
        for aff, (fx, fy) in arch.parts.items():
            if aff not in cfg.affordance_classes:
                continue
            a = cfg.affordance_classes.index(aff)
            blob = gaussian_blob(size, size, x + fx * w, y + fy * h, sigma)
            np.maximum(heat[..., a], blob, out=heat[..., a])
        classes.append(cls)
        boxes.append(box)
    img8 = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    # quantize to the on-disk precision so memory and disk copies agree exactly
    heat16 = np.rint(np.clip(heat, 0, 1) * 65535).astype(np.uint16)
    return Sample(
        id=sid,
        image=img8.astype(np.float32) / 255.0,
        classes=classes,
        boxes=boxes,
        affordance=heat16.astype(np.float32) / 65535.0,
    )


def render_sample(cfg, index: int) -> Sample:
    sid = f"{index:06d}"
    attempt = 0
    while True:
        rng = np.random.default_rng(derive_seed(cfg.seed, sid, attempt))
        sample = _try_render(cfg, rng, sid)
        if sample is not None:
            return sample
        attempt += 1


def synthesize(cfg) -> list[Sample]:
    """Render ``cfg.num_images`` samples in memory, deterministic per seed."""
    cfg.validate()
    return [render_sample(cfg, i) for i in range(cfg.num_images)]


def generate_synthetic(cfg, out_dir) -> list[Sample]:
    """Render the dataset and write it to ``out_dir`` in the on-disk layout."""
    from .io import save_dataset

    samples = synthesize(cfg)
    save_dataset(samples, out_dir, list(cfg.object_classes), list(cfg.affordance_classes))
    return samples
