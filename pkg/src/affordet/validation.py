"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .core import Box, Sample


def check_image(image, size: int | None = None) -> np.ndarray:
    """Return ``image`` as float32 H x W x 3 in [0, 1]; uint8 input is rescaled."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be H x W x 3, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("float images must lie in [0, 1]")
    if size is not None and arr.shape[:2] != (size, size):
        raise ValueError(f"image must be {size}x{size}, got {arr.shape[1]}x{arr.shape[0]}")
    return arr


def check_images(images, size: int | None = None) -> np.ndarray:
    """Stack a batch (N x H x W x 3 array or list of images) after checking each."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = images[None]
    return np.stack([check_image(im, size) for im in images])


def check_sample(sample: Sample, num_classes: int, num_affordances: int) -> Sample:
    if not isinstance(sample, Sample):
        raise TypeError(f"expected Sample, got {type(sample).__name__}")
    check_image(sample.image)
    if len(sample.classes) != len(sample.boxes):
        raise ValueError(f"sample {sample.id}: {len(sample.classes)} classes vs {len(sample.boxes)} boxes")
    for c, b in zip(sample.classes, sample.boxes):
        if not 0 <= c < num_classes:
            raise ValueError(f"sample {sample.id}: class id {c} outside [0, {num_classes})")
        b = Box(*b)
        if not (b.is_valid() and b.x1 >= 0 and b.y1 >= 0 and b.x2 <= sample.width and b.y2 <= sample.height):
            raise ValueError(f"sample {sample.id}: box {tuple(b)} invalid or outside the image")
    if sample.affordance is not None:
        shape = (sample.height, sample.width, num_affordances)
        if sample.affordance.shape != shape:
            raise ValueError(f"sample {sample.id}: affordance map {sample.affordance.shape} != {shape}")
    return sample


def check_samples(samples, num_classes: int, num_affordances: int, require_affordance: bool = True) -> list[Sample]:
    samples = list(samples)
    for s in samples:
        check_sample(s, num_classes, num_affordances)
        if require_affordance and s.affordance is None:
            raise ValueError(f"sample {s.id}: missing affordance map")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")
    return samples
