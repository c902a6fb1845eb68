"""Segmentation-mask to keypoint-heatmap conversion.

Each connected component of an affordance mask becomes an isotropic Gaussian
at the component centroid with sigma = sigma_scale * sqrt(area / pi), i.e.
``sigma_scale`` times the radius of the equal-area disk.  Components of the
same category merge by pixelwise max.

Expected mapping for IIT-AFF style archives: one binary mask per image per
affordance category, stored as ``<id>_<aff>.pgm`` (nonzero = positive).
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


def seg_to_heatmap(mask: np.ndarray, sigma_scale: float = 0.5, split_components: bool = True) -> np.ndarray:
    mask = np.asarray(mask) > 0
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.float64)
    if not mask.any():
        log.warning("empty affordance mask skipped")
        return out
    if split_components:
        labels, n = ndimage.label(mask)
    else:
        labels, n = mask.astype(np.int32), 1
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    for comp in range(1, n + 1):
        rr, cc = np.nonzero(labels == comp)
        area = rr.size
        cy, cx = rr.mean(), cc.mean()
        sigma = sigma_scale * math.sqrt(area / math.pi)
        g = np.outer(np.exp(-((ys - cy) ** 2) / (2 * sigma**2)), np.exp(-((xs - cx) ** 2) / (2 * sigma**2)))
        np.maximum(out, g, out=out)
    return out


def masks_to_heatmaps(masks: np.ndarray, sigma_scale: float = 0.5) -> np.ndarray:
    """Convert an H x W x A stack of instance masks to an H x W x A heatmap."""
    masks = np.asarray(masks)
    return np.stack([seg_to_heatmap(masks[..., a], sigma_scale) for a in range(masks.shape[-1])], axis=-1)
