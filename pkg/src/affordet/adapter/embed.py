"""Visual and text inputs for the adapter's language model."""

from __future__ import annotations

import torch

from ..core import Box

PROMPT_TEMPLATE = "What can the {name} object at ({cx:.2f}, {cy:.2f}, {w:.2f}, {h:.2f}) be used for?"


def roi_align(features: torch.Tensor, batch_index: torch.Tensor, boxes: torch.Tensor, pool: int, mask_outside: bool = True) -> torch.Tensor:
    """Bilinear ROIAlign with one sample per bin: N x C x H x W -> K x C x pool x pool.

    Bin centers follow the half-pixel convention, so a box covering the whole
    map reproduces a plain bilinear resize.  With ``mask_outside`` pixels
    whose centers fall outside the box contribute zero.  Zero-area boxes take
    the nearest pixel to the box center.
    """
    n, c, h, w = features.shape
    k = boxes.shape[0]
    if k == 0:
        return features.new_zeros(0, c, pool, pool)
    boxes = boxes.to(features.dtype)
    x1, y1, x2, y2 = boxes.unbind(1)
    steps = (torch.arange(pool, dtype=features.dtype) + 0.5) / pool
    sx = (x1[:, None] + steps[None] * (x2 - x1)[:, None] - 0.5).clamp(0, w - 1)
    sy = (y1[:, None] + steps[None] * (y2 - y1)[:, None] - 0.5).clamp(0, h - 1)
    x0 = sx.floor().long()
    y0 = sy.floor().long()
    xn = (x0 + 1).clamp(max=w - 1)
    yn = (y0 + 1).clamp(max=h - 1)
    lx = (sx - x0.to(sx.dtype))[:, None, :]
    ly = (sy - y0.to(sy.dtype))[:, :, None]
    b = batch_index.long()[:, None, None]

    def tap(yi, xi):
        vals = features[b, :, yi[:, :, None], xi[:, None, :]]  # K x p x p x C
        if mask_outside:
            px = xi.to(features.dtype) + 0.5
            py = yi.to(features.dtype) + 0.5
            inx = (px >= x1[:, None]) & (px <= x2[:, None])
            iny = (py >= y1[:, None]) & (py <= y2[:, None])
            vals = vals * (iny[:, :, None] & inx[:, None, :])[..., None].to(vals.dtype)
        return vals

    out = (
        tap(y0, x0) * ((1 - ly) * (1 - lx))[..., None]
        + tap(y0, xn) * ((1 - ly) * lx)[..., None]
        + tap(yn, x0) * (ly * (1 - lx))[..., None]
        + tap(yn, xn) * (ly * lx)[..., None]
    ).permute(0, 3, 1, 2)
    degenerate = (x2 <= x1) | (y2 <= y1)
    if degenerate.any():
        cx = ((x1 + x2) / 2).floor().long().clamp(0, w - 1)
        cy = ((y1 + y2) / 2).floor().long().clamp(0, h - 1)
        nearest = features[batch_index.long(), :, cy, cx]  # K x C
        out = torch.where(degenerate[:, None, None, None], nearest[:, :, None, None].expand_as(out), out)
    return out


def build_visual_embedding(images: torch.Tensor, aff_maps: torch.Tensor, batch_index, boxes, pool: int, proj) -> torch.Tensor:
    """Masked ROI crops of image + affordance map, flattened and projected.

    ``images`` is N x 3 x H x W and ``aff_maps`` N x A x H x W; both are
    detached so gradients reach only ``proj``.
    """
    feats = torch.cat([images.detach(), aff_maps.detach()], 1)
    pooled = roi_align(feats, batch_index, boxes.detach(), pool)
    return proj(pooled.flatten(1))


def build_prompt(class_id: int, box: Box, class_names, affordance_names, image_size) -> str:
    if not 0 <= class_id < len(class_names):
        raise ValueError(f"unknown class id {class_id}")
    if isinstance(image_size, (int, float)):
        width = height = float(image_size)
    else:
        width, height = map(float, image_size)
    x1, y1, x2, y2 = map(float, box)
    question = PROMPT_TEMPLATE.format(
        name=class_names[class_id],
        cx=(x1 + x2) / 2 / width,
        cy=(y1 + y2) / 2 / height,
        w=(x2 - x1) / width,
        h=(y2 - y1) / height,
    )
    return f"{question} Affordances: {', '.join(affordance_names)}."


def prompt_tokens(lm, class_id: int, box: Box, class_names, affordance_names, image_size, reserved: int = 1) -> list[int]:
    """Token ids for one entry, dropping affordance keywords from the tail to fit.

    ``reserved`` positions (the visual token) are subtracted from the LM's
    maximum length; the question itself is never truncated.
    """
    names = list(affordance_names)
    limit = lm.max_length - reserved
    while True:
        ids = lm.tokenize(build_prompt(class_id, box, class_names, names, image_size))
        if len(ids) <= limit or not names:
            break
        names.pop()
    if len(ids) > limit:
        raise ValueError(f"question alone needs {len(ids)} tokens, limit is {limit}")
    return ids
