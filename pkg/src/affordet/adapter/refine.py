"""Top-k selection, closed-loop refinement and the adapter losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..core import LOGIT_EPS, iou_matrix, logit
from ..detect import DetPredictions, decode_boxes
from .heads import AdapterRefinement

SMOOTH_L1_BETA = 1.0 / 9.0


@dataclass
class TopKSelection:
    batch_index: torch.Tensor  # K
    cell_index: torch.Tensor  # K, flat (level, row, col) index, -1 if none
    class_id: torch.Tensor  # K
    score: torch.Tensor  # K
    boxes: torch.Tensor  # K x 4, pixels, clamped

    def __len__(self) -> int:
        return int(self.batch_index.numel())


def select_topk(preds: DetPredictions, k: int, centers, strides, image_size: float) -> TopKSelection:
    """The k highest max-class sigmoid scores per image, ties broken by scan order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    with torch.no_grad():
        probs = torch.sigmoid(preds.cls_logits)
        score, cls = probs.max(-1)  # N x M
        order = torch.sort(score, dim=1, descending=True, stable=True).indices[:, :k]
        n, kk = order.shape
        bidx = torch.arange(n)[:, None].expand(n, kk).reshape(-1)
        cell = order.reshape(-1)
        dists = preds.box_dists[bidx, cell]
        boxes = decode_boxes(dists, np.asarray(centers)[cell.numpy()], np.asarray(strides)[cell.numpy()], image_size)
    return TopKSelection(bidx, cell, cls[bidx, cell], score[bidx, cell], boxes)


def refine(cls_k, boxes_k, aff_logits, refinement: AdapterRefinement, cfg, image_size: float, eps: float = LOGIT_EPS):
    """Apply class priors, box offsets and gates; returns refined (cls, boxes, aff).

    ``cls_k`` / ``boxes_k`` are the K selected rows; the gate map must share
    the resolution of ``aff_logits``.
    """
    cls = cls_k + cfg.alpha * refinement.cls_priors
    wh = (boxes_k[:, 2:] - boxes_k[:, :2]).repeat(1, 2)
    moved = (boxes_k + cfg.beta * refinement.box_offsets * wh).clamp(0, image_size)
    boxes = torch.cat([torch.minimum(moved[:, :2], moved[:, 2:]), torch.maximum(moved[:, :2], moved[:, 2:])], 1)
    aff = aff_logits + cfg.gamma * logit(refinement.gates, eps)
    return cls, boxes, aff


def match_entries(sel_boxes: np.ndarray, batch_index: np.ndarray, gt_classes, gt_boxes, threshold: float = 0.3):
    """Highest-IoU GT per entry (IoU >= threshold) -> (target class or -1, target box, gt index)."""
    k = len(sel_boxes)
    tcls = np.full(k, -1, dtype=np.int64)
    tbox = np.zeros((k, 4), dtype=np.float64)
    gidx = np.full(k, -1, dtype=np.int64)
    for n in np.unique(batch_index):
        rows = np.flatnonzero(batch_index == n)
        gb = np.asarray(gt_boxes[n], dtype=np.float64).reshape(-1, 4)
        if not len(gb):
            continue
        ious = iou_matrix(sel_boxes[rows], gb)
        best = ious.argmax(1)
        ok = ious[np.arange(len(rows)), best] >= threshold
        tcls[rows[ok]] = np.asarray(gt_classes[n], dtype=np.int64)[best[ok]]
        tbox[rows[ok]] = gb[best[ok]]
        gidx[rows[ok]] = best[ok]
    return tcls, tbox, gidx


def smooth_l1(x: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax**2 / beta, ax - 0.5 * beta)


def box_region_mask(boxes, batch_index, num_images: int, out_hw, scale: float) -> torch.Tensor:
    """N x 1 x h x w mask of cells whose centers fall inside any given box."""
    h, w = out_hw
    mask = torch.zeros(num_images, 1, h, w, dtype=torch.bool)
    px = (torch.arange(w, dtype=torch.float64) + 0.5) * scale
    py = (torch.arange(h, dtype=torch.float64) + 0.5) * scale
    for b, n in zip(torch.as_tensor(boxes, dtype=torch.float64), torch.as_tensor(batch_index)):
        inx = (px >= b[0]) & (px < b[2])
        iny = (py >= b[1]) & (py < b[3])
        mask[int(n), 0] |= iny[:, None] & inx[None, :]
    return mask


def adapter_losses(cls, boxes, aff, target_cls, target_boxes, aff_target, region, image_size: float):
    """(L_cls_priors, L_box_offsets, L_aff_gates) on refined predictions.

    Class BCE averages over all K x C entries (unmatched rows target zeros);
    box smooth-L1 sums the 4 normalized coordinates and averages over
    matched rows; gate BCE averages over ``region`` cells.
    """
    target_cls = torch.as_tensor(target_cls)
    onehot = torch.zeros_like(cls)
    matched = target_cls >= 0
    if matched.any():
        onehot[matched] = F.one_hot(target_cls[matched], cls.shape[1]).to(cls.dtype)
    l_cls = F.binary_cross_entropy_with_logits(cls, onehot) if cls.numel() else aff.sum() * 0
    if matched.any():
        diff = (boxes[matched] - torch.as_tensor(target_boxes, dtype=boxes.dtype)[matched]) / image_size
        l_box = smooth_l1(diff).sum(1).mean()
    else:
        l_box = boxes.sum() * 0
    per = F.binary_cross_entropy_with_logits(aff, aff_target, reduction="none")
    m = region.to(per.dtype).expand_as(per)
    l_aff = (per * m).sum() / m.sum() if m.sum() > 0 else per.sum() * 0
    return l_cls, l_box, l_aff
