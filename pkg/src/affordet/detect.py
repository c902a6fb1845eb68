"""Anchor-free detection branch: head, label assignment, box decoding, loss, NMS.

Cells of all pyramid levels are flattened in (level, row, col) order.  Every
cell predicts one sigmoid logit per class and, for each box side, a
distribution over ``num_bins + 1`` integer distances measured in strides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import STRIDES, ConvBNAct, init_weights
from .core import Box, Detection


@dataclass
class DetPredictions:
    cls_logits: torch.Tensor  # N x M x C
    box_dists: torch.Tensor  # N x M x 4 x (R + 1)

    @property
    def num_bins(self) -> int:
        return self.box_dists.shape[-1] - 1


class DetectHead(nn.Module):
    def __init__(self, in_channels, num_classes: int, num_bins: int = 8, hidden: int = 64, cls_prior: float = 0.01):
        super().__init__()
        self.num_classes = num_classes
        self.num_bins = num_bins
        self.cls_branches = nn.ModuleList()
        self.box_branches = nn.ModuleList()
        for c in in_channels:
            self.cls_branches.append(nn.Sequential(ConvBNAct(c, hidden), nn.Conv2d(hidden, num_classes, 1)))
            self.box_branches.append(nn.Sequential(ConvBNAct(c, hidden), nn.Conv2d(hidden, 4 * (num_bins + 1), 1)))
        init_weights(self)
        prior_bias = -math.log((1 - cls_prior) / cls_prior)
        for branch in self.cls_branches:
            nn.init.constant_(branch[-1].bias, prior_bias)

    def forward(self, levels) -> DetPredictions:
        cls_out, box_out = [], []
        for x, cb, bb in zip(levels, self.cls_branches, self.box_branches):
            n = x.shape[0]
            cls_out.append(cb(x).flatten(2).transpose(1, 2))
            box_out.append(bb(x).flatten(2).transpose(1, 2).reshape(n, -1, 4, self.num_bins + 1))
        return DetPredictions(torch.cat(cls_out, 1), torch.cat(box_out, 1))


def cell_centers(input_size: int, strides=STRIDES) -> tuple[np.ndarray, np.ndarray]:
    """Cell centers (M x 2, pixels) and per-cell strides (M,) in scan order."""
    centers, cell_strides = [], []
    for s in strides:
        n = math.ceil(input_size / s)
        ys, xs = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        centers.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], 1))
        cell_strides.append(np.full(n * n, s, dtype=np.float64))
    return np.concatenate(centers).astype(np.float64), np.concatenate(cell_strides)


@dataclass
class Assignment:
    gt_index: np.ndarray  # (M,) matched GT or -1
    target_cls: np.ndarray  # (M,) class id or -1
    target_box: np.ndarray  # (M, 4) pixels, zeros for background
    target_dist: np.ndarray  # (M, 4) ltrb distances in strides, clipped to [0, R]

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0


def assign_targets(classes, boxes, centers: np.ndarray, strides: np.ndarray, num_bins: int = 8) -> Assignment:
    """Center-inside / smallest-area assignment with a nearest-cell fallback."""
    m = len(centers)
    gt_index = np.full(m, -1, dtype=np.int64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes):
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        cx, cy = centers[:, 0:1], centers[:, 1:2]
        inside = (cx > boxes[:, 0]) & (cx < boxes[:, 2]) & (cy > boxes[:, 1]) & (cy < boxes[:, 3])
        masked = np.where(inside, areas[None, :], np.inf)
        best = masked.argmin(1)
        has = np.isfinite(masked.min(1))
        gt_index[has] = best[has]
        finest = np.flatnonzero(strides == strides.min())
        for g in range(len(boxes)):
            if inside[:, g].any():
                continue
            gx, gy = (boxes[g, 0] + boxes[g, 2]) / 2, (boxes[g, 1] + boxes[g, 3]) / 2
            d2 = (centers[finest, 0] - gx) ** 2 + (centers[finest, 1] - gy) ** 2
            cell = finest[int(d2.argmin())]
            owner = gt_index[cell]
            if owner < 0 or areas[owner] > areas[g]:
                gt_index[cell] = g
    pos = gt_index >= 0
    target_cls = np.full(m, -1, dtype=np.int64)
    target_box = np.zeros((m, 4), dtype=np.float64)
    target_dist = np.zeros((m, 4), dtype=np.float64)
    if pos.any():
        target_cls[pos] = np.asarray(classes, dtype=np.int64)[gt_index[pos]]
        tb = boxes[gt_index[pos]]
        target_box[pos] = tb
        c = centers[pos]
        s = strides[pos, None]
        ltrb = np.stack([c[:, 0] - tb[:, 0], c[:, 1] - tb[:, 1], tb[:, 2] - c[:, 0], tb[:, 3] - c[:, 1]], 1) / s
        target_dist[pos] = np.clip(ltrb, 0, num_bins)
    return Assignment(gt_index, target_cls, target_box, target_dist)


def expected_distance(box_dists: torch.Tensor) -> torch.Tensor:
    """Expectation over distance bins: ... x 4 x (R + 1) -> ... x 4, in strides."""
    bins = torch.arange(box_dists.shape[-1], dtype=box_dists.dtype, device=box_dists.device)
    return (box_dists.softmax(-1) * bins).sum(-1)


def decode_boxes(box_dists: torch.Tensor, centers, strides, image_size: float | None = None) -> torch.Tensor:
    """Decode ... x M x 4 x (R+1) distributions into ... x M x 4 corner boxes."""
    centers = torch.as_tensor(centers, dtype=box_dists.dtype)
    strides = torch.as_tensor(strides, dtype=box_dists.dtype)
    d = expected_distance(box_dists) * strides[:, None]
    boxes = torch.cat([centers - d[..., :2], centers + d[..., 2:]], -1)
    if image_size is not None:
        boxes = boxes.clamp(0, image_size)
    return boxes


def bce_with_logits(logits: torch.Tensor, target: torch.Tensor, pos_weight: float = 1.0) -> torch.Tensor:
    """Elementwise BCE on logits (stable form)."""
    if pos_weight == 1.0:
        return F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    pw = torch.as_tensor(pos_weight, dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, target, reduction="none", pos_weight=pw)


def box_iou_pairs(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Row-wise IoU of two ... x 4 corner tensors."""
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    return inter / (area_a + area_b - inter + eps)


def dfl_loss(box_dists: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Distribution focal loss per side: P x (R + 1) logits, P targets in [0, R]."""
    num_bins = box_dists.shape[-1] - 1
    target = target.clamp(0, num_bins)
    left = target.floor().long().clamp(max=num_bins)
    right = (left + 1).clamp(max=num_bins)
    w_left = (left + 1).to(target.dtype) - target
    w_right = 1 - w_left
    logp = box_dists.log_softmax(-1)
    return -(w_left * logp.gather(-1, left[..., None])[..., 0] + w_right * logp.gather(-1, right[..., None])[..., 0])


def loss_det(preds: DetPredictions, targets: list[Assignment], centers, strides, gains=(1.0, 1.0, 1.0), cls_norm: str = "mean"):
    """Detection loss over a batch; returns (total, {"iou", "bce", "dfl"})."""
    cls_logits, box_dists = preds.cls_logits, preds.box_dists
    n, m, c = cls_logits.shape
    dtype = cls_logits.dtype
    pos = torch.from_numpy(np.stack([t.positive for t in targets]))
    tcls = torch.from_numpy(np.stack([t.target_cls for t in targets]))
    onehot = torch.zeros(n, m, c, dtype=dtype)
    if pos.any():
        onehot[pos] = F.one_hot(tcls[pos], c).to(dtype)
    bce = bce_with_logits(cls_logits, onehot)
    num_pos = int(pos.sum())
    if cls_norm == "positives":
        l_bce = bce.sum() / max(num_pos, 1)
    else:
        l_bce = bce.mean()
    if num_pos:
        tbox = torch.from_numpy(np.stack([t.target_box for t in targets])).to(dtype)[pos]
        tdist = torch.from_numpy(np.stack([t.target_dist for t in targets])).to(dtype)[pos]
        decoded = decode_boxes(box_dists, centers, strides)[pos]
        l_iou = (1 - box_iou_pairs(decoded, tbox)).mean()
        l_dfl = dfl_loss(box_dists[pos], tdist).mean()
    else:
        l_iou = cls_logits.sum() * 0
        l_dfl = cls_logits.sum() * 0
    g_iou, g_bce, g_dfl = gains
    total = g_iou * l_iou + g_bce * l_bce + g_dfl * l_dfl
    return total, {"iou": l_iou, "bce": l_bce, "dfl": l_dfl}


def nms(dets: list[Detection], iou_thresh: float = 0.65, score_thresh: float = 0.05, max_out: int = 100) -> list[Detection]:
    """Greedy class-wise non-maximum suppression."""
    kept: list[Detection] = []
    cand = sorted((d for d in dets if d.score >= score_thresh), key=lambda d: -d.score)
    by_class: dict[int, list[np.ndarray]] = {}
    for d in cand:
        b = np.asarray(d.box, dtype=np.float64)
        suppressed = False
        for k in by_class.get(d.class_id, ()):
            iw = min(b[2], k[2]) - max(b[0], k[0])
            ih = min(b[3], k[3]) - max(b[1], k[1])
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            union = (b[2] - b[0]) * (b[3] - b[1]) + (k[2] - k[0]) * (k[3] - k[1]) - inter
            if union > 0 and inter / union > iou_thresh:
                suppressed = True
                break
        if suppressed:
            continue
        kept.append(d)
        by_class.setdefault(d.class_id, []).append(b)
        if len(kept) >= max_out:
            break
    return kept


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_thresh=0.65, score_thresh=0.05, max_out=100) -> np.ndarray:
    """Vectorised variant of :func:`nms` returning kept indices (score order)."""
    keep_mask = scores >= score_thresh
    idx = np.flatnonzero(keep_mask)
    idx = idx[np.argsort(-scores[idx], kind="stable")]
    kept: list[int] = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    areas = np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)
    for i in idx:
        if suppressed[i]:
            continue
        kept.append(int(i))
        if len(kept) >= max_out:
            break
        rest = idx[(labels[idx] == labels[i]) & ~suppressed[idx]]
        iw = np.clip(np.minimum(boxes[rest, 2], boxes[i, 2]) - np.maximum(boxes[rest, 0], boxes[i, 0]), 0, None)
        ih = np.clip(np.minimum(boxes[rest, 3], boxes[i, 3]) - np.maximum(boxes[rest, 1], boxes[i, 1]), 0, None)
        inter = iw * ih
        union = areas[rest] + areas[i] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1), 0)
        suppressed[rest[ov > iou_thresh]] = True
        suppressed[i] = False
    return np.asarray(kept, dtype=np.int64)


def to_detections(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray) -> list[Detection]:
    return [Detection(Box(*map(float, b)), int(c), float(s)) for b, s, c in zip(boxes, scores, labels)]
