"""The dual-branch affordance detector with its optional refinement adapter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .adapter import Adapter, TopKSelection, adapter_losses, match_entries, prompt_tokens, refine, select_topk
from .adapter.refine import box_region_mask
from .afford import WORKING_STRIDE, AffordanceBranch, AffordanceLogits, area_downsample, upsample_probs
from .backbone import Backbone
from .core import Box, Detection
from .detect import DetectHead, DetPredictions, assign_targets, cell_centers, decode_boxes, nms_arrays, to_detections

EVAL_NMS = dict(iou_thresh=0.65, score_thresh=0.05, max_out=100)


@dataclass
class Batch:
    """Tensors for a list of samples at the model's input size."""

    images: torch.Tensor  # N x 3 x S x S
    classes: list[list[int]]
    boxes: list[np.ndarray]
    affordance: torch.Tensor | None  # N x A x S x S
    aff_target: torch.Tensor | None  # N x A x S/8 x S/8

    @classmethod
    def from_samples(cls, samples) -> "Batch":
        images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous().float()
        aff = None
        target = None
        if all(s.affordance is not None for s in samples):
            aff = torch.from_numpy(np.stack([s.affordance for s in samples])).permute(0, 3, 1, 2).contiguous().float()
            target = area_downsample(aff, WORKING_STRIDE)
        return cls(images, [list(s.classes) for s in samples], [s.boxes_array() for s in samples], aff, target)


class AffordanceModel(nn.Module):
    def __init__(self, model_cfg, adapter_cfg, class_names, affordance_names):
        super().__init__()
        model_cfg.validate()
        self.model_cfg = model_cfg
        self.adapter_cfg = adapter_cfg
        self.class_names = list(class_names)
        self.affordance_names = list(affordance_names)
        self.input_size = model_cfg.input_size
        self.backbone = Backbone(model_cfg)
        self.det_head = DetectHead(self.backbone.out_channels, len(class_names), model_cfg.num_bins, model_cfg.head_channels, model_cfg.cls_prior)
        self.aff_branch = AffordanceBranch(self.backbone.out_channels, len(affordance_names), model_cfg.aff_channels, model_cfg.aff_hidden)
        self.adapter = Adapter(adapter_cfg, class_names, affordance_names) if adapter_cfg.enabled else None
        self.centers, self.strides = cell_centers(self.input_size)

    @property
    def working_hw(self) -> tuple[int, int]:
        n = -(-self.input_size // WORKING_STRIDE)
        return n, n

    def branch_parameters(self) -> list[nn.Parameter]:
        mods = (self.backbone, self.det_head, self.aff_branch)
        return [p for m in mods for p in m.parameters()]

    def forward(self, images: torch.Tensor) -> tuple[DetPredictions, AffordanceLogits]:
        levels = self.backbone(images)
        return self.det_head(levels), self.aff_branch(levels)

    def assign(self, batch: Batch):
        return [assign_targets(c, b, self.centers, self.strides, self.model_cfg.num_bins) for c, b in zip(batch.classes, batch.boxes)]

    # adapter -------------------------------------------------------------

    def _gt_selection(self, preds: DetPredictions, batch: Batch, assignments) -> tuple[TopKSelection, torch.Tensor]:
        """Entries built from ground truth; rows point at each GT's best assigned cell."""
        k = self.adapter_cfg.k
        bidx, cells, cls_ids, boxes = [], [], [], []
        with torch.no_grad():
            probs = torch.sigmoid(preds.cls_logits)
        for n, (classes, gtb, asg) in enumerate(zip(batch.classes, batch.boxes, assignments)):
            for g in range(min(len(classes), k)):
                owned = np.flatnonzero(asg.gt_index == g)
                if len(owned):
                    cell = int(owned[int(probs[n, owned, classes[g]].argmax())])
                else:
                    cx, cy = (gtb[g, 0] + gtb[g, 2]) / 2, (gtb[g, 1] + gtb[g, 3]) / 2
                    cell = int(((self.centers[:, 0] - cx) ** 2 + (self.centers[:, 1] - cy) ** 2).argmin())
                bidx.append(n)
                cells.append(cell)
                cls_ids.append(classes[g])
                boxes.append(gtb[g])
        bidx_t = torch.tensor(bidx, dtype=torch.long)
        cells_t = torch.tensor(cells, dtype=torch.long)
        with torch.no_grad():
            prelim = decode_boxes(preds.box_dists[bidx_t, cells_t], self.centers[cells_t.numpy()].reshape(-1, 2),
                                  self.strides[cells_t.numpy()], self.input_size) if len(cells) else torch.zeros(0, 4)
        sel = TopKSelection(
            bidx_t,
            cells_t,
            torch.tensor(cls_ids, dtype=torch.long),
            torch.ones(len(bidx)),
            torch.as_tensor(np.asarray(boxes, dtype=np.float32).reshape(-1, 4)),
        )
        return sel, prelim

    def run_adapter(self, images, preds: DetPredictions, aff: AffordanceLogits, gt: tuple[Batch, list] | None = None):
        """One adapter pass; returns dict with selection, refined rows and maps.

        If ``gt`` is given, adapter inputs come from the ground truth (warm-up).
        """
        cfg = self.adapter_cfg
        n = images.shape[0]
        if gt is not None:
            batch, assignments = gt
            sel, prelim_boxes = self._gt_selection(preds, batch, assignments)
            maps = batch.affordance
        else:
            sel = select_topk(preds, cfg.k, self.centers, self.strides, self.input_size)
            prelim_boxes = sel.boxes
            with torch.no_grad():
                maps = upsample_probs(aff.logits, self.input_size)
        tokens = [
            prompt_tokens(self.adapter.lm, int(c), Box(*b.tolist()), self.class_names, self.affordance_names, self.input_size)
            for c, b in zip(sel.class_id, sel.boxes)
        ]
        h = self.adapter.encode(images, maps, sel.batch_index, sel.boxes, tokens)
        ref = self.adapter.heads(h, sel.batch_index, sel.boxes, n, self.working_hw, WORKING_STRIDE)
        cls_k = preds.cls_logits[sel.batch_index, sel.cell_index].detach()
        r_cls, r_box, r_aff = refine(cls_k, prelim_boxes.detach(), aff.logits.detach(), ref, cfg, self.input_size)
        return {"selection": sel, "prelim_boxes": prelim_boxes, "refinement": ref, "cls": r_cls, "boxes": r_box, "aff_logits": r_aff}

    def adapter_loss_terms(self, out, batch: Batch):
        sel = out["selection"]
        bidx = sel.batch_index.numpy()
        tcls, tbox, _ = match_entries(out["prelim_boxes"].detach().double().numpy(), bidx, batch.classes, batch.boxes, self.adapter_cfg.match_iou)
        matched = tcls >= 0
        region = box_region_mask(tbox[matched], bidx[matched], len(batch.classes), self.working_hw, WORKING_STRIDE)
        return adapter_losses(out["cls"], out["boxes"], out["aff_logits"], tcls, tbox, batch.aff_target, region, self.input_size)

    # inference -----------------------------------------------------------

    @torch.no_grad()
    def predict_raw(self, images: torch.Tensor, mode: str = "light"):
        """Per-cell scores/labels/boxes after optional refinement, plus full-res maps."""
        if mode not in ("light", "full"):
            raise ValueError(f"mode must be 'light' or 'full', got {mode!r}")
        preds, aff = self(images)
        cls = preds.cls_logits
        boxes = decode_boxes(preds.box_dists, self.centers, self.strides, self.input_size)
        aff_logits = aff.logits
        if mode == "full" and self.adapter is not None:
            out = self.run_adapter(images, preds, aff)
            sel = out["selection"]
            cls = cls.clone()
            boxes = boxes.clone()
            cls[sel.batch_index, sel.cell_index] = out["cls"]
            boxes[sel.batch_index, sel.cell_index] = out["boxes"].to(boxes.dtype)
            aff_logits = out["aff_logits"]
        scores, labels = torch.sigmoid(cls).max(-1)
        maps = upsample_probs(aff_logits, self.input_size)
        return scores, labels, boxes, maps

    @torch.no_grad()
    def predict(self, images: torch.Tensor, mode: str = "light", nms_cfg: dict | None = None):
        """NMS-processed detections per image and N x H x W x A affordance maps."""
        nms_cfg = {**EVAL_NMS, **(nms_cfg or {})}
        scores, labels, boxes, maps = self.predict_raw(images, mode)
        dets: list[list[Detection]] = []
        for s, l, b in zip(scores.double().numpy(), labels.numpy(), boxes.double().numpy()):
            keep = nms_arrays(b, s, l, **nms_cfg)
            dets.append(to_detections(b[keep], s[keep], l[keep]))
        return dets, maps.permute(0, 2, 3, 1).numpy()
