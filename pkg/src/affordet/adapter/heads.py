"""Adapter module: visual projection, LoRA language model, and refinement heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..core import LOGIT_EPS
from .embed import build_visual_embedding
from .lm import TinyLM, Tokenizer


@dataclass
class AdapterRefinement:
    cls_priors: torch.Tensor  # K x C logits
    box_offsets: torch.Tensor  # K x 4, fractions of box width/height in [-1, 1]
    gates: torch.Tensor  # N x A x h x w in [eps, 1 - eps]


def gate_map(patches, batch_index, boxes, num_images: int, out_hw, scale: float, gate_outside: float, eps: float = LOGIT_EPS):
    """Expand K x A x g x g gate patches into their boxes on an N x A x h x w map.

    Output cell (i, j) sits at pixel ((j + 0.5) * scale, (i + 0.5) * scale).
    Inside-box values are sampled bilinearly from the patch; overlapping
    entries combine by max and cells outside every box get ``gate_outside``.
    """
    k, a = patches.shape[:2]
    h, w = out_hw
    dtype = patches.dtype
    out = torch.full((num_images, a, h, w), float(gate_outside), dtype=dtype)
    if k == 0:
        return out.clamp(eps, 1 - eps)
    px = (torch.arange(w, dtype=dtype) + 0.5) * scale
    py = (torch.arange(h, dtype=dtype) + 0.5) * scale
    boxes = boxes.to(dtype)
    x1, y1, x2, y2 = (boxes[:, i, None] for i in range(4))
    bw = (x2 - x1).clamp(min=1e-6)
    bh = (y2 - y1).clamp(min=1e-6)
    gx = 2 * (px[None] - x1) / bw - 1  # K x w
    gy = 2 * (py[None] - y1) / bh - 1  # K x h
    grid = torch.stack([gx[:, None, :].expand(k, h, w), gy[:, :, None].expand(k, h, w)], -1)
    # interpolate the offset from neutral so a constant 0.5 patch stays exactly 0.5
    sampled = F.grid_sample(patches - 0.5, grid, mode="bilinear", padding_mode="border", align_corners=False) + 0.5
    inside = ((px[None] >= x1) & (px[None] < x2))[:, None, :] & ((py[None] >= y1) & (py[None] < y2))[:, :, None]
    neg = torch.full_like(sampled, float("-inf"))
    masked = torch.where(inside[:, None], sampled, neg)
    bidx = batch_index.long()
    for n in range(num_images):
        sel = bidx == n
        if not sel.any():
            continue
        best = masked[sel].amax(0)
        covered = inside[sel].any(0)
        out[n] = torch.where(covered[None], best, out[n])
    return out.clamp(eps, 1 - eps)


class Adapter(nn.Module):
    def __init__(self, cfg, class_names, affordance_names):
        super().__init__()
        self.cfg = cfg
        self.class_names = list(class_names)
        self.affordance_names = list(affordance_names)
        tok = Tokenizer.for_labels(class_names, affordance_names)
        self.lm = TinyLM(tok, cfg.lm_dim, cfg.lm_layers, cfg.lm_heads, cfg.lm_max_len, cfg.lm_seed)
        self.lm.add_lora(cfg.lora_rank, cfg.lora_scaling, cfg.lora_targets, seed=cfg.lm_seed + 1)
        c, a, d, g = len(class_names), len(affordance_names), cfg.lm_dim, cfg.gate_grid
        self.vis_proj = nn.Linear(cfg.pool * cfg.pool * (3 + a), d)
        self.cls_head = nn.Linear(d, c)
        self.box_head = nn.Linear(d, 4)
        self.aff_head = nn.Linear(d, g * g * a)
        gen = torch.Generator().manual_seed(cfg.lm_seed + 2)
        with torch.no_grad():
            self.vis_proj.weight.normal_(0, self.vis_proj.in_features ** -0.5, generator=gen)
            self.vis_proj.bias.zero_()
            for head in (self.cls_head, self.box_head, self.aff_head):
                if cfg.zero_init_heads:
                    head.weight.zero_()
                else:
                    head.weight.normal_(0, 0.02, generator=gen)
                head.bias.zero_()

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def encode(self, images, aff_maps, batch_index, boxes, token_ids: list[list[int]]) -> torch.Tensor:
        """Hidden state at the last text position for each of K entries."""
        vis = build_visual_embedding(images, aff_maps, batch_index, boxes, self.cfg.pool, self.vis_proj)
        k = vis.shape[0]
        lengths = torch.tensor([len(t) for t in token_ids], dtype=torch.long)
        t_max = int(lengths.max()) if k else 0
        ids = torch.zeros(k, t_max, dtype=torch.long)
        for i, t in enumerate(token_ids):
            ids[i, : len(t)] = torch.tensor(t, dtype=torch.long)
        seq = torch.cat([vis[:, None, :], self.lm.embed(ids)], 1)
        hidden = self.lm(seq, lengths + 1)
        return hidden[torch.arange(k), lengths]

    def heads(self, h, batch_index, boxes, num_images: int, out_hw, scale: float) -> AdapterRefinement:
        a, g = len(self.affordance_names), self.cfg.gate_grid
        patches = torch.sigmoid(self.aff_head(h)).view(-1, a, g, g)
        gates = gate_map(patches, batch_index, boxes, num_images, out_hw, scale, self.cfg.gate_outside)
        return AdapterRefinement(self.cls_head(h), torch.tanh(self.box_head(h)), gates)
