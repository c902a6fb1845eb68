"""Detection (mAP / AR) and heatmap (KLD / SIM / NSS) evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import iou_matrix

KLD_EPS = 1e-12
IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class EvalReport:
    map: float
    map50: float
    ar: float
    kld: float
    sim: float
    nss: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _as_dist(x: np.ndarray, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64) + eps
    return x / x.sum()


def kld(pred, gt, eps: float = KLD_EPS) -> float:
    """KL(gt || pred) between the two maps normalized to unit mass."""
    p = _as_dist(gt, eps)
    q = _as_dist(pred, eps)
    return float(np.sum(p * np.log(p / q)))


def sim(pred, gt) -> float:
    """Histogram intersection of the unit-mass maps."""
    p = np.asarray(gt, dtype=np.float64)
    q = np.asarray(pred, dtype=np.float64)
    ps, qs = p.sum(), q.sum()
    p = p / ps if ps > 0 else np.full_like(p, 1.0 / p.size)
    q = q / qs if qs > 0 else np.full_like(q, 1.0 / q.size)
    return float(np.minimum(p, q).sum())


def nss(pred, gt, threshold: float = 0.5) -> float | None:
    """Mean z-scored prediction on the fixation set {gt >= threshold * max(gt)}.

    Returns None when the fixation set is empty (an all-zero ground truth).
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    top = gt.max()
    if top <= 0:
        return None
    fix = gt >= threshold * top
    std = pred.std()
    if std == 0:
        return 0.0
    z = (pred - pred.mean()) / std
    return float(z[fix].mean())


def _match_image(det_boxes, det_scores, gt_boxes, thr):
    """COCO-style greedy matching inside one image for one class.

    Detections are visited in descending score; each takes the unmatched GT
    with the highest IoU >= thr.  Returns a TP flag per detection.
    """
    order = np.argsort(-det_scores, kind="mergesort")
    tp = np.zeros(len(det_scores), dtype=bool)
    if not len(gt_boxes):
        return order, tp
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for rank, d in enumerate(order):
        best, best_iou = -1, thr
        for g in range(len(gt_boxes)):
            if taken[g]:
                continue
            if ious[d, g] >= best_iou:
                best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            tp[rank] = True
    return order, tp


def _ap_from_matches(scores: np.ndarray, tps: np.ndarray, num_gt: int) -> tuple[float, float]:
    if len(scores) == 0:
        return 0.0, 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(~tps[order])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # precision envelope: non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = [float(precision[i]) if i < len(precision) else 0.0 for i in idx]
    return math.fsum(interp) / len(RECALL_POINTS), float(recall[-1])


def evaluate_detections(all_preds, all_gts, num_classes: int | None = None, iou_thresholds=IOU_THRESHOLDS):
    """COCO-style (map, map50, ar) over a dataset.

    ``all_preds`` is per image a list of Detection; ``all_gts`` per image a
    list of (class_id, box).  Classes without ground truth anywhere are left
    out of the means.
    """
    if len(all_preds) != len(all_gts):
        raise ValueError("need one prediction list per image")
    if num_classes is None:
        ids = [c for g in all_gts for c, _ in g] + [d.class_id for p in all_preds for d in p]
        num_classes = max(ids) + 1 if ids else 0
    aps: dict[float, list[float]] = {t: [] for t in iou_thresholds}
    recalls: list[float] = []
    for c in range(num_classes):
        gts = [np.asarray([b for k, b in g if k == c], dtype=np.float64).reshape(-1, 4) for g in all_gts]
        num_gt = sum(len(g) for g in gts)
        if num_gt == 0:
            continue
        dets = []
        for p in all_preds:
            mine = sorted((d for d in p if d.class_id == c), key=lambda d: -d.score)[:MAX_DETS]
            dets.append(mine)
        for t in iou_thresholds:
            all_scores, all_tp = [], []
            for img_dets, gt_boxes in zip(dets, gts):
                if not img_dets:
                    continue
                b = np.asarray([d.box for d in img_dets], dtype=np.float64)
                s = np.asarray([d.score for d in img_dets], dtype=np.float64)
                order, tp = _match_image(b, s, gt_boxes, t)
                all_scores.append(s[order])
                all_tp.append(tp)
            scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
            tps = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
            ap, rec = _ap_from_matches(scores, tps, num_gt)
            aps[t].append(ap)
            recalls.append(rec)
    if not recalls:
        return 0.0, 0.0, 0.0
    flat = [a for t in iou_thresholds for a in aps[t]]
    map_ = math.fsum(flat) / len(flat)
    map50 = math.fsum(aps[iou_thresholds[0]]) / len(aps[iou_thresholds[0]])
    ar = math.fsum(recalls) / len(recalls)
    return map_, map50, ar


def heatmap_scores(pred_map: np.ndarray, gt_map: np.ndarray) -> dict[str, float] | None:
    """Metrics averaged over affordance channels present in the ground truth."""
    vals = {"kld": [], "sim": [], "nss": []}
    for a in range(gt_map.shape[-1]):
        g = gt_map[..., a]
        if not g.max() > 0:
            continue
        p = pred_map[..., a]
        vals["kld"].append(kld(p, g))
        vals["sim"].append(sim(p, g))
        n = nss(p, g)
        if n is not None:
            vals["nss"].append(n)
    if not vals["kld"]:
        return None
    return {k: math.fsum(v) / len(v) for k, v in vals.items() if v}


def evaluate(detections, maps, samples, num_classes: int, per_image: list | None = None) -> EvalReport:
    """Aggregate detection and heatmap metrics into an :class:`EvalReport`.

    ``detections`` and ``maps`` are aligned with ``samples``; maps are
    H x W x A arrays at the sample resolution.  If ``per_image`` is a list it
    receives one dict per image.
    """
    gts = [list(zip(s.classes, s.boxes)) for s in samples]
    map_, map50, ar = evaluate_detections(detections, gts, num_classes)
    acc = {"kld": [], "sim": [], "nss": []}
    for s, dets, m in sorted(zip(samples, detections, maps), key=lambda t: t[0].id):
        scores = heatmap_scores(m, s.affordance)
        row = {"id": s.id, "num_gt": len(s.classes), "num_det": len(dets)}
        if scores is not None:
            for k, v in scores.items():
                acc[k].append(v)
            row.update(scores)
        if per_image is not None:
            per_image.append(row)

    def mean(v):
        return math.fsum(v) / len(v) if v else float("nan")

    return EvalReport(map=map_, map50=map50, ar=ar, kld=mean(acc["kld"]), sim=mean(acc["sim"]), nss=mean(acc["nss"]))


def write_per_image_csv(rows, path) -> None:
    cols = ["id", "num_gt", "num_det", "kld", "sim", "nss"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in cols})
