"""Slow loop-based reference implementations used as test oracles."""

import math

import numpy as np

EPS = 1e-12


def kld_ref(pred, gt):
    p = [[float(v) + EPS for v in row] for row in gt]
    q = [[float(v) + EPS for v in row] for row in pred]
    sp = sum(sum(r) for r in p)
    sq = sum(sum(r) for r in q)
    total = 0.0
    for i in range(len(p)):
        for j in range(len(p[0])):
            a, b = p[i][j] / sp, q[i][j] / sq
            total += a * math.log(a / b)
    return total


def sim_ref(pred, gt):
    sp = sum(float(v) for row in gt for v in row)
    sq = sum(float(v) for row in pred for v in row)
    return sum(min(float(gt[i][j]) / sp, float(pred[i][j]) / sq) for i in range(len(gt)) for j in range(len(gt[0])))


def nss_ref(pred, gt):
    vals = [float(v) for row in pred for v in row]
    g = [float(v) for row in gt for v in row]
    mu = sum(vals) / len(vals)
    sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
    top = max(g)
    fix = [i for i, v in enumerate(g) if v >= 0.5 * top]
    if sd == 0:
        return 0.0
    return sum((vals[i] - mu) / sd for i in fix) / len(fix)


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def coco_ref(preds, gts, num_classes, max_dets=100):
    """Greedy COCO matching with 101-point interpolation, written from scratch.

    ``preds``: per image a list of (class, box, score); ``gts``: per image a
    list of (class, box).  A detection takes the highest-IoU free GT, later
    GTs winning exact IoU ties.
    """
    thresholds = [round(0.5 + 0.05 * i, 2) for i in range(10)]
    points = np.linspace(0.0, 1.0, 101)
    aps = {t: [] for t in thresholds}
    recalls = []
    for c in range(num_classes):
        gt_c = [[b for k, b in g if k == c] for g in gts]
        n_gt = sum(len(g) for g in gt_c)
        if n_gt == 0:
            continue
        for t in thresholds:
            pooled = []
            for img, dets in enumerate(preds):
                mine = sorted([d for d in dets if d[0] == c], key=lambda d: -d[2])[:max_dets]
                taken = [False] * len(gt_c[img])
                for _, box, score in mine:
                    best, best_iou = None, None
                    for gi, gb in enumerate(gt_c[img]):
                        if taken[gi]:
                            continue
                        v = _iou(box, gb)
                        if v >= t and (best_iou is None or v >= best_iou):
                            best, best_iou = gi, v
                    if best is not None:
                        taken[best] = True
                    pooled.append((score, best is not None))
            pooled.sort(key=lambda x: -x[0])
            tp = fp = 0
            prec, rec = [], []
            for _, hit in pooled:
                tp += hit
                fp += not hit
                prec.append(tp / (tp + fp))
                rec.append(tp / n_gt)
            interp = []
            for r in points:
                cands = [p for p, q in zip(prec, rec) if q >= r]
                interp.append(max(cands) if cands else 0.0)
            aps[t].append(math.fsum(interp) / 101)
            recalls.append(rec[-1] if rec else 0.0)
    if not recalls:
        return 0.0, 0.0, 0.0
    flat = [a for t in thresholds for a in aps[t]]
    return math.fsum(flat) / len(flat), math.fsum(aps[0.5]) / len(aps[0.5]), math.fsum(recalls) / len(recalls)
