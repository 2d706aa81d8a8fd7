"""Slow, independent reference implementations used as test oracles.

Nothing here imports geometry or evaluation code from the package.
"""

import numpy as np


def box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def nms(boxes, scores, thr):
    """O(n^2) greedy suppression; equal scores keep the earlier index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(box_iou(boxes[i], boxes[k]) < thr for k in keep):
            keep.append(i)
    return keep


def greedy_matches(ranked, truths, thr):
    """ranked: list of (key, image, box) in score order. Returns keys of true positives."""
    used = {img: [False] * len(t) for img, t in enumerate(truths)}
    matched = []
    for key, img, box in ranked:
        best, best_iou = None, -1.0
        for j, g in enumerate(truths[img]):
            v = box_iou(box, g)
            if not used[img][j] and v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= thr:
            used[img][best] = True
            matched.append(key)
    return matched


def ranked_detections(detections):
    flat = [(s, img, k, box) for img, dets in enumerate(detections) for k, (box, s) in enumerate(dets)]
    flat.sort(key=lambda f: (-f[0], f[1], f[2]))
    return [((img, k), img, box) for _, img, k, box in flat]


def average_precision(detections, truths, thr, recall_points=None):
    """detections: per image list of (box, score); truths: per image list of boxes.

    Every score cutoff is evaluated from scratch: the top-k detections are
    matched greedily and give one (recall, precision) point. Precision at a
    recall level is the best precision of any cutoff reaching it.
    """
    if recall_points is None:
        recall_points = np.linspace(0.0, 1.0, 101)
    flat = ranked_detections(detections)
    n_truth = sum(len(t) for t in truths)
    if n_truth == 0 or not flat:
        return 0.0
    curve = []
    for k in range(1, len(flat) + 1):
        tp = len(greedy_matches(flat[:k], truths, thr))
        curve.append((tp / n_truth, tp / k))
    total = 0.0
    for r in recall_points:
        total += max((p for rec, p in curve if rec >= r), default=0.0)
    return total / len(recall_points)


def random_ap_fixture(rng, n_images=None, max_dets=10, max_truths=5):
    """Small multi-image fixture with detections jittered around truths plus clutter."""
    n_images = n_images or int(rng.integers(1, 4))
    budget_d, budget_t = int(rng.integers(0, max_dets + 1)), int(rng.integers(0, max_truths + 1))
    dets = [[] for _ in range(n_images)]
    truths = [[] for _ in range(n_images)]
    for _ in range(budget_t):
        img = int(rng.integers(n_images))
        x, y = rng.uniform(0, 40, 2)
        w, h = rng.uniform(4, 12, 2)
        truths[img].append((x, y, x + w, y + h))
    for _ in range(budget_d):
        img = int(rng.integers(n_images))
        if truths[img] and rng.random() < 0.7:
            g = truths[img][int(rng.integers(len(truths[img])))]
            j = rng.normal(0, 1.5, 4)
            box = (g[0] + j[0], g[1] + j[1], max(g[2] + j[2], g[0] + j[0] + 1), max(g[3] + j[3], g[1] + j[1] + 1))
        else:
            x, y = rng.uniform(0, 40, 2)
            box = (x, y, x + rng.uniform(2, 12), y + rng.uniform(2, 12))
        dets[img].append((tuple(map(float, box)), float(rng.uniform(0, 1))))
    return dets, truths
