"""Slow, loop-only reference implementations of the detection metrics."""
import math

import numpy as np

from dfmarker.evaluation import DetRecord, GtRecord

RECALLS = [k / 100 for k in range(101)]


def box_of(corners):
    xs = [float(p[0]) for p in corners]
    ys = [float(p[1]) for p in corners]
    return (min(xs), min(ys), max(xs), max(ys))


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        inter = 0.0
    else:
        inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def greedy(gts, dets, thr, same_id):
    """Per image, score-descending; each detection takes the best free gt."""
    pairs, unmatched = [], []
    images = sorted({g.image_id for g in gts} | {d.image_id for d in dets})
    for img in images:
        g_img = [g for g in gts if g.image_id == img]
        d_img = sorted([d for d in dets if d.image_id == img], key=lambda d: -d.objectness)
        free = [True] * len(g_img)
        for d in d_img:
            best, best_iou = None, None
            for k, g in enumerate(g_img):
                if not free[k] or (same_id and g.marker_id != d.matched_id):
                    continue
                v = iou(tuple(d.box), box_of(g.corners))
                if v >= thr and (best_iou is None or v >= best_iou):
                    best, best_iou = k, v
            if best is None:
                unmatched.append(d)
            else:
                free[best] = False
                pairs.append((g_img[best], d))
    return pairs, unmatched


def ap(gts, dets, thr):
    accepted = [d for d in dets if d.matched_id is not None]
    if not gts:
        return -1.0
    pairs, _ = greedy(gts, accepted, thr, True)
    hits = {id(d) for _, d in pairs}
    ranked = sorted(accepted, key=lambda d: -d.objectness)
    points = []
    tp = 0
    for k, d in enumerate(ranked, 1):
        tp += id(d) in hits
        points.append((tp / len(gts), tp / k))
    q = []
    for r in RECALLS:
        cands = [p for rec, p in points if rec >= r]
        q.append(max(cands) if cands else 0.0)
    return math.fsum(q) / len(q)


def mean_ap(gts, dets):
    vals = [ap(gts, dets, t) for t in [round(0.5 + 0.05 * k, 2) for k in range(10)]]
    return math.fsum(vals) / len(vals)


def fp_rate(gts, dets):
    accepted = [d for d in dets if d.matched_id is not None]
    if not accepted:
        return 0.0
    pairs, unmatched = greedy(gts, accepted, 0.5, False)
    wrong = len(unmatched) + sum(1 for g, d in pairs if g.marker_id != d.matched_id)
    return wrong / len(accepted)


def corner_rmse(gts, dets):
    pairs, _ = greedy(gts, dets, 0.5, False)
    if not pairs:
        return -1.0
    total, n = [], 0
    for g, d in pairs:
        for (gx, gy), (dx, dy) in zip(g.corners, d.corners):
            total.append((float(dx) - float(gx)) ** 2 + (float(dy) - float(gy)) ** 2)
            n += 1
    return math.sqrt(math.fsum(total) / n)


def random_toy_set(seed, n_images=10, n_ids=8, n_bits=8):
    """Jittered true detections (some with wrong or no id) plus random clutter."""
    rng = np.random.default_rng(seed)
    gts, dets = [], []
    for img in range(n_images):
        for _ in range(int(rng.integers(0, 5))):
            x0, y0 = rng.uniform(0, 200, 2)
            w, h = rng.uniform(8, 120, 2)
            corners = np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]])
            corners = corners + rng.normal(0, 2, size=(4, 2))
            mid = int(rng.integers(n_ids))
            gts.append(GtRecord(img, mid, corners, rng.integers(0, 2, n_bits)))
            for _ in range(int(rng.integers(0, 3))):
                c = corners + rng.normal(0, rng.uniform(0.5, 15), size=(4, 2))
                u = rng.random()
                matched = mid if u < 0.7 else (int(rng.integers(n_ids)) if u < 0.85 else None)
                dets.append(DetRecord(img, np.array(box_of(c)), c, float(rng.random()),
                                      float(rng.random()), matched, rng.random(n_bits)))
        for _ in range(int(rng.integers(0, 3))):
            x0, y0 = rng.uniform(0, 200, 2)
            w, h = rng.uniform(8, 80, 2)
            c = np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]])
            matched = int(rng.integers(n_ids)) if rng.random() < 0.6 else None
            dets.append(DetRecord(img, np.array(box_of(c)), c, float(rng.random()),
                                  float(rng.random()), matched, rng.random(n_bits)))
    return gts, dets
