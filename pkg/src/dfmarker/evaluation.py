"""Detection metrics: COCO-style AP, decoding accuracy, FP-rate, corner RMSE.

AP matching is id-aware: a detection is a true positive only when it
overlaps an unmatched ground truth with the same marker id. Rejected
detections (no dictionary match) never enter the AP ranking. Without
identification results pass ``require_id=False`` for class-agnostic AP.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .codec import Dictionary, identify_many

UNDEFINED = -1.0
IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.arange(101) / 100     # exact k/100, unlike a float linspace
AREA_RANGES = {"all": (0.0, math.inf), "S": (0.0, 32.0 ** 2), "M": (32.0 ** 2, 96.0 ** 2),
               "L": (96.0 ** 2, math.inf)}


class IdSpaceError(ValueError):
    pass


@dataclass
class GtRecord:
    image_id: int
    marker_id: int
    corners: np.ndarray                    # (4, 2)
    bits: Optional[np.ndarray] = None      # (n_bits,)
    grid: Optional[np.ndarray] = None      # (S, S, 2)

    @property
    def box(self) -> np.ndarray:
        c = np.asarray(self.corners, dtype=float)
        return np.array([c[:, 0].min(), c[:, 1].min(), c[:, 0].max(), c[:, 1].max()])


@dataclass
class DetRecord:
    image_id: int
    box: np.ndarray                        # (4,)
    corners: np.ndarray                    # (4, 2)
    objectness: float
    confidence: float = 0.0
    matched_id: Optional[int] = None       # None means rejected
    soft_bits: Optional[np.ndarray] = None

    @property
    def accepted(self) -> bool:
        return self.matched_id is not None


def box_area(box) -> float:
    return max(box[2] - box[0], 0.0) * max(box[3] - box[1], 0.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, 4) x (M, 4) -> (N, M) IoU."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _group(records, image_ids) -> dict:
    out = {i: [] for i in image_ids}
    for r in records:
        out.setdefault(r.image_id, []).append(r)
    return out


def _image_order(gts, dets) -> list:
    return sorted({r.image_id for r in gts} | {r.image_id for r in dets})


def _score_order(scores) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def _match_image(gts: list, dets: list, iou_thr: float, area_rng, require_id: bool):
    """COCO greedy matching for one image.

    Returns per-detection (tp, ignored) flags in score order, the detections'
    scores in that order, and the number of non-ignored gts.
    """
    order = _score_order([d.objectness for d in dets])
    dets = [dets[i] for i in order]
    g_ignore = np.array([not (area_rng[0] <= box_area(g.box) < area_rng[1]) for g in gts], dtype=bool)
    # non-ignored gts are preferred during matching
    g_order = np.argsort(g_ignore, kind="stable")
    gts = [gts[i] for i in g_order]
    g_ignore = g_ignore[g_order]
    ious = iou_matrix(np.stack([d.box for d in dets]) if dets else np.zeros((0, 4)),
                      np.stack([g.box for g in gts]) if gts else np.zeros((0, 4)))
    g_taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    ignored = np.zeros(len(dets), dtype=bool)
    for di, d in enumerate(dets):
        best_iou, best = min(iou_thr, 1 - 1e-10), -1
        for gi, g in enumerate(gts):
            if g_taken[gi]:
                continue
            if require_id and g.marker_id != d.matched_id:
                continue
            if best > -1 and not g_ignore[best] and g_ignore[gi]:
                break
            if ious[di, gi] < best_iou:
                continue
            best_iou, best = ious[di, gi], gi
        if best > -1:
            g_taken[best] = True
            tp[di] = True
            ignored[di] = g_ignore[best]
        else:
            ignored[di] = not (area_rng[0] <= box_area(d.box) < area_rng[1])
    return tp, ignored, np.array([d.objectness for d in dets], dtype=float), int((~g_ignore).sum())


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return UNDEFINED
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return math.fsum(q.tolist()) / len(RECALL_POINTS)


def ap_at(gts: Sequence[GtRecord], dets: Sequence[DetRecord], iou_thr: float, area: str = "all",
          require_id: bool = True) -> float:
    """101-point interpolated AP at one IoU threshold, pooled over images."""
    if require_id:
        dets = [d for d in dets if d.accepted]
    rng = AREA_RANGES[area]
    ids = _image_order(gts, dets)
    g_by, d_by = _group(gts, ids), _group(dets, ids)
    tps, igns, scores, n_gt = [], [], [], 0
    for i in ids:
        tp, ign, sc, n = _match_image(g_by[i], d_by[i], iou_thr, rng, require_id)
        tps.append(tp)
        igns.append(ign)
        scores.append(sc)
        n_gt += n
    if not ids:
        return UNDEFINED
    tp = np.concatenate(tps)
    ign = np.concatenate(igns)
    order = _score_order(np.concatenate(scores))
    tp, ign = tp[order], ign[order]
    return _interpolated_ap(tp[~ign], n_gt)


def average_precision(gts, dets, iou_thresholds=IOU_THRESHOLDS, require_id: bool = True) -> dict:
    """AP averaged over IoU thresholds plus AP50, AP75 and the S/M/L buckets."""
    def mean_over(area):
        vals = [ap_at(gts, dets, t, area, require_id) for t in iou_thresholds]
        if any(v == UNDEFINED for v in vals):
            return UNDEFINED
        return math.fsum(vals) / len(vals)

    return {"AP": mean_over("all"),
            "AP50": ap_at(gts, dets, 0.5, "all", require_id),
            "AP75": ap_at(gts, dets, 0.75, "all", require_id),
            "AP_S": mean_over("S"), "AP_M": mean_over("M"), "AP_L": mean_over("L")}


def match_pairs(gts, dets, iou_thr: float = 0.5) -> list:
    """Class-agnostic greedy score-ordered matching at ``iou_thr``; returns (gt, det) pairs."""
    ids = _image_order(gts, dets)
    g_by, d_by = _group(gts, ids), _group(dets, ids)
    pairs = []
    for i in ids:
        gs, ds = g_by[i], d_by[i]
        if not gs or not ds:
            continue
        ds = [ds[k] for k in _score_order([d.objectness for d in ds])]
        ious = iou_matrix(np.stack([d.box for d in ds]), np.stack([g.box for g in gs]))
        taken = np.zeros(len(gs), dtype=bool)
        for di, d in enumerate(ds):
            cand = np.where(taken, -1.0, ious[di])
            gi = int(np.argmax(cand))
            if cand[gi] >= iou_thr:
                taken[gi] = True
                pairs.append((gs[gi], d))
    return pairs


def decoding_accuracy(pairs) -> float:
    """Mean fraction of correct hard bits over matched detections."""
    if not pairs:
        return UNDEFINED
    accs = []
    for g, d in pairs:
        if g.bits is None or d.soft_bits is None:
            raise ValueError("decoding accuracy needs gt bits and soft bits")
        hard = (np.asarray(d.soft_bits) >= 0.5).astype(int)
        gb = np.asarray(g.bits).astype(int)
        if hard.shape != gb.shape:
            raise IdSpaceError(f"bit length mismatch {hard.shape} vs {gb.shape}")
        accs.append(float((hard == gb).sum()) / gb.size)
    return math.fsum(accs) / len(accs)


def corner_rmse(pairs) -> float:
    """RMS of Euclidean corner errors over all matched corners (px)."""
    if not pairs:
        return UNDEFINED
    sq = []
    for g, d in pairs:
        diff = np.asarray(d.corners, dtype=float) - np.asarray(g.corners, dtype=float)
        sq.extend((diff ** 2).sum(1).tolist())
    return math.sqrt(math.fsum(sq) / len(sq))


def fp_rate(gts, dets, iou_thr: float = 0.5) -> float:
    """Share of accepted detections that hit no gt or carry the wrong id."""
    accepted = [d for d in dets if d.accepted]
    if not accepted:
        return 0.0
    pairs = match_pairs(gts, accepted, iou_thr)
    correct = sum(1 for g, d in pairs if g.marker_id == d.matched_id)
    return (len(accepted) - correct) / len(accepted)


def reidentify(dets, dictionary: Dictionary, threshold: float) -> list:
    """Copies of ``dets`` with identification redone at ``threshold``."""
    if not dets:
        return []
    soft = np.stack([np.asarray(d.soft_bits, dtype=float) for d in dets])
    if soft.shape[1] != dictionary.n_bits:
        raise IdSpaceError(f"detections carry {soft.shape[1]} bits, dictionary has {dictionary.n_bits}")
    out = []
    for d, r in zip(dets, identify_many(soft, dictionary, threshold)):
        out.append(DetRecord(d.image_id, d.box, d.corners, d.objectness, r.confidence,
                             r.matched_id if r.accepted else None, d.soft_bits))
    return out


def confidence_sweep(gts, dets, dictionary: Dictionary, thresholds, iou_thr: float = 0.5) -> list:
    """(threshold, AP at ``iou_thr``) rows, re-identifying at every threshold."""
    return [(float(t), ap_at(gts, reidentify(dets, dictionary, t), iou_thr)) for t in thresholds]


def parse_sweep(spec: str) -> list:
    """``"start:step:stop"`` (inclusive stop) -> list of thresholds."""
    try:
        start, step, stop = (float(x) for x in spec.split(":"))
    except ValueError as err:
        raise ValueError(f"bad sweep spec {spec!r}, expected start:step:stop") from err
    if step <= 0:
        raise ValueError("sweep step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 10) for k in range(n)]


@dataclass
class MetricsReport:
    AP: float
    AP50: float
    AP75: float
    AP_S: float
    AP_M: float
    AP_L: float
    decoding_accuracy: float
    fp_rate: float
    corner_rmse: float
    n_images: int = 0
    n_gt: int = 0
    n_det: int = 0
    n_accepted: int = 0
    sweep: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "sweep":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v:.6f}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def sweep_csv(self) -> str:
        return "threshold,AP50\n" + "".join(f"{t:.4f},{a:.6f}\n" for t, a in self.sweep)


def evaluate(gts, dets, dictionary: Dictionary | None = None, thresholds=None,
             require_id: bool = True) -> MetricsReport:
    gts, dets = list(gts), list(dets)
    n_bits = {len(g.bits) for g in gts if g.bits is not None}
    d_bits = {len(d.soft_bits) for d in dets if d.soft_bits is not None}
    if len(n_bits | d_bits) > 1:
        raise IdSpaceError(f"inconsistent bit lengths {sorted(n_bits | d_bits)}")
    if dictionary is not None:
        bad = {d.matched_id for d in dets if d.accepted and not 0 <= d.matched_id < len(dictionary)}
        bad |= {g.marker_id for g in gts if not 0 <= g.marker_id < len(dictionary)}
        if bad:
            raise IdSpaceError(f"ids outside the dictionary: {sorted(bad)[:5]}")
    ap = average_precision(gts, dets, require_id=require_id)
    pairs = match_pairs(gts, dets)
    sweep = confidence_sweep(gts, dets, dictionary, thresholds) if thresholds and dictionary else []
    return MetricsReport(**ap, decoding_accuracy=decoding_accuracy(pairs) if all(
                             d.soft_bits is not None for _, d in pairs) else UNDEFINED,
                         fp_rate=fp_rate(gts, dets), corner_rmse=corner_rmse(pairs),
                         n_images=len(_image_order(gts, dets)), n_gt=len(gts), n_det=len(dets),
                         n_accepted=sum(d.accepted for d in dets), sweep=sweep)
