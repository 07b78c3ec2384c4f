"""Two-stage marker detector: backbone, RPN, RoI heads, post-processing."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from torchvision.ops import box_iou, nms

from ..codec import Dictionary, IdentificationResult, identify_many
from .backbone import STRIDES, BackboneFeatures, LiteBackbone
from .heads import CommonFC, CornerHead, DecodingHead, roi_align, to_roi_coords
from .rpn import RPNHead, label_anchors, make_anchors, rpn_losses, select_proposals, subsample


@dataclass
class DetectorConfig:
    n_bits: int = 36
    samples: int = 9
    stem_channels: int = 64
    fpn_channels: int = 128
    backbone_widths: tuple = (96, 128, 192)
    anchor_sizes: tuple = ((32,), (64,), (128,))
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    canonical_size: float = 64.0
    rpn_batch_per_image: int = 256
    rpn_positive_fraction: float = 0.5
    rpn_smooth_l1_beta: float = 1 / 9
    rpn_pre_nms_train: int = 1000
    rpn_pre_nms_test: int = 500
    rpn_post_nms_train: int = 256
    rpn_post_nms_test: int = 64
    rpn_nms_iou: float = 0.7
    roi_batch_per_image: int = 64
    roi_positive_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    score_thresh: float = 0.5
    nms_iou: float = 0.5
    identify_threshold: float = 0.8

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "anchor_sizes" else list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "anchor_sizes" in d:
            d["anchor_sizes"] = tuple(tuple(s) for s in d["anchor_sizes"])
        for k in ("backbone_widths", "anchor_ratios"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Detection:
    box: np.ndarray                 # (4,) x1 y1 x2 y2
    corners: np.ndarray             # (4, 2) TL TR BR BL
    sample_locations: np.ndarray    # (S, S, 2) normalised RoI coords
    soft_bits: np.ndarray           # (n_bits,)
    objectness: float
    proposal: np.ndarray = None
    identification: Optional[IdentificationResult] = None


@dataclass
class RoiOutputs:
    """Everything the training losses need for one batch of sampled RoIs."""
    boxes: torch.Tensor
    batch_idx: torch.Tensor
    fg: torch.Tensor                 # bool (N,)
    corners: torch.Tensor            # (N, 4, 2) px
    sample_locations: torch.Tensor   # (N, S, S, 2)
    soft_bits: torch.Tensor          # (N, n_bits)
    objectness: torch.Tensor         # (N,) logits
    gt_corners: torch.Tensor         # (N, 4, 2), valid where fg
    gt_locations: torch.Tensor       # (N, S, S, 2)
    gt_bits: torch.Tensor            # (N, n_bits)
    rpn_class: torch.Tensor = None
    rpn_loc: torch.Tensor = None


def targets_from_annotations(annotations, image_size, dtype=torch.float32) -> dict:
    """Stack per-marker labels; boxes are clipped to the image."""
    h, w = image_size
    if not annotations:
        return dict(boxes=torch.zeros(0, 4, dtype=dtype), corners=torch.zeros(0, 4, 2, dtype=dtype),
                    grids=None, bits=None, ids=torch.zeros(0, dtype=torch.long))
    boxes = torch.stack([a.box for a in annotations]).to(dtype)
    boxes = torch.stack([boxes[:, 0].clamp(0, w), boxes[:, 1].clamp(0, h),
                         boxes[:, 2].clamp(0, w), boxes[:, 3].clamp(0, h)], 1)
    return dict(boxes=boxes,
                corners=torch.stack([a.corners for a in annotations]).to(dtype),
                grids=torch.stack([a.sample_grid for a in annotations]).to(dtype),
                bits=torch.tensor([a.message for a in annotations], dtype=dtype),
                ids=torch.tensor([a.marker_id for a in annotations], dtype=torch.long))


class MarkerDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig | None = None, backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DetectorConfig()
        self.backbone = backbone or LiteBackbone(cfg.stem_channels, cfg.fpn_channels, cfg.backbone_widths)
        n_anchor = len(cfg.anchor_sizes[0]) * len(cfg.anchor_ratios)
        self.rpn = RPNHead(cfg.fpn_channels, n_anchor)
        self.common = CommonFC(cfg.fpn_channels)
        self.decoding = DecodingHead(cfg.fpn_channels, cfg.n_bits, cfg.samples)
        self.corner = CornerHead(cfg.stem_channels)
        self._anchor_cache = {}

    # ------------------------------------------------------------ pieces
    def anchors(self, pyramid) -> list:
        out = []
        for lvl, feat in enumerate(pyramid):
            key = (lvl, tuple(feat.shape[-2:]), feat.dtype)
            if key not in self._anchor_cache:
                self._anchor_cache[key] = make_anchors(feat.shape[-2:], STRIDES[lvl],
                                                       self.cfg.anchor_sizes[lvl], self.cfg.anchor_ratios,
                                                       dtype=feat.dtype)
            out.append(self._anchor_cache[key])
        return out

    def rpn_forward(self, feats: BackboneFeatures, image_size, gt_boxes=None, generator=None):
        """Proposals per image and, with ``gt_boxes``, the mean RPN losses."""
        cfg = self.cfg
        heads = [self.rpn(p) for p in feats.pyramid]
        anchors = self.anchors(feats.pyramid)
        b = feats.pyramid[0].shape[0]
        pre = cfg.rpn_pre_nms_train if self.training else cfg.rpn_pre_nms_test
        post = cfg.rpn_post_nms_train if self.training else cfg.rpn_post_nms_test
        proposals = []
        for i in range(b):
            with torch.no_grad():
                boxes, scores, levels = select_proposals(
                    [h[0][i].detach() for h in heads], [h[1][i].detach() for h in heads], anchors,
                    image_size, pre, post, cfg.rpn_nms_iou)
            proposals.append((boxes, scores, levels))
        losses = None
        if gt_boxes is not None:
            all_anchors = torch.cat(anchors)
            cls_sum, loc_sum = 0.0, 0.0
            for i in range(b):
                obj = torch.cat([h[0][i] for h in heads])
                dl = torch.cat([h[1][i] for h in heads])
                c, l = rpn_losses(obj, dl, all_anchors, gt_boxes[i], cfg.rpn_batch_per_image,
                                  cfg.rpn_positive_fraction, cfg.rpn_smooth_l1_beta, generator)
                cls_sum = cls_sum + c
                loc_sum = loc_sum + l
            losses = (cls_sum / b, loc_sum / b)
        return proposals, losses

    def roi_heads(self, feats: BackboneFeatures, boxes, batch_idx):
        pooled = roi_align(feats.pyramid, boxes, batch_idx, canonical_size=self.cfg.canonical_size)
        common = self.common(pooled)
        loc, bits, obj = self.decoding(pooled, common)
        corners, _, _ = self.corner(common, feats.stem, boxes, batch_idx)
        return corners, loc, bits, obj

    # ------------------------------------------------------------ training
    def sample_rois(self, proposals, targets, generator=None):
        cfg = self.cfg
        boxes, bidx, fg, gt_idx = [], [], [], []
        offset = 0
        for i, ((props, _, _), t) in enumerate(zip(proposals, targets)):
            gt = t["boxes"].to(props.dtype)
            cand = torch.cat([props, gt])
            if gt.numel():
                iou = box_iou(gt, cand)
                best, idx = iou.max(0)
                labels = (best >= cfg.roi_fg_iou).long()
            else:
                idx = torch.zeros(cand.shape[0], dtype=torch.long)
                labels = torch.zeros(cand.shape[0], dtype=torch.long)
            pos, neg = subsample(labels, cfg.roi_batch_per_image, cfg.roi_positive_fraction, generator)
            sel = torch.cat([pos, neg])
            boxes.append(cand[sel])
            bidx.append(torch.full((sel.numel(),), i, dtype=torch.long))
            fg.append(labels[sel] == 1)
            gt_idx.append(idx[sel] + offset)
            offset += gt.shape[0]
        return torch.cat(boxes), torch.cat(bidx), torch.cat(fg), torch.cat(gt_idx)

    def forward_train(self, images: torch.Tensor, targets: list, generator=None) -> RoiOutputs:
        size = tuple(images.shape[-2:])
        feats = self.backbone(images)
        proposals, (rpn_cls, rpn_loc) = self.rpn_forward(
            feats, size, [t["boxes"].to(images.dtype) for t in targets], generator)
        boxes, bidx, fg, gt_idx = self.sample_rois(proposals, targets, generator)
        boxes = boxes.detach()
        corners, loc, bits, obj = self.roi_heads(feats, boxes, bidx)
        s = self.cfg.samples
        n = boxes.shape[0]
        gt_corners = torch.zeros(n, 4, 2, dtype=images.dtype)
        gt_loc = torch.zeros(n, s, s, 2, dtype=images.dtype)
        gt_bits = torch.zeros(n, self.cfg.n_bits, dtype=images.dtype)
        if fg.any():
            all_corners = torch.cat([t["corners"] for t in targets if t["boxes"].numel()]).to(images.dtype)
            all_grids = torch.cat([t["grids"] for t in targets if t["boxes"].numel()]).to(images.dtype)
            all_bits = torch.cat([t["bits"] for t in targets if t["boxes"].numel()]).to(images.dtype)
            f = torch.nonzero(fg).flatten()
            g = gt_idx[f]
            gt_corners[f] = all_corners[g]
            gt_loc[f] = to_roi_coords(all_grids[g], boxes[f])
            gt_bits[f] = all_bits[g]
        return RoiOutputs(boxes, bidx, fg, corners, loc, bits, obj, gt_corners, gt_loc, gt_bits,
                          rpn_cls, rpn_loc)

    # ------------------------------------------------------------ inference
    @torch.no_grad()
    def detect(self, images: torch.Tensor, dictionary: Dictionary | None = None,
               score_thresh: float | None = None, nms_iou: float | None = None,
               identify_threshold: float | None = None) -> list:
        """Detections per image, each run through NMS and (optionally) identification."""
        cfg = self.cfg
        score_thresh = cfg.score_thresh if score_thresh is None else score_thresh
        nms_iou = cfg.nms_iou if nms_iou is None else nms_iou
        thr = cfg.identify_threshold if identify_threshold is None else identify_threshold
        was_training = self.training
        self.eval()
        try:
            size = tuple(images.shape[-2:])
            feats = self.backbone(images)
            proposals, _ = self.rpn_forward(feats, size)
            boxes = torch.cat([p[0] for p in proposals])
            bidx = torch.cat([torch.full((p[0].shape[0],), i, dtype=torch.long)
                              for i, p in enumerate(proposals)])
            corners, loc, bits, obj = self.roi_heads(feats, boxes, bidx)
        finally:
            self.train(was_training)
        out = []
        for i in range(images.shape[0]):
            sel = torch.nonzero(bidx == i).flatten()
            raw = [Detection(*_detection_arrays(corners[j], loc[j], bits[j], obj[j], size), proposal=boxes[j].numpy())
                   for j in sel.tolist()]
            out.append(postprocess(raw, score_thresh, nms_iou, dictionary, thr))
        return out


def _detection_arrays(corners, loc, bits, obj, size):
    h, w = size
    c = corners.double().numpy()
    box = np.array([c[:, 0].min(), c[:, 1].min(), c[:, 0].max(), c[:, 1].max()])
    box = np.clip(box, 0, [w, h, w, h])
    return box, c, loc.double().numpy(), bits.double().numpy(), float(torch.sigmoid(obj))


def postprocess(detections: list, score_thresh: float = 0.5, nms_iou: float = 0.5,
                dictionary: Dictionary | None = None, identify_threshold: float = 0.8) -> list:
    """Score filter, greedy NMS on boxes, then identification of the survivors."""
    kept = [d for d in detections if d.objectness >= score_thresh]
    if not kept:
        return []
    boxes = torch.tensor(np.stack([d.box for d in kept]), dtype=torch.float64)
    scores = torch.tensor([d.objectness for d in kept], dtype=torch.float64)
    keep = nms(boxes, scores, nms_iou).tolist()
    kept = [kept[k] for k in keep]
    if dictionary is not None:
        ids = identify_many(np.stack([d.soft_bits for d in kept]), dictionary, identify_threshold)
        for d, r in zip(kept, ids):
            d.identification = r
    return kept
