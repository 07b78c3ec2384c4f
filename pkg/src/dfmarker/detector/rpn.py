"""Anchor-based region proposal network."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, box_iou

BBOX_CLIP = math.log(1000.0 / 16)


@dataclass
class Proposal:
    box: torch.Tensor
    rpn_objectness: float
    level: int


def encode_boxes(anchors: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """(dx, dy, dw, dh) regression targets of ``gt`` relative to ``anchors``."""
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = anchors[:, 0] + 0.5 * aw, anchors[:, 1] + 0.5 * ah
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return torch.stack([(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], 1)


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = anchors[:, 0] + 0.5 * aw, anchors[:, 1] + 0.5 * ah
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw, dh = deltas[:, 2].clamp(max=BBOX_CLIP), deltas[:, 3].clamp(max=BBOX_CLIP)
    cx, cy = ax + dx * aw, ay + dy * ah
    w, h = aw * torch.exp(dw), ah * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], 1)


def make_anchors(feature_size: tuple, stride: int, sizes, ratios, dtype=torch.float32) -> torch.Tensor:
    """(H*W*A, 4) anchors centred on feature-cell centres, cell-major order."""
    h, w = feature_size
    base = []
    for s in sizes:
        for r in ratios:
            aw = s / math.sqrt(r)
            ah = s * math.sqrt(r)
            base.append([-aw / 2, -ah / 2, aw / 2, ah / 2])
    base = torch.tensor(base, dtype=dtype)
    ys = (torch.arange(h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(w, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    shifts = torch.stack([cx, cy, cx, cy], -1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def smooth_l1(x: torch.Tensor, beta: float) -> torch.Tensor:
    if beta < 1e-5:
        return x.abs()
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def label_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor, fg_iou=0.7, bg_iou=0.3,
                  allow_low_quality=True):
    """Per-anchor label (1 fg, 0 bg, -1 ignore) and index of the matched gt."""
    n = anchors.shape[0]
    if gt_boxes.numel() == 0:
        return torch.zeros(n, dtype=torch.long), torch.zeros(n, dtype=torch.long)
    iou = box_iou(gt_boxes.to(anchors.dtype), anchors)      # (G, N)
    best, idx = iou.max(0)
    labels = torch.full((n,), -1, dtype=torch.long)
    labels[best < bg_iou] = 0
    labels[best >= fg_iou] = 1
    if allow_low_quality:
        per_gt = iou.max(1, keepdim=True).values
        hit = ((iou == per_gt) & (per_gt > 0)).any(0)
        labels[hit] = 1
    return labels, idx


def subsample(labels: torch.Tensor, num: int, positive_fraction: float, generator=None):
    """Keep at most ``num`` labelled entries with the given positive share."""
    pos = torch.nonzero(labels == 1).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    n_pos = min(pos.numel(), int(num * positive_fraction))
    n_neg = min(neg.numel(), num - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return pos, neg


def rpn_losses(objectness: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor,
               gt_boxes: torch.Tensor, batch_per_image=256, positive_fraction=0.5, beta=1 / 9,
               generator=None, fg_iou=0.7, bg_iou=0.3):
    """BCE over sampled anchors and smooth-L1 over the positive ones, both
    normalised by the number of sampled anchors."""
    labels, idx = label_anchors(anchors, gt_boxes, fg_iou, bg_iou)
    pos, neg = subsample(labels, batch_per_image, positive_fraction, generator)
    sel = torch.cat([pos, neg])
    n = max(sel.numel(), 1)
    target = torch.cat([torch.ones(pos.numel()), torch.zeros(neg.numel())]).to(objectness)
    cls = F.binary_cross_entropy_with_logits(objectness[sel], target, reduction="sum") / n
    if pos.numel():
        t = encode_boxes(anchors[pos], gt_boxes[idx[pos]].to(anchors.dtype))
        loc = smooth_l1(deltas[pos] - t.to(deltas), beta).sum() / n
    else:
        loc = deltas.sum() * 0.0
    return cls, loc


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1, groups=channels),
            nn.Conv2d(channels, channels, 1), nn.ReLU(inplace=True))
        self.cls = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, 4 * num_anchors, 1)
        for m in (self.cls, self.reg):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, x):
        t = self.conv(x)
        b = x.shape[0]
        a = self.cls.out_channels
        # (B, A, H, W) -> (B, H*W*A) to match make_anchors ordering
        obj = self.cls(t).permute(0, 2, 3, 1).reshape(b, -1)
        reg = self.reg(t).reshape(b, a, 4, *t.shape[-2:]).permute(0, 3, 4, 1, 2).reshape(b, -1, 4)
        return obj, reg


def select_proposals(objectness: list, deltas: list, anchors: list, image_size: tuple,
                     pre_nms: int, post_nms: int, nms_iou: float = 0.7, min_size: float = 1.0):
    """Per image: top ``pre_nms`` per level, decode, clip, NMS across levels."""
    h, w = image_size
    boxes_all, scores_all, levels_all = [], [], []
    for lvl, (obj, dl, anc) in enumerate(zip(objectness, deltas, anchors)):
        k = min(pre_nms, obj.numel())
        scores, idx = obj.topk(k)
        boxes = decode_boxes(anc[idx], dl[idx])
        boxes = torch.stack([boxes[:, 0].clamp(0, w), boxes[:, 1].clamp(0, h),
                             boxes[:, 2].clamp(0, w), boxes[:, 3].clamp(0, h)], 1)
        boxes_all.append(boxes)
        scores_all.append(scores)
        levels_all.append(torch.full((k,), lvl, dtype=torch.long))
    boxes = torch.cat(boxes_all)
    scores = torch.cat(scores_all)
    levels = torch.cat(levels_all)
    keep = ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)
    boxes, scores, levels = boxes[keep], scores[keep], levels[keep]
    keep = batched_nms(boxes.float(), scores.float(), levels, nms_iou)[:post_nms]
    return boxes[keep], scores[keep], levels[keep]
