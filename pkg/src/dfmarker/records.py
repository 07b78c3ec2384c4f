"""Line-delimited text records for annotations and detections, plus image IO.

Annotation line::

    image_id, marker_id, 8 corner floats, S*S*2 grid floats, bitstring

Detection line::

    image_id, x1, y1, x2, y2, 8 corner floats, objectness, confidence, matched_id|REJECT[, soft bits...]

Floats are written with ``repr`` so they survive a round trip exactly.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .evaluation import DetRecord, GtRecord

REJECT = "REJECT"


def _f(x) -> str:
    return repr(float(x))


def annotation_line(r: GtRecord) -> str:
    parts = [str(int(r.image_id)), str(int(r.marker_id))]
    parts += [_f(v) for v in np.asarray(r.corners).reshape(-1)]
    if r.grid is not None:
        parts += [_f(v) for v in np.asarray(r.grid).reshape(-1)]
    parts.append("".join(str(int(b)) for b in (r.bits if r.bits is not None else ())))
    return ", ".join(parts)


def parse_annotation(line: str) -> GtRecord:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) < 11:
        raise ValueError(f"annotation record too short: {line[:60]!r}")
    n_grid = len(parts) - 11
    s = int(round(math.sqrt(n_grid / 2)))
    if 2 * s * s != n_grid:
        raise ValueError(f"grid field count {n_grid} is not 2*S*S")
    bits = parts[-1]
    if bits and set(bits) - {"0", "1"}:
        raise ValueError(f"bad bitstring {bits!r}")
    return GtRecord(int(parts[0]), int(parts[1]), np.array(parts[2:10], dtype=float).reshape(4, 2),
                    np.array([int(c) for c in bits], dtype=np.int64) if bits else None,
                    np.array(parts[10:10 + n_grid], dtype=float).reshape(s, s, 2) if s else None)


def detection_line(r: DetRecord) -> str:
    parts = [str(int(r.image_id))]
    parts += [_f(v) for v in np.asarray(r.box).reshape(-1)]
    parts += [_f(v) for v in np.asarray(r.corners).reshape(-1)]
    parts += [_f(r.objectness), _f(r.confidence), REJECT if r.matched_id is None else str(int(r.matched_id))]
    if r.soft_bits is not None:
        parts += [_f(v) for v in np.asarray(r.soft_bits).reshape(-1)]
    return ", ".join(parts)


def parse_detection(line: str) -> DetRecord:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) < 16:
        raise ValueError(f"detection record too short: {line[:60]!r}")
    mid = None if parts[15] == REJECT else int(parts[15])
    soft = np.array(parts[16:], dtype=float) if len(parts) > 16 else None
    return DetRecord(int(parts[0]), np.array(parts[1:5], dtype=float),
                     np.array(parts[5:13], dtype=float).reshape(4, 2), float(parts[13]),
                     float(parts[14]), mid, soft)


def _read_lines(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [ln for ln in (l.strip() for l in fh) if ln]


def write_annotations(path, records) -> None:
    Path(path).write_text("".join(annotation_line(r) + "\n" for r in records), encoding="utf-8")


def read_annotations(path) -> list:
    return [parse_annotation(l) for l in _read_lines(path)]


def write_detections(path, records) -> None:
    Path(path).write_text("".join(detection_line(r) + "\n" for r in records), encoding="utf-8")


def read_detections(path) -> list:
    return [parse_detection(l) for l in _read_lines(path)]


def sample_to_records(sample, image_id: int | None = None) -> list:
    """GtRecords for every annotation of a rendered :class:`SceneSample`."""
    iid = sample.image_id if image_id is None else image_id
    return [GtRecord(iid, a.marker_id, a.corners.detach().double().numpy(),
                     np.asarray(a.message, dtype=np.int64),
                     a.sample_grid.detach().double().numpy()) for a in sample.annotations]


def detections_to_records(detections, image_id: int) -> list:
    out = []
    for d in detections:
        ident = d.identification
        out.append(DetRecord(image_id, np.asarray(d.box, dtype=float), np.asarray(d.corners, dtype=float),
                             float(d.objectness), float(ident.confidence) if ident else 0.0,
                             ident.matched_id if ident is not None and ident.accepted else None,
                             np.asarray(d.soft_bits, dtype=float)))
    return out


# ---------------------------------------------------------------- images

def to_uint8(image: torch.Tensor) -> np.ndarray:
    """(3, H, W) display-space image in [0, 1] -> (H, W, 3) uint8."""
    a = image.detach().clamp(0, 1).permute(1, 2, 0).double().numpy()
    return np.round(a * 255).astype(np.uint8)


def save_png(path, image: torch.Tensor) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG", optimize=False)


def load_image(path) -> torch.Tensor:
    """PNG/JPEG -> (3, H, W) float32 in [0, 1] (display space)."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(a).permute(2, 0, 1).contiguous()


def export_marker_png(path, marker: torch.Tensor, upscale: int = 1) -> None:
    """(R, R, 3) linear marker -> sRGB PNG (gamma 2.2), nearest-neighbour upscaled."""
    if upscale < 1:
        raise ValueError("upscale must be >= 1")
    encoded = marker.detach().double().clamp(0, 1) ** (1 / 2.2)
    a = np.round(encoded.numpy() * 255).astype(np.uint8)
    if upscale > 1:
        a = a.repeat(upscale, 0).repeat(upscale, 1)
    Image.fromarray(a).save(path, format="PNG", optimize=False)
