import dataclasses
import math

import numpy as np
import pytest
import torch

from _grad import probe_gradient, weighted_sum
from dfmarker.codec import Dictionary, Message
from dfmarker.detector.backbone import LiteBackbone
from dfmarker.detector.heads import (CornerHead, DecodingHead, from_roi_coords, roi_align, to_roi_coords,
                                     uniform_lattice)
from dfmarker.detector.model import (Detection, DetectorConfig, MarkerDetector, postprocess,
                                     targets_from_annotations)
from dfmarker.detector.rpn import (decode_boxes, encode_boxes, label_anchors, make_anchors, rpn_losses,
                                   select_proposals)

F64 = torch.float64


def test_backbone_shapes():
    bb = LiteBackbone(16, 32, (24, 32, 48))
    f = bb(torch.rand(2, 3, 256, 192))
    assert f.stem.shape == (2, 16, 64, 48)
    assert [tuple(p.shape) for p in f.pyramid] == [(2, 32, 32, 24), (2, 32, 16, 12), (2, 32, 8, 6)]
    g = bb(torch.rand(1, 3, 250, 100))
    assert g.crop == (6, 28) and g.pyramid[0].shape[-2:] == (32, 16)


def test_backbone_translation_equivariance():
    torch.manual_seed(0)
    bb = LiteBackbone(16, 32, (24, 32, 48)).double().eval()
    img = torch.zeros(1, 3, 256, 256, dtype=F64)
    img[..., 64:128, 64:128] = torch.rand(3, 64, 64, dtype=F64)
    moved = torch.roll(img, shifts=(32, 64), dims=(-2, -1))
    # the stem has a local receptive field; pyramid levels see the padded border everywhere
    a, b = bb(img).stem, bb(moved).stem
    # stride 4: 32/64 px are 8/16 cells; compare away from the borders
    diff = (torch.roll(a, shifts=(8, 16), dims=(-2, -1)) - b)[..., 12:-12, 20:-20]
    assert diff.abs().max() < 1e-6 * (1 + a.abs().max())


def test_anchor_layout():
    a = make_anchors((2, 3), 8, (32,), (0.5, 1.0, 2.0))
    assert a.shape == (18, 4)
    centres = (a[:, :2] + a[:, 2:]) / 2
    assert torch.allclose(centres[0], torch.tensor([4.0, 4.0]))
    assert torch.allclose(centres[3], torch.tensor([12.0, 4.0]))     # next cell along x
    areas = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    assert torch.allclose(areas, torch.full_like(areas, 32.0 ** 2))


def test_box_coding_roundtrip():
    g = torch.Generator().manual_seed(0)
    anchors = torch.rand(50, 2, generator=g, dtype=F64) * 100
    anchors = torch.cat([anchors, anchors + 10 + torch.rand(50, 2, generator=g, dtype=F64) * 50], 1)
    gt = torch.rand(50, 2, generator=g, dtype=F64) * 100
    gt = torch.cat([gt, gt + 5 + torch.rand(50, 2, generator=g, dtype=F64) * 60], 1)
    assert torch.allclose(decode_boxes(anchors, encode_boxes(anchors, gt)), gt, atol=1e-9)


def test_label_anchors_hand_case():
    anchors = torch.tensor([[0, 0, 10, 10], [0, 0, 10, 9], [20, 20, 30, 30], [5, 0, 15, 10]], dtype=F64)
    gt = torch.tensor([[0, 0, 10, 10]], dtype=F64)
    labels, idx = label_anchors(anchors, gt, 0.7, 0.3)
    # IoUs 1, 0.9, 0, 1/3
    assert labels.tolist() == [1, 1, 0, -1]
    assert idx.tolist() == [0, 0, 0, 0]


def test_low_quality_match_keeps_best_anchor():
    anchors = torch.tensor([[0, 0, 10, 10], [40, 40, 50, 50]], dtype=F64)
    gt = torch.tensor([[4, 0, 14, 10]], dtype=F64)       # IoU 6/14 with the first
    labels, _ = label_anchors(anchors, gt, 0.7, 0.3)
    assert labels.tolist() == [1, 0]


def test_rpn_losses_hand_case():
    anchors = torch.tensor([[0, 0, 10, 10], [40, 40, 50, 50]], dtype=F64)
    gt = torch.tensor([[1, 0, 11, 10]], dtype=F64)
    obj = torch.tensor([0.0, 0.0], dtype=F64)
    deltas = torch.zeros(2, 4, dtype=F64)
    cls, loc = rpn_losses(obj, deltas, anchors, gt, batch_per_image=2, positive_fraction=0.5, beta=1 / 9)
    assert float(cls) == pytest.approx(math.log(2), abs=1e-12)
    # target dx = 0.1 for the positive anchor, inside the quadratic zone of beta 1/9
    assert float(loc) == pytest.approx(0.5 * 0.1 ** 2 * 9 / 2, abs=1e-12)


def test_select_proposals_nms_and_clip():
    anchors = [torch.tensor([[-5, -5, 20, 20], [0, 0, 20, 20], [30, 30, 50, 50]], dtype=torch.float32)]
    obj = [torch.tensor([3.0, 2.0, 1.0])]
    deltas = [torch.zeros(3, 4)]
    boxes, scores, levels = select_proposals(obj, deltas, anchors, (40, 40), 10, 10, 0.7)
    assert boxes.shape[0] == 2
    assert float(boxes.min()) >= 0 and float(boxes.max()) <= 40


def _ramp_pyramid(stride=8, h=16, w=16):
    x = (torch.arange(w, dtype=F64) + 0.5) * stride
    y = (torch.arange(h, dtype=F64) + 0.5) * stride
    return torch.stack([x[None].expand(h, w), y[:, None].expand(h, w)])[None]


def test_roi_align_reads_ramp_at_bin_centres():
    feat = _ramp_pyramid()
    box = torch.tensor([[20.0, 30.0, 56.0, 54.0]], dtype=F64)      # 36x24, canonical 64 -> level 0
    out = roi_align([feat, feat[..., ::2, ::2], feat[..., ::4, ::4]], box, torch.tensor([0]), output_size=6)
    cx = 20 + (torch.arange(6, dtype=F64) + 0.5) * 6
    cy = 30 + (torch.arange(6, dtype=F64) + 0.5) * 4
    assert torch.allclose(out[0, 0], cx[None].expand(6, 6), atol=1e-9)
    assert torch.allclose(out[0, 1], cy[:, None].expand(6, 6), atol=1e-9)


def test_roi_align_constant_and_levels():
    pyr = [torch.full((1, 2, 32 // s * 8, 32 // s * 8), float(s), dtype=F64) for s in (1, 2, 4)]
    boxes = torch.tensor([[10, 10, 40, 40], [10, 10, 100, 100], [0, 0, 250, 250]], dtype=F64)
    out = roi_align(pyr, boxes, torch.zeros(3, dtype=torch.long))
    assert [float(out[i].mean()) for i in range(3)] == [1.0, 2.0, 4.0]


def test_gradient_roi_align():
    g = torch.Generator().manual_seed(0)
    feat = torch.rand(1, 2, 10, 10, generator=g, dtype=F64)
    boxes = torch.tensor([[13.3, 17.1, 51.7, 60.2]], dtype=F64)
    read = weighted_sum(11)
    f = lambda x: read(roi_align([x, x[..., ::2, ::2], x[..., ::4, ::4]], boxes, torch.tensor([0]), output_size=5))
    assert probe_gradient(f, [feat]) < 1e-4


def test_roi_coords_roundtrip():
    boxes = torch.tensor([[10.0, 20.0, 50.0, 40.0]], dtype=F64)
    corners = torch.tensor([[[10.0, 20.0], [50.0, 20.0], [50.0, 40.0], [10.0, 40.0]]], dtype=F64)
    n = to_roi_coords(corners, boxes)
    assert torch.equal(n, torch.tensor([[[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]], dtype=F64))
    assert torch.allclose(from_roi_coords(n, boxes), corners)


def test_head_initialisation():
    head = CornerHead(8)
    common = torch.rand(3, 256)
    stem = torch.rand(1, 8, 16, 16)
    boxes = torch.tensor([[8.0, 8.0, 40.0, 40.0]] * 3)
    corners, roi, _ = head(common, stem, boxes, torch.zeros(3, dtype=torch.long))
    expected = torch.tensor([[16.0, 16.0], [32.0, 16.0], [32.0, 32.0], [16.0, 32.0]])
    assert torch.allclose(corners, expected.expand(3, 4, 2))
    dec = DecodingHead(4, 8, samples=5)
    loc, bits, obj = dec(torch.rand(2, 4, 12, 12), torch.zeros(2, 256))
    # small random weights on top of the lattice bias
    assert torch.allclose(loc, (uniform_lattice(5) * 0.8).expand(2, 5, 5, 2), atol=1e-2)
    assert bits.shape == (2, 8) and obj.shape == (2,)


def _det(box, score, bits=(0, 0, 0, 0)):
    b = np.array(box, float)
    corners = np.array([[b[0], b[1]], [b[2], b[1]], [b[2], b[3]], [b[0], b[3]]])
    return Detection(b, corners, np.zeros((3, 3, 2)), np.array(bits, float), score)


def test_postprocess_chain():
    d = Dictionary([Message((0, 0, 0, 0)), Message((1, 1, 1, 1))])
    dets = [_det([0, 0, 10, 10], 0.9), _det([1, 0, 11, 10], 0.8, (1, 1, 1, 1)),
            _det([30, 30, 40, 40], 0.7, (1, 1, 1, 0)), _det([60, 60, 70, 70], 0.4)]
    out = postprocess(dets, 0.5, 0.5, d, 0.8)
    assert [o.objectness for o in out] == [0.9, 0.7]
    assert out[0].identification.matched_id == 0
    assert out[1].identification.matched_id is None and out[1].identification.confidence == 0.75
    assert postprocess(dets, 0.95) == []


def _scene_batch(dtype=torch.float32, size=128):
    from dfmarker.render import SceneConfig, layout_presets, place_markers, random_board_scene
    rng = np.random.default_rng(0)
    scene = random_board_scene(rng, SceneConfig(height=size, width=size))
    markers = torch.rand(4, 8, 8, 3, generator=torch.Generator().manual_seed(0))
    return place_markers(scene, layout_presets()[1], markers, [0, 1, 2, 3],
                         messages=[(0, 1, 1, 0), (1, 0, 0, 1), (1, 1, 0, 0), (0, 0, 1, 1)], samples=3)


def _small_detector(n_bits=4, samples=3):
    cfg = DetectorConfig(n_bits=n_bits, samples=samples, stem_channels=8, fpn_channels=16,
                         backbone_widths=(16, 16, 16), rpn_batch_per_image=32, rpn_pre_nms_train=50,
                         rpn_post_nms_train=20, roi_batch_per_image=12)
    return MarkerDetector(cfg)


def test_forward_train_shapes_and_targets():
    torch.manual_seed(0)
    s = _scene_batch()
    det = _small_detector()
    t = targets_from_annotations(s.annotations, s.size)
    out = det.forward_train(s.image[None], [t], generator=torch.Generator().manual_seed(0))
    n = out.boxes.shape[0]
    assert out.corners.shape == (n, 4, 2) and out.soft_bits.shape == (n, 4)
    assert out.sample_locations.shape == (n, 3, 3, 2) and out.fg.any()
    f = torch.nonzero(out.fg).flatten()
    # ground-truth boxes are always candidates, so every fg RoI has matching labels
    for i in f.tolist():
        assert out.gt_bits[i].tolist() in [list(map(float, a.message)) for a in s.annotations]


def test_detect_runs_and_returns_sorted_lists():
    torch.manual_seed(0)
    s = _scene_batch()
    det = _small_detector()
    res = det.detect(s.image[None], Dictionary([Message((0, 1, 1, 0))]), score_thresh=0.0)
    assert len(res) == 1
    scores = [d.objectness for d in res[0]]
    assert scores == sorted(scores, reverse=True)
    assert all(d.identification is not None for d in res[0])


def test_generator_gradient_through_full_pipeline():
    """Decoding loss reaches the generator through placement, augmentation and the detector.

    Proposal boxes are stop-gradient by design, so the heads run on the fixed
    ground-truth boxes; everything between marker pixels and bits is differentiated.
    """
    from dfmarker.augment.pipeline import AugmentConfig, apply_pipeline
    from dfmarker.detector.heads import to_roi_coords
    from dfmarker.generator import GeneratorConfig, MarkerGenerator
    from dfmarker.render import SceneConfig, layout_presets, place_markers, random_board_scene
    from dfmarker.training import decoding_loss, sampling_loss
    torch.manual_seed(0)
    gen = MarkerGenerator(GeneratorConfig(n_bits=4, stage_channels=[8, 6], marker_resolution=8)).double()
    det = _small_detector().double()
    bits = torch.tensor([[0, 1, 1, 0], [1, 0, 0, 1]], dtype=F64)
    scene = random_board_scene(np.random.default_rng(1), SceneConfig(height=96, width=96))
    scene = dataclasses.replace(scene, **{f.name: getattr(scene, f.name).double()
                                          for f in dataclasses.fields(scene)
                                          if torch.is_tensor(getattr(scene, f.name))})
    aug = AugmentConfig.mild(rng_seed=2)

    def loss_of(w):
        params = dict(gen.named_parameters())
        params["to_rgb.weight"] = w
        markers = torch.func.functional_call(gen, params, (bits,))
        s = place_markers(scene, layout_presets()[5], markers, [0, 1], messages=bits.long().tolist(), samples=3)
        s = apply_pipeline(s, aug, 0)
        t = targets_from_annotations(s.annotations, s.size, F64)
        feats = det.backbone(s.image[None])
        bidx = torch.zeros(len(t["boxes"]), dtype=torch.long)
        corners, loc, soft, _ = det.roi_heads(feats, t["boxes"], bidx)
        fg = torch.ones(len(bidx), dtype=torch.bool)
        return (decoding_loss(t["bits"], soft, fg)
                + sampling_loss(to_roi_coords(t["grids"], t["boxes"]), loc, fg))

    w = gen.to_rgb.weight.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(loss_of(w), w)
    assert torch.isfinite(g).all() and g.abs().sum() > 0
    assert probe_gradient(loss_of, [w.detach()], n_probes=20) < 1e-4
