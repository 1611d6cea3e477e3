"""Small multi-scale anchor detector: conv backbone, FPN, shared anchor head.

Stands in for Faster R-CNN at desk scale. The domain losses only need the
pyramid features and a differentiable detection loss, both of which this
provides.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

POS_IOU = 0.5
NEG_IOU = 0.4
SMOOTH_L1_BETA = 1.0 / 9.0
BBOX_CLIP = math.log(1000.0 / 16)


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # each (B, C, H_l, W_l) or (C, H_l, W_l)
    strides: list[int]

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ValueError("one stride per pyramid level")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError("pyramid strides must strictly increase")
        if len({lvl.shape[-3] for lvl in self.levels}) > 1:
            raise ValueError("pyramid levels must share a channel count")

    def __len__(self):
        return len(self.levels)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # x, y, w, h
    category: int
    score: float


def xywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([b[:, :2], b[:, :2] + b[:, 2:]], axis=1)


def pairwise_iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes_xyxy: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS. Returns kept indices by descending score (ties: lower index first)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    if not order:
        return []
    iou = pairwise_iou_xyxy(boxes_xyxy, boxes_xyxy)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_threshold
    return keep


def _conv(cin, cout, stride=1, k=3):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _block(cin, cout, stride=1):
    """conv, group norm, SiLU."""
    return nn.Sequential(_conv(cin, cout, stride), nn.GroupNorm(min(8, cout // 4), cout), nn.SiLU())


class Detector(nn.Module):
    """Backbone + FPN + anchor head.

    Anchors per location: sizes ``stride * scale`` for each scale, times
    aspect ratios (height / width).
    """

    def __init__(self, num_classes: int, strides=(8, 16), channels: int = 32, in_channels: int = 3,
                 anchor_scales=(1.0, 2.0), anchor_ratios=(0.5, 1.0, 2.0)):
        super().__init__()
        self.num_classes = num_classes
        self.strides = tuple(strides)
        self.channels = channels
        self.in_channels = in_channels
        self.anchor_scales = tuple(anchor_scales)
        self.anchor_ratios = tuple(anchor_ratios)

        stem, c, widths = [], in_channels, []
        for i in range(int(math.log2(self.strides[0]))):
            w = min(16 * 2**i, 64)
            stem.append(_block(c, w, stride=2))
            c = w
        self.stem = nn.Sequential(*stem)
        widths.append(c)
        self.downs = nn.ModuleList()
        for _ in self.strides[1:]:
            w = min(c * 2, 128)
            self.downs.append(_block(c, w, stride=2))
            c = w
            widths.append(c)
        self.laterals = nn.ModuleList(nn.Conv2d(w, channels, 1) for w in widths)
        self.smooth = nn.ModuleList(_conv(channels, channels) for _ in widths)
        a = self.num_anchors
        self.head = _block(channels, channels)
        self.cls = nn.Conv2d(channels, a * (num_classes + 1), 1)
        self.reg = nn.Conv2d(channels, a * 4, 1)
        nn.init.normal_(self.reg.weight, std=0.01)
        nn.init.zeros_(self.reg.bias)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    # -- features -----------------------------------------------------------

    def extract_pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        single = images.ndim == 3
        x = images[None] if single else images
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[1]}")
        if min(x.shape[-2:]) < self.strides[-1]:
            raise ValueError(f"image {tuple(x.shape[-2:])} smaller than the largest stride {self.strides[-1]}")
        feats = [self.stem((x - 0.5) / 0.25)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        lat = [l(f) for l, f in zip(self.laterals, feats)]
        outs = [lat[-1]]
        for f in reversed(lat[:-1]):
            outs.insert(0, f + F.interpolate(outs[0], size=f.shape[-2:], mode="nearest"))
        levels = [s(o) for s, o in zip(self.smooth, outs)]
        if single:
            levels = [lvl[0] for lvl in levels]
        return FeaturePyramid(levels, list(self.strides))

    def head_outputs(self, pyramid: FeaturePyramid) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-anchor class logits ``(B, A_total, K+1)`` and box deltas ``(B, A_total, 4)``."""
        cls_out, reg_out = [], []
        k1 = self.num_classes + 1
        for lvl in pyramid.levels:
            x = lvl[None] if lvl.ndim == 3 else lvl
            h = self.head(x)
            b, _, hh, ww = h.shape
            # (B, A*K1, H, W) -> (B, H, W, A, K1): anchor index = ((y * W) + x) * A + a
            cls_out.append(self.cls(h).view(b, self.num_anchors, k1, hh, ww).permute(0, 3, 4, 1, 2).reshape(b, -1, k1))
            reg_out.append(self.reg(h).view(b, self.num_anchors, 4, hh, ww).permute(0, 3, 4, 1, 2).reshape(b, -1, 4))
        return torch.cat(cls_out, 1), torch.cat(reg_out, 1)

    def anchors(self, pyramid: FeaturePyramid) -> np.ndarray:
        """Anchor boxes ``(A_total, 4)`` as (cx, cy, w, h), ordered like :meth:`head_outputs`."""
        out = []
        for lvl, s in zip(pyramid.levels, pyramid.strides):
            hh, ww = lvl.shape[-2:]
            shapes = []
            for scale in self.anchor_scales:
                size = s * scale
                for r in self.anchor_ratios:
                    shapes.append((size / math.sqrt(r), size * math.sqrt(r)))
            shapes = np.array(shapes)
            ys, xs = np.meshgrid(np.arange(hh), np.arange(ww), indexing="ij")
            centers = np.stack([(xs + 0.5) * s, (ys + 0.5) * s], -1).reshape(-1, 1, 2)
            grid = np.concatenate([np.broadcast_to(centers, (hh * ww, len(shapes), 2)),
                                   np.broadcast_to(shapes[None], (hh * ww, len(shapes), 2))], -1)
            out.append(grid.reshape(-1, 4))
        return np.concatenate(out, 0)


def cxcywh_to_xyxy(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2], 1)


def encode_boxes(gt_xywh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Faster R-CNN box parameterisation of ``(x, y, w, h)`` targets against (cx, cy, w, h) anchors."""
    g = np.asarray(gt_xywh, dtype=np.float64).reshape(-1, 4)
    gc = g[:, :2] + g[:, 2:] / 2
    return np.concatenate([(gc - anchors[:, :2]) / anchors[:, 2:], np.log(g[:, 2:] / anchors[:, 2:])], 1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; returns ``(x1, y1, x2, y2)``."""
    d = np.asarray(deltas, dtype=np.float64)
    c = anchors[:, :2] + d[:, :2] * anchors[:, 2:]
    wh = anchors[:, 2:] * np.exp(np.minimum(d[:, 2:], BBOX_CLIP))
    return np.concatenate([c - wh / 2, c + wh / 2], 1)


def assign_anchors(anchors: np.ndarray, gt_xywh: np.ndarray, ignored_xywh=None) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors: ``1`` positive, ``0`` negative, ``-1`` ignored; plus matched GT index.

    Positives have IoU >= 0.5 with some box; each box also claims its single
    best anchor. Ties go to the lowest index, on both sides.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_xywh):
        iou = pairwise_iou_xyxy(cxcywh_to_xyxy(anchors), xywh_to_xyxy(gt_xywh))
        best_gt = iou.argmax(1)
        best_iou = iou[np.arange(n), best_gt]
        labels[(best_iou >= NEG_IOU) & (best_iou < POS_IOU)] = -1
        pos = best_iou >= POS_IOU
        labels[pos] = 1
        matched[pos] = best_gt[pos]
        for g in range(iou.shape[1]):
            a = int(iou[:, g].argmax())
            if iou[a, g] > 0 and matched[a] < 0:
                labels[a] = 1
                matched[a] = g
    if ignored_xywh is not None and len(ignored_xywh):
        ig = xywh_to_xyxy(ignored_xywh)
        cx, cy = anchors[:, 0], anchors[:, 1]
        inside = ((cx[:, None] >= ig[None, :, 0]) & (cx[:, None] <= ig[None, :, 2])
                  & (cy[:, None] >= ig[None, :, 1]) & (cy[:, None] <= ig[None, :, 3])).any(1)
        labels[inside & (labels == 0)] = -1
    return labels, matched


def smooth_l1(x: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax**2 / beta, ax - 0.5 * beta)


def detection_loss_from_outputs(cls_logits: torch.Tensor, deltas: torch.Tensor, anchors: np.ndarray,
                                boxes, ignored=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Classification and regression terms for one image.

    ``boxes`` is a list of ``(x, y, w, h, category)``. Cross-entropy is averaged
    separately over positive and negative anchors and the two means are added,
    so a handful of objects is not drowned by background. Smooth-L1 (summed over
    coordinates) is averaged over positives.
    """
    gt = np.array([b[:4] for b in boxes], dtype=np.float64).reshape(-1, 4)
    cats = np.array([int(b[4]) for b in boxes], dtype=np.int64)
    labels, matched = assign_anchors(anchors, gt, ignored)
    target = np.zeros(len(anchors), dtype=np.int64)
    pos = np.flatnonzero(labels == 1)
    target[pos] = cats[matched[pos]] + 1
    neg = np.flatnonzero(labels == 0)
    cls_loss = torch.zeros((), dtype=cls_logits.dtype)
    for group in (pos, neg):
        if len(group):
            idx = torch.from_numpy(group)
            cls_loss = cls_loss + F.cross_entropy(cls_logits[idx], torch.from_numpy(target[group]))
    if len(pos):
        tgt = torch.as_tensor(encode_boxes(gt[matched[pos]], anchors[pos]), dtype=deltas.dtype)
        reg_loss = smooth_l1(deltas[torch.from_numpy(pos)] - tgt).sum(1).mean()
    else:
        reg_loss = torch.zeros((), dtype=deltas.dtype)
    return cls_loss, reg_loss


def detection_loss(detector: Detector, pyramid: FeaturePyramid, targets) -> torch.Tensor:
    """Batch-mean detection loss. ``targets`` holds one ``(boxes, ignored)`` pair per image."""
    cls_logits, deltas = detector.head_outputs(pyramid)
    anchors = detector.anchors(pyramid)
    total = 0.0
    for i, (boxes, ignored) in enumerate(targets):
        c, r = detection_loss_from_outputs(cls_logits[i], deltas[i], anchors, boxes, ignored)
        total = total + c + r
    return total / len(targets)


def select_alignment_feature(pyramid: FeaturePyramid, mode: str | int = "top") -> torch.Tensor:
    """Feature map fed to the squeeze network: the coarsest level by default."""
    if mode == "top":
        return pyramid.levels[-1]
    if mode == "mean":
        size = pyramid.levels[-1].shape[-2:]
        return torch.stack([F.adaptive_avg_pool2d(lvl, size) for lvl in pyramid.levels]).mean(0)
    return pyramid.levels[int(mode)]


@torch.no_grad()
def detect(detector: Detector, image, score_threshold: float = 0.05, nms_iou: float = 0.5,
           max_detections: int = 100) -> list[Detection]:
    """Score filtering, class-wise greedy NMS, descending-score output."""
    param = next(detector.parameters())
    x = torch.as_tensor(image, dtype=param.dtype)
    pyramid = detector.extract_pyramid(x[None])
    cls_logits, deltas = detector.head_outputs(pyramid)
    probs = torch.softmax(cls_logits[0], -1)[:, 1:].numpy()
    anchors = detector.anchors(pyramid)
    h, w = x.shape[-2:]
    boxes = decode_boxes(deltas[0].numpy(), anchors)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    dets = []
    for k in range(detector.num_classes):
        idx = np.flatnonzero(probs[:, k] > score_threshold)
        if not len(idx):
            continue
        b = boxes[idx]
        ok = (b[:, 2] - b[:, 0] > 0) & (b[:, 3] - b[:, 1] > 0)
        idx, b = idx[ok], b[ok]
        for j in nms(b, probs[idx, k], nms_iou):
            x1, y1, x2, y2 = (float(v) for v in b[j])
            dets.append((float(probs[idx[j], k]), k, int(idx[j]), (x1, y1, x2 - x1, y2 - y1)))
    dets.sort(key=lambda d: (-d[0], d[1], d[2]))
    return [Detection(box, k, score) for score, k, _, box in dets[:max_detections]]


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def format_detection_line(image_id: str, det: Detection) -> str:
    x, y, w, h = det.box
    return f"{image_id},{x!r},{y!r},{w!r},{h!r},{det.score!r},{det.category}"


def parse_detection_line(line: str) -> tuple[str, Detection]:
    parts = line.strip().split(",")
    if len(parts) != 7:
        raise ValueError(f"expected 7 fields, got {len(parts)}")
    image_id, x, y, w, h, score, cat = parts
    return image_id, Detection((float(x), float(y), float(w), float(h)), int(cat), float(score))


def write_detections(path, detections: dict[str, list[Detection]]) -> None:
    """One ``image_id,x,y,w,h,score,category`` line per detection."""
    with open(path, "w") as f:
        for image_id, dets in detections.items():
            for d in dets:
                f.write(format_detection_line(image_id, d) + "\n")


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                image_id, det = parse_detection_line(line)
                out.setdefault(image_id, []).append(det)
    return out
