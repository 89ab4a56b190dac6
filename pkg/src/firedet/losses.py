"""Training losses: complete-IoU box regression and binary cross-entropy.

The regression term works on center-format normalized boxes packed as
(1, 4, P, 1) tensors (channel axis = coordinate, H axis = box index): it is
IoU penalized by the squared center distance over the enclosing-box diagonal
and by an aspect-ratio consistency term.  The trade-off coefficient of the
aspect term is treated as a constant during differentiation (standard
practice; keeps the loss smooth).

Classification uses the numerically stable form of binary cross-entropy on
raw logits, max(z, 0) - z*t + log(1 + exp(-|z|)), whose gradient is
(sigmoid(z) - t) / count.

Target assignment is deliberately simple: each ground-truth box goes to one
scale by size bucket and to the single cell containing its center; when two
boxes land on the same cell the larger one wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    atan,
    make_node,
    maximum,
    minimum,
    relu,
    scalar,
    tmean,
)
from .tensor import _sigmoid_np, _softplus_np  # stable scalar maps shared with decode
from .nn import concat_channels
from .model import STRIDES, ModelConfig, cell_box


def bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of raw logits against targets in [0, 1]."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"targets shape {t.shape} != logits shape {logits.shape}")
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    z = logits.data
    elem = np.maximum(z, 0.0) - z * t + _softplus_np(-np.abs(z))
    out = elem.mean(keepdims=True).reshape(1, 1, 1, 1)
    count = z.size

    def bwd(grad: np.ndarray) -> None:
        if logits.requires_grad:
            logits.accumulate_grad(grad.reshape(()) * (_sigmoid_np(z) - t) / count)

    return make_node(out, (logits,), bwd)


def _coord(boxes: Tensor, idx: int) -> Tensor:
    from .tensor import slice4
    return slice4(boxes, c=slice(idx, idx + 1))


def ciou_loss(pred: Tensor, gt: Tensor, tiny: float = 1e-9,
              alpha_const: np.ndarray | None = None) -> Tensor:
    """1 - CIoU per box; pred and gt are (N, 4, P, 1) center-format boxes.

    Differentiable in pred; degenerate predicted extents are clamped at
    ``tiny``.  Returns shape (N, 1, P, 1).

    The aspect term's trade-off coefficient is held constant during
    differentiation.  By default it is recomputed from the current values on
    every call; passing ``alpha_const`` pins it, which is what a
    finite-difference check must do to probe the same function the backward
    pass differentiates.
    """
    if pred.shape != gt.shape or pred.shape[1] != 4:
        raise ValueError(f"expected matching (N,4,P,1) boxes, got {pred.shape} and {gt.shape}")
    floor = scalar(tiny)
    px, py = _coord(pred, 0), _coord(pred, 1)
    pw, ph = maximum(_coord(pred, 2), floor), maximum(_coord(pred, 3), floor)
    gx, gy = _coord(gt, 0), _coord(gt, 1)
    gw, gh = maximum(_coord(gt, 2), floor), maximum(_coord(gt, 3), floor)

    px1, px2 = px - pw * 0.5, px + pw * 0.5
    py1, py2 = py - ph * 0.5, py + ph * 0.5
    gx1, gx2 = gx - gw * 0.5, gx + gw * 0.5
    gy1, gy2 = gy - gh * 0.5, gy + gh * 0.5

    inter_w = relu(minimum(px2, gx2) - maximum(px1, gx1))
    inter_h = relu(minimum(py2, gy2) - maximum(py1, gy1))
    inter = inter_w * inter_h
    # Areas come from the same corner differences as the intersection, so
    # identical boxes give union == inter bit-for-bit and CIoU exactly 1.
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou = inter / union

    rho2 = (px - gx) * (px - gx) + (py - gy) * (py - gy)
    enc_w = maximum(px2, gx2) - minimum(px1, gx1)
    enc_h = maximum(py2, gy2) - minimum(py1, gy1)
    c2 = enc_w * enc_w + enc_h * enc_h

    dtheta = atan(gw / gh) - atan(pw / ph)
    v = dtheta * dtheta * (4.0 / math.pi ** 2)
    if alpha_const is None:
        alpha_const = v.data / ((1.0 - iou.data) + v.data + 1e-12)
    alpha = Tensor(np.broadcast_to(np.asarray(alpha_const, dtype=v.data.dtype), v.shape).copy())

    ciou = iou - rho2 / c2 - alpha * v
    return 1.0 - ciou


def ciou_alpha(pred_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Current trade-off coefficient alpha = v / ((1 - IoU) + v).

    Takes (N, 4, P, 1) center-format arrays; useful for pinning the
    coefficient across finite-difference evaluations.
    """
    p = np.asarray(pred_boxes, dtype=np.float64)
    g = np.asarray(gt_boxes, dtype=np.float64)
    pw, ph = np.maximum(p[:, 2:3], 1e-9), np.maximum(p[:, 3:4], 1e-9)
    gw, gh = np.maximum(g[:, 2:3], 1e-9), np.maximum(g[:, 3:4], 1e-9)
    px1, px2 = p[:, 0:1] - pw / 2, p[:, 0:1] + pw / 2
    py1, py2 = p[:, 1:2] - ph / 2, p[:, 1:2] + ph / 2
    gx1, gx2 = g[:, 0:1] - gw / 2, g[:, 0:1] + gw / 2
    gy1, gy2 = g[:, 1:2] - gh / 2, g[:, 1:2] + gh / 2
    inter = np.maximum(0.0, np.minimum(px2, gx2) - np.maximum(px1, gx1)) * \
        np.maximum(0.0, np.minimum(py2, gy2) - np.maximum(py1, gy1))
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    iou = inter / union
    v = (4.0 / math.pi ** 2) * (np.arctan(gw / gh) - np.arctan(pw / ph)) ** 2
    return v / ((1.0 - iou) + v + 1e-12)


def ciou_value(pred_box, gt_box) -> float:
    """CIoU of two plain center-format boxes (scalar convenience wrapper)."""
    p = Tensor(np.asarray(pred_box, dtype=np.float64).reshape(1, 4, 1, 1))
    g = Tensor(np.asarray(gt_box, dtype=np.float64).reshape(1, 4, 1, 1))
    return 1.0 - ciou_loss(p, g).item()


# -- target assignment -------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    """One training box: batch position, class, normalized center-format box."""

    image_index: int
    class_id: int
    box: tuple[float, float, float, float]

    @property
    def area(self) -> float:
        return self.box[2] * self.box[3]


@dataclass(frozen=True)
class Positive:
    """A ground truth assigned to one cell of one scale."""

    image_index: int
    scale: int
    row: int
    col: int
    class_id: int
    box: tuple[float, float, float, float]


@dataclass
class Targets:
    """Assignment result: per-scale one-hot class maps plus the positive list."""

    cls_maps: list[np.ndarray]  # scale -> (B, num_classes, h, w)
    positives: list[Positive]


def scale_bucket(box: tuple[float, float, float, float], input_size: int) -> int:
    """Size bucket: pixel extent <= 64 -> stride 8; <= 128 -> 16; else 32."""
    extent = max(box[2], box[3]) * input_size
    if extent <= 64:
        return 0
    if extent <= 128:
        return 1
    return 2


def assign(gts: list[GroundTruth], config: ModelConfig, batch_size: int,
           input_size: int | None = None) -> Targets:
    """Map ground truths to (scale, cell) positives with one-hot class maps."""
    size = input_size or config.input_size
    grids = [(size // s, size // s) for s in STRIDES]
    chosen: dict[tuple[int, int, int, int], GroundTruth] = {}
    for gt in gts:
        if not 0 <= gt.image_index < batch_size:
            raise ValueError(f"image_index {gt.image_index} outside batch of {batch_size}")
        if not 0 <= gt.class_id < config.num_classes:
            raise ValueError(f"class_id {gt.class_id} outside {config.num_classes} classes")
        s = scale_bucket(gt.box, size)
        gh, gw = grids[s]
        row = min(int(gt.box[1] * gh), gh - 1)
        col = min(int(gt.box[0] * gw), gw - 1)
        key = (gt.image_index, s, row, col)
        held = chosen.get(key)
        if held is None or gt.area > held.area:
            chosen[key] = gt
    cls_maps = [np.zeros((batch_size, config.num_classes, gh, gw), dtype=np.float64)
                for gh, gw in grids]
    positives = []
    for (b, s, row, col), gt in sorted(chosen.items()):
        cls_maps[s][b, gt.class_id, row, col] = 1.0
        positives.append(Positive(b, s, row, col, gt.class_id, gt.box))
    return Targets(cls_maps=cls_maps, positives=positives)


# -- combined detection loss ----------------------------------------------------------


LAMBDA_BOX = 7.5
LAMBDA_CLS = 0.5


def detection_loss(maps: list[Tensor], gts: list[GroundTruth], config: ModelConfig,
                   input_size: int | None = None,
                   alpha_cache: dict[int, np.ndarray] | None = None,
                   ) -> tuple[Tensor, Tensor, Tensor]:
    """(total, box_term, cls_term) over a batch of raw maps.

    total = 7.5 * mean over positive cells of (1 - CIoU) of the decoded box
    against its ground truth, plus 0.5 * mean binary cross-entropy over every
    (cell, class) of every scale.  With zero positives the box term is zero.

    ``alpha_cache`` pins each positive's CIoU trade-off coefficient on first
    use and reuses it afterwards — required when a finite-difference check
    re-evaluates the loss, since the backward pass holds alpha constant.
    """
    from .tensor import slice4
    batch = maps[0].shape[0]
    size = input_size or maps[0].shape[2] * STRIDES[0]
    targets = assign(gts, config, batch, size)

    total_cells = 0
    cls_term = scalar(0.0)
    for m, cls_map in zip(maps, targets.cls_maps):
        logits = slice4(m, c=slice(4, 4 + config.num_classes))
        n = logits.size
        cls_term = cls_term + bce(logits, cls_map) * float(n)
        total_cells += n
    cls_term = cls_term * (1.0 / total_cells)

    if targets.positives:
        losses = []
        for k, pos in enumerate(targets.positives):
            raw = maps[pos.scale]
            stride = STRIDES[pos.scale]
            px_h = raw.shape[2] * stride
            px_w = raw.shape[3] * stride
            pred = cell_box(raw, pos.image_index, pos.row, pos.col, stride, px_w, px_h)
            gt_t = Tensor(np.asarray(pos.box, dtype=pred.data.dtype).reshape(1, 4, 1, 1))
            alpha = None
            if alpha_cache is not None:
                if k not in alpha_cache:
                    alpha_cache[k] = ciou_alpha(pred.data, gt_t.data)
                alpha = alpha_cache[k]
            losses.append(ciou_loss(pred, gt_t, alpha_const=alpha))
        box_term = tmean(concat_channels(losses))
    else:
        box_term = scalar(0.0)

    total = box_term * LAMBDA_BOX + cls_term * LAMBDA_CLS
    return total, box_term, cls_term
