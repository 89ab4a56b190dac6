"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops (or the most literal
numpy transliteration of the definition) so that agreement with the vectorized
library code is meaningful.  Keep these slow and obvious.
"""

from __future__ import annotations

import numpy as np


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 groups: int = 1) -> np.ndarray:
    n, cin, h, ww = x.shape
    cout, cin_g, k, _ = w.shape
    assert cin % groups == 0 and cout % groups == 0 and cin_g == cin // groups
    xp = np.zeros((n, cin, h + 2 * padding, ww + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + ww] = x
    hp, wp = xp.shape[2], xp.shape[3]
    span = dilation * (k - 1) + 1
    ho = (hp - span) // stride + 1
    wo = (wp - span) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    cpg_out = cout // groups
    for ni in range(n):
        for oc in range(cout):
            g = oc // cpg_out
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0
                    for ic in range(cin_g):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (xp[ni, g * cin_g + ic,
                                           oi * stride + ki * dilation,
                                           oj * stride + kj * dilation]
                                        * w[oc, ic, ki, kj])
                    out[ni, oc, oi, oj] = acc
    if b is not None:
        out = out + b.reshape(1, cout, 1, 1)
    return out


def naive_pool2d(x: np.ndarray, kind: str, kernel: int = 2, stride: int = 2,
                 padding: int = 0) -> np.ndarray:
    n, c, h, w = x.shape
    fill = -np.inf if kind == "max" else 0.0
    xp = np.full((n, c, h + 2 * padding, w + 2 * padding), fill, dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (xp.shape[2] - kernel) // stride + 1
    wo = (xp.shape[3] - kernel) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    win = xp[ni, ci, oi * stride:oi * stride + kernel,
                             oj * stride:oj * stride + kernel]
                    if kind == "max":
                        out[ni, ci, oi, oj] = win.max()
                    else:
                        out[ni, ci, oi, oj] = win.sum() / (kernel * kernel)
    return out


def naive_linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    n, cin = x.shape[0], x.shape[1]
    cout = w.shape[0]
    out = np.zeros((n, cout, 1, 1), dtype=x.dtype)
    for ni in range(n):
        for oc in range(cout):
            acc = 0.0
            for ic in range(cin):
                acc += x[ni, ic, 0, 0] * w[oc, ic, 0, 0]
            out[ni, oc, 0, 0] = acc
    if b is not None:
        out = out + b.reshape(1, cout, 1, 1)
    return out


def naive_partial_conv(x: np.ndarray, w: np.ndarray, r: int = 4) -> np.ndarray:
    cp = x.shape[1] // r
    out = x.copy()
    out[:, :cp] = naive_conv2d(x[:, :cp], w, None, stride=1, padding=1,
                               dilation=1, groups=cp)
    return out


# ---------------------------------------------------------------------------
# Box / metric references

def corners(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou_ref(box_a, box_b) -> float:
    ax1, ay1, ax2, ay2 = corners(box_a)
    bx1, by1, bx2, by2 = corners(box_b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def nms_ref(dets, iou_threshold: float):
    """Quadratic greedy NMS: per class, score-descending (ties: class, order)."""
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].score, dets[i].class_id, i))
    kept = []
    for i in order:
        drop = False
        for j in kept:
            if dets[j].class_id == dets[i].class_id and \
                    iou_ref(dets[j].box, dets[i].box) >= iou_threshold:
                drop = True
                break
        if not drop:
            kept.append(i)
    return [dets[i] for i in kept]


def match_ref(dets, gts, iou_t: float):
    """Greedy matcher: detections by (-score, input order); each claims the
    unmatched same-image same-class GT with max IoU >= t (ties: lowest GT
    index).  Returns TP flags in that detection order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = [False] * len(gts)
    flags = []
    for di in order:
        d = dets[di]
        best_iou, best_gi = -1.0, -1
        for gi, g in enumerate(gts):
            if used[gi] or g.image != d.image or g.class_id != d.class_id:
                continue
            v = iou_ref(d.box, g.box)
            if v > best_iou:
                best_iou, best_gi = v, gi
        if best_gi >= 0 and best_iou >= iou_t:
            used[best_gi] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def ap_ref(dets, gts, iou_t: float) -> float:
    """101-point AP, per class then averaged over ground-truth classes."""
    classes = sorted({g.class_id for g in gts})
    if not classes:
        return 0.0
    aps = []
    for cls in classes:
        cdets = [d for d in dets if d.class_id == cls]
        cgts = [g for g in gts if g.class_id == cls]
        flags = match_ref(cdets, cgts, iou_t)
        if not cgts:
            aps.append(0.0)
            continue
        tp = fp = 0
        points = []  # (recall, precision) after each detection
        for f in flags:
            tp, fp = tp + int(f), fp + int(not f)
            points.append((tp / len(cgts), tp / (tp + fp)))
        total = 0.0
        for i in range(101):
            r = i / 100.0
            best = 0.0
            for (rec, prec) in points:
                if rec >= r and prec > best:
                    best = prec
            total += best
        aps.append(total / 101.0)
    return sum(aps) / len(aps)


def pr_ref(dets, gts, iou_t: float, conf_t: float):
    kept = [d for d in dets if d.score >= conf_t]
    flags = match_ref(kept, gts, iou_t)
    tp = sum(flags)
    fp = len(kept) - tp
    fn = len(gts) - tp
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1
