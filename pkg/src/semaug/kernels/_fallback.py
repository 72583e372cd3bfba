"""Pure numpy versions of the compiled box kernels.

Behaviour is identical to ``_core``: boxes are ``(x_min, y_min, x_max, y_max)``
float64 rows, ties in score keep input order.
"""
import numpy as np


def box_iou(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def nms(boxes, scores, iou_threshold):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        if len(rest):
            overlaps = box_iou(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[overlaps > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def greedy_match(preds, gts, iou_threshold):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    flags = np.zeros(len(preds), dtype=bool)
    if len(gts) == 0:
        return flags
    overlaps = box_iou(preds, gts)
    used = np.zeros(len(gts), dtype=bool)
    for i in range(len(preds)):
        row = np.where(used, -1.0, overlaps[i])
        j = int(np.argmax(row))
        if row[j] > iou_threshold:
            used[j] = True
            flags[i] = True
    return flags
