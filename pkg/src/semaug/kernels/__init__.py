"""Box kernels with a compiled backend and a numpy fallback.

The compiled module is used when it was built (``pip install -e .`` with
Cython available) unless ``SEMAUG_PURE_PYTHON=1`` is set. ``BACKEND`` names the
active implementation.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if not os.environ.get("SEMAUG_PURE_PYTHON"):
    try:
        from . import _core as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _fallback


def _boxes(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 4))


def box_iou(a, b):
    """Pairwise IoU matrix of shape ``(len(a), len(b))``."""
    return _impl.box_iou(_boxes(a), _boxes(b))


def nms(boxes, scores, iou_threshold):
    """Indices kept by greedy NMS, highest score first.

    A box is suppressed when its IoU with an already kept box exceeds
    ``iou_threshold``.
    """
    scores = np.ascontiguousarray(np.asarray(scores, dtype=np.float64).reshape(-1))
    return _impl.nms(_boxes(boxes), scores, float(iou_threshold))


def greedy_match(preds, gts, iou_threshold):
    """TP flags for predictions already sorted by descending score.

    Each ground truth is consumed at most once; a prediction is a true
    positive iff its best still-unconsumed ground truth has IoU strictly
    above ``iou_threshold``.
    """
    return _impl.greedy_match(_boxes(preds), _boxes(gts), float(iou_threshold))


__all__ = ["BACKEND", "box_iou", "nms", "greedy_match"]
