"""mAP@IoU evaluation with all-point interpolated average precision."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .data import DetectionDataset
from .detector import Detection, Detector, detect_batch
from .errors import InvalidInputError


def iou(a, b) -> float:
    return float(kernels.box_iou(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))[0, 0])


def match_detections(preds, gts, iou_threshold: float = 0.5) -> np.ndarray:
    """TP flags for same-class predictions sorted by descending score."""
    return kernels.greedy_match(preds, gts, iou_threshold)


def average_precision(flags: Sequence[bool], n_gt: int, scores: Sequence[float] | None = None) -> float:
    """Area under the monotone precision envelope over recall.

    ``flags`` are taken in the given order unless ``scores`` is passed, in
    which case they are stably sorted by descending score. Returns 0 when
    ``n_gt`` is 0.
    """
    if n_gt < 0:
        raise InvalidInputError("n_gt must be >= 0")
    if n_gt == 0:
        return 0.0
    flags = np.asarray(flags, dtype=bool)
    if scores is not None:
        flags = flags[np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")]
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changes = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


@dataclass
class DomainResult:
    per_class_ap: dict[str, float]
    mAP: float
    n_images: int
    n_gt: int
    gt_per_class: dict[str, int] = field(default_factory=dict)


@dataclass
class EvalReport:
    domains: dict[str, DomainResult]
    iou_threshold: float = 0.5

    def to_json(self) -> dict:
        return {"iou_threshold": self.iou_threshold,
                "domains": {k: asdict(v) for k, v in self.domains.items()}}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def maps(self) -> dict[str, float]:
        return {k: v.mAP for k, v in self.domains.items()}

    def to_markdown(self, name: str = "model") -> str:
        return markdown_table({name: self.maps()})


def markdown_table(rows: Mapping[str, Mapping[str, float]], scale: float = 100.0) -> str:
    """Rows of per-domain mAP as a markdown table (values scaled to percent)."""
    domains: list[str] = []
    for vals in rows.values():
        domains.extend(d for d in vals if d not in domains)
    lines = ["| Method | " + " | ".join(domains) + " |", "|---|" + "---|" * len(domains)]
    for name, vals in rows.items():
        cells = [f"{scale * vals[d]:.1f}" if d in vals else "-" for d in domains]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def score_predictions(predictions: Sequence[Sequence[Detection]], ground_truth: Sequence[tuple[np.ndarray, np.ndarray]],
                      class_names: Sequence[str], iou_threshold: float = 0.5) -> DomainResult:
    """Per-class AP and mAP for precomputed detections.

    ``ground_truth[i]`` is ``(boxes, labels)`` for image ``i``. The mAP
    averages over classes with at least one ground-truth box.
    """
    if len(predictions) != len(ground_truth):
        raise InvalidInputError("one prediction list per image is required")
    per_class, gt_count = {}, {}
    for k, name in enumerate(class_names, start=1):
        scores, flags = [], []
        n_gt = 0
        for dets, (gt_boxes, gt_labels) in zip(predictions, ground_truth):
            gt_k = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)[np.asarray(gt_labels) == k]
            n_gt += len(gt_k)
            mine = [d for d in dets if d.class_id == k]
            if not mine:
                continue
            order = np.argsort(-np.asarray([d.score for d in mine]), kind="stable")
            mine = [mine[i] for i in order]
            f = match_detections(np.asarray([d.box for d in mine]), gt_k, iou_threshold)
            scores.extend(d.score for d in mine)
            flags.extend(bool(v) for v in f)
        per_class[name] = average_precision(flags, n_gt, scores)
        gt_count[name] = n_gt
    present = [per_class[n] for n in class_names if gt_count[n] > 0]
    m = float(np.mean(present)) if present else 0.0
    return DomainResult(per_class, m, len(predictions), int(sum(gt_count.values())), gt_count)


def predict_dataset(model: Detector, dataset: DetectionDataset, batch_size: int = 64,
                    score_threshold: float = 0.0, nms_iou: float = 0.5) -> list[list[Detection]]:
    """Detections per image; ``model`` may also be any callable ``image -> detections``."""
    samples = dataset.samples
    if not isinstance(model, Detector):
        return [list(model(s.image)) for s in samples]
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        shapes = {s.image.shape for s in chunk}
        if len(shapes) == 1:
            out.extend(detect_batch([s.image for s in chunk], model, score_threshold, nms_iou))
        else:
            out.extend(detect_batch([s.image], model, score_threshold, nms_iou)[0] for s in chunk)
    return out


def evaluate_map(model: Detector, datasets: DetectionDataset | Mapping[str, DetectionDataset],
                 iou_threshold: float = 0.5) -> EvalReport:
    """Run the detector on every image of each dataset and score mAP@``iou_threshold``."""
    if isinstance(datasets, DetectionDataset):
        datasets = {datasets.domain or "default": datasets}
    if not datasets:
        raise InvalidInputError("no datasets given")
    results = {}
    for name, ds in datasets.items():
        if len(ds) == 0:
            raise InvalidInputError(f"dataset {name!r} is empty")
        preds = predict_dataset(model, ds)
        gts = [(s.boxes, s.labels) for s in ds.samples]
        results[name] = score_predictions(preds, gts, ds.class_names, iou_threshold)
    return EvalReport(results, iou_threshold)
