"""Detector training with stochastic semantic augmentation.

Each iteration draws a batch of source images; with probability ``theta`` one
augmentation is picked uniformly, spatially averaged to a channel vector and
added to the backbone feature map of every image in the batch, upstream of
both the RPN and the ROI heads. Batch sampling and augmentation sampling use
separate random streams, so a run with ``theta=0`` and one with all-zero
augmentations see exactly the same batches.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentationSet, pool_augmentation
from .data import DetectionDataset
from .detector import (ClassTextBank, Detector, DetectorConfig, box_regression_loss, clip_text_loss,
                       encode_boxes, rpn_loss, sample_rois)
from .embedding import EncoderBundle
from .errors import DivergenceError, InvalidInputError


@dataclass(frozen=True)
class TrainConfig:
    """Defaults follow the large-scale recipe; ``TOY_PROFILE`` holds the desk-scale overrides."""

    iterations: int = 100_000
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_at: int = 40_000
    batch_size: int = 4
    theta: float = 0.5
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 0
    hflip_prob: float = 0.5
    freeze_first_block: bool | None = None
    max_nonfinite: int = 3
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise InvalidInputError(f"theta {self.theta} outside [0, 1]")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidInputError("batch_size and learning_rate must be positive")

    def lr_at(self, iteration: int) -> float:
        lr = self.learning_rate
        if iteration >= self.lr_decay_at:
            lr = lr * self.lr_decay_factor
        if self.warmup_iters and iteration < self.warmup_iters:
            lr = lr * (iteration + 1) / self.warmup_iters
        return lr

    def to_json(self) -> dict:
        d = asdict(self)
        d["detector"] = asdict(self.detector)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        det = dict(d.pop("detector", {}))
        for key in ("anchor_ratios", "box_weights"):
            if key in det:
                det[key] = tuple(det[key])
        return cls(detector=DetectorConfig(**det), **d)


TOY_PROFILE = TrainConfig(
    iterations=2000,
    learning_rate=0.02,
    lr_decay_at=800,
    warmup_iters=100,
    detector=DetectorConfig(logit_scale=16.0),
)


@dataclass
class TrainRecord:
    iteration: int
    total: float
    rpn: float
    reg: float
    clip_t: float
    aug_applied: bool
    aug_id: int | None
    lr: float


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TrainLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([TrainRecord(**json.loads(line)) for line in lines if line.strip()])


def sample_augmentation(aug_set: AugmentationSet | None, theta: float, rng: np.random.Generator):
    """``(augmentation id, pooled channel vector)`` with probability ``theta``, else ``None``."""
    if not 0.0 <= theta <= 1.0:
        raise InvalidInputError(f"theta {theta} outside [0, 1]")
    if theta > 0 and (aug_set is None or len(aug_set) == 0):
        raise InvalidInputError("cannot sample from an empty augmentation set with theta > 0")
    if rng.random() >= theta:
        return None
    aug = aug_set.augmentations[int(rng.integers(len(aug_set)))]
    return aug.id, pool_augmentation(aug)


def _batch(dataset: DetectionDataset, idx: Sequence[int], flip: Sequence[bool]):
    images, boxes, labels = [], [], []
    for i, f in zip(idx, flip):
        s = dataset.samples[i]
        img, bx = s.image, s.boxes.copy()
        if f:
            w = img.shape[1]
            img = img[:, ::-1]
            bx[:, [0, 2]] = w - bx[:, [2, 0]]
        images.append(np.ascontiguousarray(img))
        boxes.append(bx)
        labels.append(s.labels)
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    return x, boxes, labels


def detector_losses(model: Detector, x: torch.Tensor, gts, gt_labels, rng: np.random.Generator,
                    pooled_aug: torch.Tensor | None = None):
    """(L_rpn, L_reg, L_cls) for one batch; ``pooled_aug`` is added to the backbone map."""
    h, w = x.shape[-2:]
    fm = model.backbone(x)
    if pooled_aug is not None:
        fm = fm + pooled_aug.to(fm.dtype).reshape(1, -1, 1, 1)
    props, (logits, deltas, anchors) = model.proposals(fm, (h, w))
    l_rpn = rpn_loss(model, logits, deltas, anchors, gts, rng)
    roi_boxes, roi_labels, roi_gt = [], [], []
    for (boxes, _), gt, lab in zip(props, gts, gt_labels):
        b, l, g = sample_rois(boxes, gt, lab, model.cfg, rng)
        roi_boxes.append(b)
        roi_labels.append(l)
        roi_gt.append(g)
    box_deltas, emb = model.region_heads(fm, roi_boxes)
    labels = torch.cat(roi_labels)
    l_cls = clip_text_loss(model.classify(emb), labels)
    fg = labels > 0
    if bool(fg.any()):
        target = encode_boxes(torch.cat(roi_boxes)[fg], torch.cat(roi_gt)[fg], model.cfg.box_weights)
        l_reg = box_regression_loss(box_deltas[fg], target)
    else:
        l_reg = box_deltas.sum() * 0.0
    return l_rpn, l_reg, l_cls


def train_detector(dataset: DetectionDataset, bundle: EncoderBundle, aug_set: AugmentationSet | None,
                   bank: ClassTextBank, cfg: TrainConfig = TOY_PROFILE,
                   model: Detector | None = None) -> tuple[Detector, TrainLog]:
    """Train a detector initialised from ``bundle`` on a single source domain.

    The text bank is a fixed buffer and the bundle itself is never modified.
    With a pretrained bundle the first backbone block is frozen unless
    ``cfg.freeze_first_block`` says otherwise.
    """
    if len(dataset) == 0:
        raise InvalidInputError("training dataset is empty")
    if cfg.theta > 0 and (aug_set is None or len(aug_set) == 0):
        raise InvalidInputError("theta > 0 requires a non-empty augmentation set")
    if model is None:
        model = Detector.from_bundle(bundle, bank, cfg.detector, seed=cfg.seed)
    freeze = bundle.pretrained if cfg.freeze_first_block is None else cfg.freeze_first_block
    if freeze:
        for p in model.backbone.blocks[0].parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    batch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    log = TrainLog()
    bad = 0
    model.train()
    for it in range(cfg.iterations):
        lr = cfg.lr_at(it)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = batch_rng.integers(0, len(dataset), size=cfg.batch_size)
        flip = batch_rng.random(cfg.batch_size) < cfg.hflip_prob
        x, gts, labels = _batch(dataset, idx, flip)
        picked = sample_augmentation(aug_set, cfg.theta, aug_rng) if cfg.theta > 0 else None
        l_rpn, l_reg, l_cls = detector_losses(model, x, gts, labels, batch_rng,
                                              picked[1] if picked is not None else None)
        total = l_rpn + l_reg + l_cls
        record = TrainRecord(it, float(total.detach()), float(l_rpn.detach()), float(l_reg.detach()),
                             float(l_cls.detach()), picked is not None,
                             picked[0] if picked is not None else None, lr)
        log.records.append(record)
        if not math.isfinite(record.total):
            bad += 1
            if bad >= cfg.max_nonfinite:
                raise DivergenceError(f"loss non-finite for {bad} consecutive iterations at iteration {it}", it)
            opt.zero_grad()
            continue
        bad = 0
        opt.zero_grad()
        total.backward()
        opt.step()
    model.eval()
    return model, log
