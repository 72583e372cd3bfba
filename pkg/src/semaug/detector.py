"""Minimal two-stage detector built around the split image encoder.

The feature extractor produces the backbone map, a single-scale RPN proposes
boxes, ROI-align crops 7x7 region maps, a small MLP regresses box offsets
from them, and the projector maps each region into the joint embedding space
where cosine similarity against the class text bank gives the class logits.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import archive, kernels
from .embedding import ArchConfig, EncoderBundle, FeatureExtractor, Projector, encode_texts
from .errors import InvalidInputError

CLASS_TEMPLATE = "a photo of a {name}"


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def area(self) -> float:
        return max(self.x_max - self.x_min, 0.0) * max(self.y_max - self.y_min, 0.0)


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float


@dataclass
class ClassTextBank:
    Q: torch.Tensor  # (K + 1, D); row 0 is the background
    class_names: list[str]
    template: str = CLASS_TEMPLATE

    @property
    def K(self) -> int:
        return len(self.class_names)


def build_class_bank(class_names: Sequence[str], bundle: EncoderBundle, template: str = CLASS_TEMPLATE) -> ClassTextBank:
    if len(class_names) < 1:
        raise InvalidInputError("need at least one class")
    if len(set(class_names)) != len(class_names):
        raise InvalidInputError(f"duplicate class names in {list(class_names)}")
    q = encode_texts([template.format(name=n) for n in class_names], bundle)
    bank = torch.cat([torch.zeros(1, q.shape[1]), q])
    return ClassTextBank(bank, list(class_names), template)


def class_logits(F_r, bank, logit_scale: float = 1.0) -> torch.Tensor:
    """Scaled cosine similarities between region features and every bank row.

    Similarity with an all-zero row (the background) is defined as 0.
    """
    Q = bank.Q if isinstance(bank, ClassTextBank) else torch.as_tensor(bank)
    f = torch.as_tensor(F_r)
    single = f.ndim == 1
    f = f.reshape(-1, Q.shape[1]).to(Q.dtype)
    if bool((torch.linalg.vector_norm(f, dim=-1) == 0).any()):
        raise InvalidInputError("region feature has zero norm")
    out = _cosine_logits(f, Q, logit_scale)
    return out[0] if single else out


def _cosine_logits(f, Q, logit_scale):
    qn = torch.linalg.vector_norm(Q, dim=-1)
    q_unit = Q / torch.where(qn > 0, qn, torch.ones_like(qn)).unsqueeze(-1)
    f_unit = f / torch.linalg.vector_norm(f, dim=-1, keepdim=True).clamp_min(1e-12)
    return logit_scale * (f_unit @ q_unit.T)


def clip_text_loss(logits, labels) -> torch.Tensor:
    """Mean softmax cross-entropy of region logits against class labels (0 = background)."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    logits = logits.reshape(labels.shape[0], -1)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise InvalidInputError(f"labels must lie in 0..{logits.shape[1] - 1}")
    return F.cross_entropy(logits, labels)


def box_regression_loss(pred, target, beta: float = 1.0) -> torch.Tensor:
    """Smooth-L1 summed over coordinates and averaged over regions (the leading axis)."""
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    per = F.smooth_l1_loss(pred, target, reduction="none", beta=beta)
    n = pred.shape[0] if pred.ndim >= 2 else 1
    return per.sum() / max(n, 1)


# ---------------------------------------------------------------------------
# box geometry

def encode_boxes(ref: torch.Tensor, gt: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return torch.stack([wx * (gx - rx) / rw, wy * (gy - ry) / rh,
                        ww * torch.log(gw / rw), wh * torch.log(gh / rh)], dim=1)


_MAX_LOG = math.log(1000.0 / 16)


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_MAX_LOG)
    dh = (deltas[:, 3] / wh).clamp(max=_MAX_LOG)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, height: float, width: float) -> torch.Tensor:
    return torch.stack([boxes[:, 0].clamp(0, width), boxes[:, 1].clamp(0, height),
                        boxes[:, 2].clamp(0, width), boxes[:, 3].clamp(0, height)], dim=1)


def make_anchors(h: int, w: int, stride: int, size: float, ratios: Sequence[float]) -> torch.Tensor:
    """``(h * w * len(ratios), 4)`` anchors ordered by (row, column, ratio)."""
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    shapes = torch.tensor([[size / math.sqrt(r), size * math.sqrt(r)] for r in ratios])  # (A, 2) w, h
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    aw, ah = shapes[:, 0].reshape(1, -1), shapes[:, 1].reshape(1, -1)
    return torch.stack([cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], dim=-1).reshape(-1, 4)


def roi_align(fm: torch.Tensor, boxes: Sequence[torch.Tensor], spatial_scale: float, output_size: int = 7) -> torch.Tensor:
    """Bilinear ROI-align with one sample at each bin centre.

    ``fm`` is (B, C, H, W); ``boxes[b]`` holds image-pixel corner boxes for
    image ``b``. Feature cell ``i`` covers ``[i, i + 1)`` in scaled
    coordinates and samples outside the map are clamped to its border.
    Returns (sum n_b, C, output_size, output_size).
    """
    _, c, h, w = fm.shape
    grid = (torch.arange(output_size, dtype=fm.dtype) + 0.5) / output_size
    outs = []
    for b, bx in enumerate(boxes):
        if len(bx) == 0:
            continue
        bx = bx.to(fm.dtype) * spatial_scale
        ys = bx[:, 1:2] + grid.unsqueeze(0) * (bx[:, 3:4] - bx[:, 1:2]) - 0.5  # (n, S)
        xs = bx[:, 0:1] + grid.unsqueeze(0) * (bx[:, 2:3] - bx[:, 0:1]) - 0.5
        ys = ys.clamp(0, h - 1)
        xs = xs.clamp(0, w - 1)
        y0 = ys.floor().long()
        x0 = xs.floor().long()
        y1 = (y0 + 1).clamp(max=h - 1)
        x1 = (x0 + 1).clamp(max=w - 1)
        ly = (ys - y0).unsqueeze(2)  # (n, S, 1)
        lx = (xs - x0).unsqueeze(1)  # (n, 1, S)
        f = fm[b]

        def gather(yi, xi):
            return f[:, yi.unsqueeze(2), xi.unsqueeze(1)]  # (C, n, S, S)

        val = (gather(y0, x0) * (1 - ly) * (1 - lx) + gather(y0, x1) * (1 - ly) * lx
               + gather(y1, x0) * ly * (1 - lx) + gather(y1, x1) * ly * lx)
        outs.append(val.permute(1, 0, 2, 3))
    if not outs:
        return fm.new_zeros((0, c, output_size, output_size))
    return torch.cat(outs)


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class DetectorConfig:
    anchor_size: float = 20.0
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    rpn_batch_per_image: int = 64
    rpn_nms_iou: float = 0.7
    rpn_post_nms_top_n: int = 64
    roi_size: int = 7
    roi_per_image: int = 32
    fg_fraction: float = 0.25
    fg_iou: float = 0.5
    logit_scale: float = 1.0
    classifier: str = "text"
    box_head_hidden: int = 256
    detections_per_image: int = 50
    box_weights: tuple[float, ...] = (10.0, 10.0, 5.0, 5.0)

    def __post_init__(self):
        if self.classifier not in ("text", "linear"):
            raise InvalidInputError(f"classifier must be 'text' or 'linear', got {self.classifier!r}")


class RPNHead(nn.Module):
    def __init__(self, channels: int, n_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, n_anchors, 1)
        self.deltas = nn.Conv2d(channels, 4 * n_anchors, 1)

    def forward(self, fm):
        x = F.relu(self.conv(fm))
        b = fm.shape[0]
        logits = self.objectness(x).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.deltas(x).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return logits, deltas


class Detector(nn.Module):
    def __init__(self, arch: ArchConfig, bank: ClassTextBank, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.arch = arch
        self.cfg = cfg
        self.class_names = list(bank.class_names)
        self.backbone = FeatureExtractor(arch)
        self.projector = Projector(arch)
        self.rpn = RPNHead(arch.channels, len(cfg.anchor_ratios))
        c = arch.channels * cfg.roi_size * cfg.roi_size
        self.box_head = nn.Sequential(nn.Flatten(), nn.Linear(c, cfg.box_head_hidden), nn.ReLU(),
                                      nn.Linear(cfg.box_head_hidden, 4))
        self.register_buffer("bank", bank.Q.clone().float())
        if cfg.classifier == "linear":
            self.linear_classifier = nn.Linear(arch.d_embed, bank.K + 1)

    @classmethod
    def from_bundle(cls, bundle: EncoderBundle, bank: ClassTextBank, cfg: DetectorConfig = DetectorConfig(),
                    seed: int = 0) -> "Detector":
        """Detector whose backbone/projector start from copies of ``bundle``'s image encoder."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(bundle.cfg, bank, cfg)
        model.backbone.load_state_dict(copy.deepcopy(bundle.feature_extractor.state_dict()))
        model.projector.load_state_dict(copy.deepcopy(bundle.projector.state_dict()))
        return model

    @property
    def stride(self) -> int:
        return self.arch.stride

    @property
    def text_bank(self) -> ClassTextBank:
        return ClassTextBank(self.bank, self.class_names)

    def anchors(self, h: int, w: int) -> torch.Tensor:
        return make_anchors(h, w, self.stride, self.cfg.anchor_size, self.cfg.anchor_ratios)

    def classify(self, region_emb: torch.Tensor) -> torch.Tensor:
        if self.cfg.classifier == "linear":
            return self.linear_classifier(region_emb)
        return _cosine_logits(region_emb, self.bank, self.cfg.logit_scale)

    def proposals(self, fm: torch.Tensor, image_hw: tuple[int, int], top_n: int | None = None):
        """Per-image (boxes, objectness) after decoding, clipping and NMS; detached."""
        logits, deltas = self.rpn(fm)
        h, w = fm.shape[-2:]
        anchors = self.anchors(h, w)
        top_n = self.cfg.rpn_post_nms_top_n if top_n is None else top_n
        out = []
        with torch.no_grad():
            for b in range(fm.shape[0]):
                boxes = clip_boxes(decode_boxes(anchors, deltas[b].detach()), *image_hw)
                scores = torch.sigmoid(logits[b].detach())
                ok = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
                boxes, scores = boxes[ok], scores[ok]
                keep = kernels.nms(boxes.numpy(), scores.numpy(), self.cfg.rpn_nms_iou)[:max(top_n, 0)]
                keep = torch.from_numpy(keep)
                out.append((boxes[keep], scores[keep]))
        return out, (logits, deltas, anchors)

    def region_heads(self, fm: torch.Tensor, boxes: Sequence[torch.Tensor]):
        rois = roi_align(fm, boxes, 1.0 / self.stride, self.cfg.roi_size)
        deltas = self.box_head(rois)
        emb = self.projector(rois)
        return deltas, emb


def rpn_targets(anchors: torch.Tensor, gt: np.ndarray, cfg: DetectorConfig, rng: np.random.Generator):
    """Sampled anchor labels (1 fg, 0 bg, -1 ignore) and matched gt index per anchor."""
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0:
        labels[:] = 0
        matched = np.zeros(n, dtype=np.int64)
    else:
        iou = kernels.box_iou(anchors.numpy(), gt)
        matched = iou.argmax(axis=1)
        best = iou.max(axis=1)
        labels[best < cfg.rpn_neg_iou] = 0
        labels[best >= cfg.rpn_pos_iou] = 1
        per_gt = iou.max(axis=0)
        for g in range(len(gt)):
            if per_gt[g] > 0:
                hits = np.nonzero(iou[:, g] == per_gt[g])[0]
                labels[hits] = 1
                matched[hits] = g
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos), cfg.rpn_batch_per_image // 2)
    n_neg = min(len(neg), cfg.rpn_batch_per_image - n_pos)
    sampled = np.full(n, -1, dtype=np.int64)
    if n_pos:
        sampled[rng.choice(pos, n_pos, replace=False)] = 1
    if n_neg:
        sampled[rng.choice(neg, n_neg, replace=False)] = 0
    return sampled, matched


def rpn_loss(model: Detector, logits, deltas, anchors, gts: Sequence[np.ndarray], rng: np.random.Generator):
    obj_losses, reg_losses = [], []
    for b, gt in enumerate(gts):
        labels, matched = rpn_targets(anchors, gt, model.cfg, rng)
        sel = torch.from_numpy(np.nonzero(labels >= 0)[0])
        target = torch.from_numpy(labels[sel.numpy()]).float()
        obj_losses.append(F.binary_cross_entropy_with_logits(logits[b, sel], target))
        pos = np.nonzero(labels == 1)[0]
        if len(pos):
            pos_t = torch.from_numpy(pos)
            tgt = encode_boxes(anchors[pos_t], torch.from_numpy(gt[matched[pos]]).float())
            reg_losses.append(box_regression_loss(deltas[b, pos_t], tgt))
    obj = torch.stack(obj_losses).mean()
    reg = torch.stack(reg_losses).mean() if reg_losses else deltas.sum() * 0.0
    return obj + reg


def sample_rois(proposals: torch.Tensor, gt: np.ndarray, gt_labels: np.ndarray, cfg: DetectorConfig,
                rng: np.random.Generator):
    """(boxes, class labels, matched gt boxes) for up to ``roi_per_image`` regions."""
    boxes = proposals
    if len(gt):
        boxes = torch.cat([proposals, torch.from_numpy(gt).float()])
    if len(gt) == 0:
        n = min(len(boxes), cfg.roi_per_image)
        idx = rng.choice(len(boxes), n, replace=False) if n else np.zeros(0, dtype=np.int64)
        idx = torch.from_numpy(np.asarray(idx, dtype=np.int64))
        return boxes[idx], torch.zeros(len(idx), dtype=torch.long), boxes[idx]
    iou = kernels.box_iou(boxes.numpy(), gt)
    best = iou.max(axis=1)
    matched = iou.argmax(axis=1)
    fg = np.nonzero(best >= cfg.fg_iou)[0]
    bg = np.nonzero(best < cfg.fg_iou)[0]
    n_fg = min(len(fg), int(round(cfg.roi_per_image * cfg.fg_fraction)))
    n_bg = min(len(bg), cfg.roi_per_image - n_fg)
    fg = rng.choice(fg, n_fg, replace=False) if n_fg else fg[:0]
    bg = rng.choice(bg, n_bg, replace=False) if n_bg else bg[:0]
    idx = np.concatenate([fg, bg]).astype(np.int64)
    labels = np.concatenate([gt_labels[matched[fg]], np.zeros(len(bg), dtype=np.int64)])
    idx_t = torch.from_numpy(idx)
    return boxes[idx_t], torch.from_numpy(labels), torch.from_numpy(gt[matched[idx]]).float()


# ---------------------------------------------------------------------------
# public single-map operations

def _fm_batch(fm) -> torch.Tensor:
    return torch.as_tensor(fm).float().permute(2, 0, 1).unsqueeze(0)


def propose_regions(fm, model: Detector, n: int | None = None, image_size: tuple[int, int] | None = None,
                    targets: np.ndarray | None = None, rng: np.random.Generator | None = None):
    """Proposals for one ``H x W x C`` map as ``[(Box, objectness)]``.

    When ``targets`` (gt boxes) are given the RPN training loss is returned as
    the second element, otherwise ``None``.
    """
    x = _fm_batch(fm)
    h, w = x.shape[-2:]
    image_hw = image_size or (h * model.stride, w * model.stride)
    (props,), (logits, deltas, anchors) = model.proposals(x, image_hw, n)
    boxes, scores = props
    out = [(Box(*map(float, b)), float(s)) for b, s in zip(boxes.tolist(), scores.tolist())]
    loss = None
    if targets is not None:
        gt = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
        loss = rpn_loss(model, logits, deltas, anchors, [gt], rng or np.random.default_rng(0))
    return out, loss


def roi_features(fm, boxes, encoder) -> torch.Tensor:
    """Region embeddings ``(n, D)`` for image-pixel ``boxes`` on one ``H x W x C`` map.

    ``encoder`` is an ``EncoderBundle`` or a ``Detector``.
    """
    b = torch.as_tensor(np.asarray(boxes, dtype=np.float32)).reshape(-1, 4)
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    if bool(((b[:, 2] <= b[:, 0]) | (b[:, 3] <= b[:, 1]) | (area < 1.0)).any()):
        raise InvalidInputError("degenerate box (area < 1 px^2)")
    stride = encoder.stride if isinstance(encoder, Detector) else encoder.cfg.stride
    projector = encoder.projector
    x = _fm_batch(fm).to(next(projector.parameters()).dtype)
    size = encoder.cfg.roi_size if isinstance(encoder, Detector) else 7
    with torch.no_grad():
        return projector(roi_align(x, [b], 1.0 / stride, size))


# ---------------------------------------------------------------------------
# inference

def _images_tensor(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def detect_batch(images, model: Detector, score_threshold: float = 0.0, nms_iou: float = 0.5) -> list[list[Detection]]:
    """Run ``detect`` on equally sized images in one forward pass."""
    model.eval()
    x = _images_tensor(images)
    h, w = x.shape[-2:]
    fm = model.backbone(x)
    props, _ = model.proposals(fm, (h, w))
    boxes = [p[0] for p in props]
    results: list[list[Detection]] = [[] for _ in images]
    if sum(len(b) for b in boxes) == 0:
        return results
    deltas, emb = model.region_heads(fm, boxes)
    probs = torch.softmax(model.classify(emb), dim=-1)
    refined = clip_boxes(decode_boxes(torch.cat(boxes), deltas, model.cfg.box_weights), h, w)
    offset = 0
    for b, bx in enumerate(boxes):
        n = len(bx)
        p = probs[offset:offset + n]
        r = refined[offset:offset + n]
        offset += n
        cls = p.argmax(dim=1)
        score = p.max(dim=1).values
        ok = (cls > 0) & (score > score_threshold) & ((r[:, 2] - r[:, 0]) > 0) & ((r[:, 3] - r[:, 1]) > 0)
        dets = []
        for k in torch.unique(cls[ok]).tolist():
            m = torch.nonzero(ok & (cls == k)).reshape(-1)
            keep = kernels.nms(r[m].double().numpy(), score[m].double().numpy(), nms_iou)
            for i in m[torch.from_numpy(keep)].tolist():
                dets.append(Detection(Box(*map(float, r[i].tolist())), int(k), float(score[i])))
        dets.sort(key=lambda d: -d.score)
        results[b] = dets[:model.cfg.detections_per_image]
    return results


def detect(image, model: Detector, score_threshold: float = 0.0, nms_iou: float = 0.5) -> list[Detection]:
    """Detections for one ``H x W x 3`` image.

    Regions whose most likely class is the background are discarded; the rest
    go through per-class NMS and must score strictly above
    ``score_threshold``. No augmentation is ever applied here.
    """
    return detect_batch([image], model, score_threshold, nms_iou)[0]


# ---------------------------------------------------------------------------
# persistence

def save_detector(model: Detector, path: str | Path, meta: dict | None = None) -> None:
    archive.write_archive(path, model.state_dict())
    cfg = asdict(model.cfg)
    archive.dump_json({
        "kind": "detector",
        "arch": model.arch.to_json(),
        "detector": cfg,
        "class_names": model.class_names,
        **(meta or {}),
    }, archive.sidecar_path(path))


def load_detector(path: str | Path) -> Detector:
    meta = archive.load_json(archive.sidecar_path(path))
    arch = ArchConfig.from_json(meta["arch"])
    d = dict(meta["detector"])
    d["anchor_ratios"] = tuple(d["anchor_ratios"])
    d["box_weights"] = tuple(d["box_weights"])
    cfg = DetectorConfig(**d)
    tensors = archive.read_archive(path)
    bank = ClassTextBank(torch.from_numpy(tensors["bank"]), meta["class_names"])
    model = Detector(arch, bank, cfg)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model
