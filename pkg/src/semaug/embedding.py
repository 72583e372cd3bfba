"""Joint image-text encoders.

The image encoder is split at the seam where augmentations are injected:
``FeatureExtractor`` maps an image to a feature map and ``Projector`` pools
that map and projects it into the joint embedding space. ``TextEncoder`` is a
bag-of-tokens encoder. Together with a contrastive pretraining routine they
form a small deterministic stand-in for a CLIP-style model.

Public functions take channels-last tensors (``H x W x C`` feature maps,
``H x W x 3`` images); the modules work on channels-first batches.
"""
from __future__ import annotations

import copy
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import archive
from .data import TIME_WORDS, TOY_CLASSES, WEATHER_WORDS, CaptionedImage
from .errors import InvalidInputError

UNK = "<unk>"

_BASE_WORDS = (
    "a", "an", "the", "of", "on", "in", "during", "taken", "photo", "image", "with",
    "weather", "clear", "dark", "dusk", "foggy", "rainy", "snowy", "sunny",
    "desert", "ocean", "forest", "mountain",
    "bus", "bike", "car", "motorbike", "person", "rider", "truck",
)
DEFAULT_VOCAB = tuple(dict.fromkeys((UNK,) + _BASE_WORDS + TOY_CLASSES + WEATHER_WORDS + TIME_WORDS))

_TOKEN_RE = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class ArchConfig:
    """Encoder hyperparameters.

    ``embed_scale`` is a fixed gain on the image embedding. Contrastive
    pretraining and every cosine-based consumer are invariant to it; it only
    sets how large a unit-length prompt shift is relative to raw image
    embeddings.
    """

    channels: int = 32
    stem_channels: int = 16
    stride: int = 8
    d_embed: int = 32
    token_dim: int = 32
    pooling: str = "attention"
    embed_scale: float = 0.1
    vocab: tuple[str, ...] = DEFAULT_VOCAB

    def __post_init__(self):
        if self.pooling not in ("attention", "average"):
            raise InvalidInputError(f"pooling must be 'attention' or 'average', got {self.pooling!r}")
        if self.stride < 4 or self.stride & (self.stride - 1):
            raise InvalidInputError(f"stride must be a power of two >= 4, got {self.stride}")
        if min(self.channels, self.stem_channels, self.d_embed, self.token_dim) <= 0:
            raise InvalidInputError("layer sizes must be positive")
        if self.vocab[0] != UNK:
            raise InvalidInputError(f"vocab[0] must be {UNK!r}")

    @property
    def min_image_size(self) -> int:
        return 4 * self.stride

    def to_json(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["vocab"] = tuple(d["vocab"])
        return cls(**d)


# documented large configuration: 224 px crops -> 14 x 14 x 1024 feature maps
CLIP_SCALE = ArchConfig(channels=1024, stem_channels=64, stride=16, d_embed=512, token_dim=512)


def _conv(c_in: int, c_out: int, stride: int) -> list[nn.Module]:
    conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
    nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
    return [conv, nn.GroupNorm(min(8, c_out), c_out), nn.ReLU()]


class FeatureExtractor(nn.Module):
    """Conv stages that halve resolution (stride-2 conv, then a stride-1 conv),
    followed by a 2x2 average pool; total stride is ``cfg.stride``.

    Inputs are ``[0, 1]`` images and are centred on 0.5 before the first conv.
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        n_stage = int(math.log2(cfg.stride)) - 1
        blocks = []
        c_in = 3
        for i in range(n_stage):
            c_out = cfg.channels if i == n_stage - 1 else cfg.stem_channels * 2 ** i
            blocks.append(nn.Sequential(*_conv(c_in, c_out, 2), *_conv(c_out, c_out, 1)))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        x = x - 0.5
        for block in self.blocks:
            x = block(x)
        return self.pool(x)


class Projector(nn.Module):
    """Spatial pooling (single-head attention or mean) and a linear map to the embedding space.

    The attention pool returns a convex combination of the raw feature
    vectors, so on a spatially constant map both pooling modes agree.
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        c = cfg.channels
        self.pooling = cfg.pooling
        self.embed_scale = cfg.embed_scale
        self.query = nn.Linear(c, c, bias=False)
        self.key = nn.Linear(c, c, bias=False)
        self.pos = nn.Linear(2, c, bias=False)
        self.proj = nn.Linear(c, cfg.d_embed)

    def pool(self, x):
        tokens = x.flatten(2).transpose(1, 2)  # (B, HW, C)
        if self.pooling == "average":
            return tokens.mean(dim=1)
        h, w = x.shape[-2:]
        ys = (torch.arange(h, dtype=x.dtype) + 0.5) / h * 2 - 1
        xs = (torch.arange(w, dtype=x.dtype) + 0.5) / w * 2 - 1
        coords = torch.stack(torch.meshgrid(ys, xs, indexing="ij"), dim=-1).reshape(1, h * w, 2)
        keys = self.key(tokens) + self.pos(coords)
        query = self.query(tokens.mean(dim=1))
        scores = (keys @ query.unsqueeze(-1)).squeeze(-1) / math.sqrt(tokens.shape[-1])
        weights = torch.softmax(scores, dim=1)
        return (weights.unsqueeze(-1) * tokens).sum(dim=1)

    def forward(self, x):
        return self.embed_scale * self.proj(self.pool(x))


class TextEncoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.vocab = {w: i for i, w in enumerate(cfg.vocab)}
        self.tokens = nn.Embedding(len(cfg.vocab), cfg.token_dim)
        self.proj = nn.Linear(cfg.token_dim, cfg.d_embed)

    def ids(self, text: str) -> list[int]:
        return [self.vocab.get(t, 0) for t in tokenize(text)]

    def forward(self, texts: Sequence[str]):
        rows = []
        for text in texts:
            ids = self.ids(text)
            if not ids:
                raise InvalidInputError(f"prompt {text!r} has no tokens")
            rows.append(self.tokens(torch.tensor(ids)).mean(dim=0))
        return self.proj(torch.stack(rows))


@dataclass
class EncoderBundle:
    cfg: ArchConfig
    feature_extractor: FeatureExtractor
    projector: Projector
    text_encoder: TextEncoder
    pretrained: bool = False
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def d_embed(self) -> int:
        return self.cfg.d_embed

    @property
    def pooling_mode(self) -> str:
        return self.projector.pooling

    def modules(self):
        return {"feature_extractor": self.feature_extractor, "projector": self.projector,
                "text_encoder": self.text_encoder}

    def state_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, mod in self.modules().items():
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def copy(self) -> "EncoderBundle":
        return copy.deepcopy(self)

    def with_pooling(self, pooling: str) -> "EncoderBundle":
        out = self.copy()
        out.cfg = replace(out.cfg, pooling=pooling)
        out.projector.pooling = pooling
        return out


def build_bundle(cfg: ArchConfig = ArchConfig(), seed: int = 0) -> EncoderBundle:
    """Randomly initialised bundle; parameters depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        fe = FeatureExtractor(cfg)
        pr = Projector(cfg)
        te = TextEncoder(cfg)
    for m in (fe, pr, te):
        m.eval()
    return EncoderBundle(cfg, fe, pr, te, pretrained=False, seed=seed)


def load_clip_weights(path):
    """Loading external pretrained CLIP checkpoints is not supported; use the toy bundle."""
    raise NotImplementedError("external CLIP checkpoints are out of scope for this package")


def _image_batch(images) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(images, dtype=np.float32)) if not torch.is_tensor(images) else images.float()
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def encode_text(prompt: str, bundle: EncoderBundle) -> torch.Tensor:
    if not prompt or not prompt.strip():
        raise InvalidInputError("prompt must be non-empty")
    with torch.no_grad():
        return bundle.text_encoder([prompt])[0]


def encode_texts(prompts: Sequence[str], bundle: EncoderBundle) -> torch.Tensor:
    for p in prompts:
        if not p or not p.strip():
            raise InvalidInputError("prompt must be non-empty")
    with torch.no_grad():
        return bundle.text_encoder(list(prompts))


def encode_image_features(image, bundle: EncoderBundle) -> torch.Tensor:
    """``H_img x W_img x 3`` image -> ``H x W x C`` feature map."""
    x = _image_batch(image)
    h, w = x.shape[-2:]
    if min(h, w) < bundle.cfg.min_image_size:
        raise InvalidInputError(f"image {h}x{w} smaller than minimum {bundle.cfg.min_image_size}")
    with torch.no_grad():
        fm = bundle.feature_extractor(x)
    return fm[0].permute(1, 2, 0)


def project_features(fm, bundle: EncoderBundle) -> torch.Tensor:
    fm = torch.as_tensor(fm)
    if fm.ndim != 3 or fm.shape[-1] != bundle.cfg.channels:
        raise InvalidInputError(f"feature map shape {tuple(fm.shape)} does not end in {bundle.cfg.channels} channels")
    x = fm.to(next(bundle.projector.parameters()).dtype).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        return bundle.projector(x)[0]


def encode_image(image, bundle: EncoderBundle) -> torch.Tensor:
    return project_features(encode_image_features(image, bundle), bundle)


def encode_images(images, bundle: EncoderBundle, batch_size: int = 256) -> torch.Tensor:
    """Batched ``encode_image`` for a stack of same-sized images."""
    x = _image_batch(images)
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(bundle.projector(bundle.feature_extractor(x[i:i + batch_size])))
    return torch.cat(out)


# ---------------------------------------------------------------------------
# contrastive pretraining

@dataclass(frozen=True)
class ToyPretrainConfig:
    epochs: int = 25
    batch_size: int = 64
    learning_rate: float = 2e-3
    temperature: float = 0.07
    seed: int = 0
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0 or self.temperature <= 0:
            raise InvalidInputError("pretraining hyperparameters must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise InvalidInputError("holdout_fraction must be in [0, 1)")


def split_corpus(dataset: Sequence[CaptionedImage], holdout_fraction: float):
    n_hold = int(round(len(dataset) * holdout_fraction))
    n_train = len(dataset) - n_hold
    return list(dataset[:n_train]), list(dataset[n_train:])


def _contrastive_loss(img_emb, txt_emb, captions, temperature):
    img = F.normalize(img_emb, dim=-1)
    txt = F.normalize(txt_emb, dim=-1)
    logits = img @ txt.T / temperature
    same = torch.tensor([[a == b for b in captions] for a in captions], dtype=logits.dtype)
    target = same / same.sum(dim=1, keepdim=True)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target.T))


def pretrain_toy_embedding(dataset: Sequence[CaptionedImage], cfg: ToyPretrainConfig = ToyPretrainConfig(),
                           arch: ArchConfig = ArchConfig()) -> EncoderBundle:
    """Contrastively train image and text towers on captioned synthetic images.

    The last ``holdout_fraction`` of ``dataset`` is never trained on; the
    matched-minus-mismatched cosine gap on it is stored in ``bundle.meta``.
    """
    if len(dataset) == 0:
        raise InvalidInputError("pretraining dataset is empty")
    bundle = build_bundle(arch, cfg.seed)
    train, held = split_corpus(dataset, cfg.holdout_fraction)
    if not train:
        raise InvalidInputError("no training items after the held-out split")
    images = _image_batch(np.stack([d.image for d in train]))
    captions = [d.caption for d in train]
    params = [p for m in bundle.modules().values() for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for m in bundle.modules().values():
        m.train()
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            caps = [captions[i] for i in idx]
            img_emb = bundle.projector(bundle.feature_extractor(images[idx]))
            txt_emb = bundle.text_encoder(caps)
            loss = _contrastive_loss(img_emb, txt_emb, caps, cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    for m in bundle.modules().values():
        m.eval()
    bundle.pretrained = cfg.epochs > 0
    bundle.meta = {"pretrain": asdict(cfg), "final_loss": losses[-1] if losses else None,
                   "n_train": len(train), "n_holdout": len(held)}
    if held:
        bundle.meta["holdout_gap"] = contrastive_gap(bundle, held)
    return bundle


def contrastive_gap(bundle: EncoderBundle, items: Sequence[CaptionedImage]) -> float:
    """Mean matched image/caption cosine minus mean mismatched cosine.

    Pairs whose captions are identical count as matched.
    """
    img = F.normalize(encode_images(np.stack([d.image for d in items]), bundle), dim=-1)
    txt = F.normalize(encode_texts([d.caption for d in items], bundle), dim=-1)
    sims = img @ txt.T
    caps = [d.caption for d in items]
    same = torch.tensor([[a == b for b in caps] for a in caps])
    return float(sims[same].mean() - sims[~same].mean())


# ---------------------------------------------------------------------------
# persistence

def save_bundle(bundle: EncoderBundle, path: str | Path) -> None:
    archive.write_archive(path, bundle.state_dict())
    archive.dump_json({
        "kind": "encoder_bundle",
        "arch": bundle.cfg.to_json(),
        "pretrained": bundle.pretrained,
        "seed": bundle.seed,
        "meta": bundle.meta,
    }, archive.sidecar_path(path))


def load_bundle(path: str | Path) -> EncoderBundle:
    meta = archive.load_json(archive.sidecar_path(path))
    cfg = ArchConfig.from_json(meta["arch"])
    bundle = build_bundle(cfg, meta.get("seed", 0))
    tensors = archive.read_archive(path)
    for prefix, mod in bundle.modules().items():
        sd = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix + ".")}
        mod.load_state_dict(sd)
    bundle.pretrained = bool(meta.get("pretrained", False))
    bundle.meta = meta.get("meta", {})
    return bundle
