"""Text-guided feature-map augmentations.

For every target prompt ``j`` an additive tensor ``A_j`` (``H x W x C``) is
learned so that projecting ``features + A_j`` moves a crop's embedding ``z``
toward ``z + unit(q_t_j - q_s)``. The objective per crop and prompt is the
cosine distance to that target plus an L1 penalty on the embedding change;
only the ``A_j`` are optimised, the encoders stay frozen.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import archive
from .data import random_crops
from .embedding import EncoderBundle, encode_texts
from .errors import DegenerateShiftError, InvalidInputError
from .prompts import PromptSet

SHIFT_EPS = 1e-12


@dataclass
class Augmentation:
    id: int
    tensor: torch.Tensor  # (H, W, C)
    prompt_id: int


@dataclass
class AugmentationSet:
    augmentations: list[Augmentation]
    source_embedding: torch.Tensor
    optimizer_log: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.augmentations)

    def stacked(self) -> torch.Tensor:
        """``(M, H, W, C)`` tensor of all augmentations."""
        return torch.stack([a.tensor for a in self.augmentations])

    def pooled(self) -> torch.Tensor:
        """``(M, C)`` channel-wise spatial means."""
        return self.stacked().mean(dim=(1, 2))


@dataclass(frozen=True)
class OptConfig:
    iterations: int = 1000
    learning_rate: float = 0.01
    crop_size: int = 64
    crops_per_image: int = 4
    images_per_batch: int = 1
    l1_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be > 0")
        if self.l1_weight < 0:
            raise InvalidInputError("l1_weight must be >= 0")
        if self.crops_per_image < 1 or self.images_per_batch < 1:
            raise InvalidInputError("crop batch sizes must be >= 1")


def _vec(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.get_default_dtype()) if not torch.is_tensor(x) else x


def embedding_shift(q_s, q_t) -> torch.Tensor:
    """Unit direction from the source prompt embedding to the target one."""
    q_s, q_t = _vec(q_s), _vec(q_t)
    if q_s.shape != q_t.shape:
        raise InvalidInputError(f"shape mismatch {tuple(q_s.shape)} vs {tuple(q_t.shape)}")
    diff = q_t - q_s
    norm = torch.linalg.vector_norm(diff)
    if float(norm) < SHIFT_EPS:
        raise DegenerateShiftError("target prompt embedding equals the source embedding")
    return diff / norm


def target_embedding(z, shift) -> torch.Tensor:
    z, shift = _vec(z), _vec(shift)
    if z.shape[-1] != shift.shape[-1]:
        raise InvalidInputError(f"length mismatch {z.shape[-1]} vs {shift.shape[-1]}")
    return z + shift


def cosine_distance(a, b) -> torch.Tensor:
    """``1 - cos(a, b)`` along the last axis; zero vectors are rejected."""
    a, b = _vec(a), _vec(b)
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise InvalidInputError("cosine distance of a zero vector is undefined")
    return 1.0 - (a * b).sum(dim=-1) / (na * nb)


def _cosine_distance_unchecked(a, b):
    return 1.0 - (a * b).sum(dim=-1) / (torch.linalg.vector_norm(a, dim=-1) * torch.linalg.vector_norm(b, dim=-1))


def _as_chw(fm) -> torch.Tensor:
    return torch.as_tensor(fm).permute(2, 0, 1)


def augmented_projection(crop_features, aug, bundle: EncoderBundle) -> torch.Tensor:
    """Project ``crop_features + A_j`` (both ``H x W x C``) into the embedding space."""
    a = aug.tensor if isinstance(aug, Augmentation) else torch.as_tensor(aug)
    f = torch.as_tensor(crop_features)
    if f.shape != a.shape:
        raise InvalidInputError(f"augmentation shape {tuple(a.shape)} != feature map shape {tuple(f.shape)}")
    return bundle.projector((f + a).permute(2, 0, 1).unsqueeze(0))[0]


def batched_objective(features: torch.Tensor, z: torch.Tensor, z_star: torch.Tensor,
                      augs: torch.Tensor, projector, l1_weight: float) -> torch.Tensor:
    """Summed objective over crops and prompts.

    ``features``: (N, C, H, W) crop feature maps; ``z``: (N, D) unaugmented
    embeddings; ``z_star``: (N, M, D) targets; ``augs``: (M, C, H, W).
    """
    # one projector pass per prompt with the same batch layout as ``z``, so a
    # zero augmentation reproduces ``z`` bit for bit
    z_bar = torch.stack([projector(features + augs[j]) for j in range(augs.shape[0])], dim=1)
    dist = _cosine_distance_unchecked(z_star, z_bar)
    l1 = (z_bar - z.unsqueeze(1)).abs().sum(dim=-1)
    return (dist + l1_weight * l1).sum()


def augmentation_loss(crops: Sequence, z_list, zstar_matrix, A_set, bundle: EncoderBundle,
                      l1_weight: float = 1.0) -> torch.Tensor:
    """Objective for ``crops`` (``H x W x C`` feature maps) and augmentations ``A_set``.

    ``z_list[i]`` is the unaugmented embedding of crop ``i`` and
    ``zstar_matrix[i][j]`` its target for prompt ``j``. Differentiable with
    respect to ``A_set``.
    """
    if l1_weight < 0:
        raise InvalidInputError("l1_weight must be >= 0")
    if isinstance(A_set, AugmentationSet):
        A_set = A_set.stacked()
    elif not torch.is_tensor(A_set):
        A_set = torch.stack([a.tensor if isinstance(a, Augmentation) else torch.as_tensor(a) for a in A_set])
    feats = torch.stack([torch.as_tensor(c) for c in crops])
    if feats.shape[1:] != A_set.shape[1:]:
        raise InvalidInputError(f"augmentation dims {tuple(A_set.shape[1:])} != crop dims {tuple(feats.shape[1:])}")
    z = torch.stack([_vec(v) for v in z_list]) if not torch.is_tensor(z_list) else z_list
    zs = torch.as_tensor(np.asarray(zstar_matrix)) if not torch.is_tensor(zstar_matrix) else zstar_matrix
    if zs.shape[:2] != (feats.shape[0], A_set.shape[0]):
        raise InvalidInputError(f"target matrix shape {tuple(zs.shape)} does not match crops x prompts")
    return batched_objective(feats.permute(0, 3, 1, 2), z.to(feats.dtype), zs.to(feats.dtype),
                             A_set.permute(0, 3, 1, 2), bundle.projector, l1_weight)


def prompt_shifts(prompt_set: PromptSet, bundle: EncoderBundle) -> tuple[torch.Tensor, torch.Tensor]:
    """(q_s, (M, D) unit shifts); raises ``DegenerateShiftError`` naming the prompt."""
    q = encode_texts([prompt_set.source_prompt] + [t.text for t in prompt_set.targets], bundle)
    q_s = q[0]
    shifts = []
    for target, q_t in zip(prompt_set.targets, q[1:]):
        try:
            shifts.append(embedding_shift(q_s, q_t))
        except DegenerateShiftError:
            raise DegenerateShiftError(
                f"prompt {target.id} ({target.text!r}) has the same embedding as the source prompt",
                prompt_id=target.id) from None
    return q_s, torch.stack(shifts)


def frozen_projector(bundle: EncoderBundle):
    proj = copy.deepcopy(bundle.projector)
    for p in proj.parameters():
        p.requires_grad_(False)
    return proj.eval()


def crop_features(images: Sequence[np.ndarray], bundle: EncoderBundle, size: int, n_per_image: int,
                  rng: np.random.Generator) -> torch.Tensor:
    crops = []
    for img in images:
        crops.extend(random_crops(img, size, n_per_image, rng))
    x = torch.from_numpy(np.stack(crops)).permute(0, 3, 1, 2)
    with torch.no_grad():
        return bundle.feature_extractor(x)


def optimize_augmentations(source_images: Sequence[np.ndarray], prompt_set: PromptSet,
                           bundle: EncoderBundle, cfg: OptConfig = OptConfig()) -> AugmentationSet:
    """Estimate one augmentation per target prompt from source-domain images only.

    Augmentations start at zero and are updated with Adam; a fresh batch of
    random crops is drawn every iteration. The logged loss is the objective
    on that iteration's batch before the update.
    """
    if len(source_images) == 0:
        raise InvalidInputError("at least one source image is required")
    q_s, shifts = prompt_shifts(prompt_set, bundle)
    rng = np.random.default_rng(cfg.seed)
    projector = frozen_projector(bundle)
    probe = crop_features([source_images[0]], bundle, cfg.crop_size, 1, np.random.default_rng(0))
    _, c, h, w = probe.shape
    augs = torch.zeros((len(shifts), c, h, w), requires_grad=True)
    opt = torch.optim.Adam([augs], lr=cfg.learning_rate)
    log = []
    for _it in range(cfg.iterations):
        picks = rng.integers(0, len(source_images), size=cfg.images_per_batch)
        feats = crop_features([source_images[i] for i in picks], bundle, cfg.crop_size, cfg.crops_per_image, rng)
        with torch.no_grad():
            z = projector(feats)
        z_star = z.unsqueeze(1) + shifts.unsqueeze(0)
        loss = batched_objective(feats, z, z_star, augs, projector, cfg.l1_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append(float(loss.detach()))
    final = augs.detach().permute(0, 2, 3, 1).contiguous()
    items = [Augmentation(j + 1, final[j], t.id) for j, t in enumerate(prompt_set.targets)]
    return AugmentationSet(items, q_s, log, meta={
        "config": asdict(cfg),
        "prompt_ids": [t.id for t in prompt_set.targets],
        "prompts": [t.text for t in prompt_set.targets],
        "source_prompt": prompt_set.source_prompt,
        "final_loss": log[-1],
    })


def pool_augmentation(aug) -> torch.Tensor:
    """Spatial mean per channel of an ``H x W x C`` augmentation."""
    a = aug.tensor if isinstance(aug, Augmentation) else torch.as_tensor(aug)
    return a.mean(dim=(0, 1))


def apply_augmentation(fm, pooled) -> torch.Tensor:
    """Add a channel vector at every spatial position of an ``H x W x C`` map."""
    fm, pooled = torch.as_tensor(fm), torch.as_tensor(pooled)
    if fm.shape[-1] != pooled.shape[-1]:
        raise InvalidInputError(f"channel mismatch {fm.shape[-1]} vs {pooled.shape[-1]}")
    return fm + pooled


def random_augmentation_set(like: AugmentationSet, sigma: float | None = None, seed: int = 0) -> AugmentationSet:
    """Same shapes as ``like`` with entries drawn from N(0, sigma^2).

    ``sigma`` defaults to the standard deviation of ``like``'s entries.
    """
    stacked = like.stacked()
    if sigma is None:
        sigma = float(stacked.std())
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(stacked.shape, generator=gen) * sigma
    items = [Augmentation(a.id, noise[i], a.prompt_id) for i, a in enumerate(like.augmentations)]
    meta = {"kind": "random", "sigma": sigma, "seed": seed, "prompt_ids": like.meta.get("prompt_ids", [])}
    return AugmentationSet(items, like.source_embedding.clone(), [], meta)


def save_augmentations(aug_set: AugmentationSet, path: str | Path) -> None:
    tensors = {f"A_{a.id}": a.tensor for a in aug_set.augmentations}
    tensors["q_s"] = aug_set.source_embedding
    archive.write_archive(path, tensors)
    meta = dict(aug_set.meta)
    meta["loss_log"] = list(aug_set.optimizer_log)
    meta["augmentation_prompt_ids"] = [a.prompt_id for a in aug_set.augmentations]
    archive.dump_json(meta, archive.sidecar_path(path))


def load_augmentations(path: str | Path) -> AugmentationSet:
    tensors = archive.read_archive(path)
    meta = archive.load_json(archive.sidecar_path(path))
    log = meta.pop("loss_log", [])
    pids = meta.pop("augmentation_prompt_ids", None)
    names = sorted((k for k in tensors if k.startswith("A_")), key=lambda k: int(k[2:]))
    if pids is None:
        pids = [int(k[2:]) for k in names]
    items = [Augmentation(int(k[2:]), torch.from_numpy(tensors[k]), pid) for k, pid in zip(names, pids)]
    return AugmentationSet(items, torch.from_numpy(tensors["q_s"]), log, meta)
