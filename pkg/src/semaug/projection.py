"""Two-component PCA fit on real-domain embeddings and CSV/JSON export.

Real and augmented embeddings are projected with the same mean and
components, so both point clouds live in one coordinate frame.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateSpectrumError, InvalidInputError

_RANK_TOL = 1e-10


@dataclass
class ProjectionOutput:
    rows: list[tuple[str, float, float]]
    components: np.ndarray  # (2, D)
    mean: np.ndarray  # (D,)


def _matrix(embeddings) -> np.ndarray:
    if hasattr(embeddings, "detach"):
        embeddings = embeddings.detach().cpu().numpy()
    rows = [np.asarray(e.detach().cpu().numpy() if hasattr(e, "detach") else e, dtype=np.float64).reshape(-1)
            for e in embeddings]
    if not rows:
        return np.zeros((0, 0))
    return np.stack(rows)


def pca_fit(embeddings) -> tuple[np.ndarray, np.ndarray]:
    """``(mean, components)``; components are the top-2 principal directions,
    each signed so that its largest-magnitude entry is positive."""
    x = _matrix(embeddings)
    if x.shape[0] < 3:
        raise InvalidInputError("need at least 3 embeddings")
    if x.shape[1] < 2:
        raise InvalidInputError("embedding dimension must be >= 2")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    if len(s) < 2 or s[0] <= 0 or s[1] <= _RANK_TOL * max(s[0], 1.0):
        raise DegenerateSpectrumError("centred data has rank < 2")
    comps = vt[:2].copy()
    for i in range(2):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    return mean, comps


def pca_project(embeddings, mean, components) -> np.ndarray:
    x = _matrix(embeddings)
    mean = np.asarray(mean, dtype=np.float64)
    components = np.asarray(components, dtype=np.float64)
    if x.size == 0:
        return np.zeros((0, 2))
    if x.shape[1] != mean.shape[0] or components.shape[1] != mean.shape[0]:
        raise InvalidInputError(f"dimension mismatch: embeddings {x.shape[1]}, mean {mean.shape[0]}")
    return (x - mean) @ components.T


def _labelled(groups: Mapping[str, Sequence]) -> tuple[list[str], np.ndarray]:
    labels, rows = [], []
    for name, embs in groups.items():
        m = _matrix(embs)
        labels.extend([name] * len(m))
        rows.append(m)
    rows = [r for r in rows if r.size]
    return labels, (np.concatenate(rows) if rows else np.zeros((0, 0)))


def _csv_bytes(labels: Sequence[str], points: np.ndarray) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "pc1", "pc2"])
    for label, (a, b) in zip(labels, points):
        w.writerow([label, f"{a:.9g}", f"{b:.9g}"])
    return buf.getvalue().encode("utf-8")


def export_projection(real: Mapping[str, Sequence], augmented: Mapping[str, Sequence],
                      out_prefix: str | Path) -> tuple[ProjectionOutput, ProjectionOutput]:
    """Fit PCA on ``real`` (domain -> embeddings) only and project both groups.

    Writes ``<prefix>_real.csv``, ``<prefix>_augmented.csv`` and
    ``<prefix>_pca.json``.
    """
    if len([k for k, v in real.items() if len(v)]) < 2:
        raise InvalidInputError("real embeddings must cover at least two domains")
    real_labels, real_x = _labelled(real)
    mean, comps = pca_fit(real_x)
    real_pts = pca_project(real_x, mean, comps)
    aug_labels, aug_x = _labelled(augmented)
    aug_pts = pca_project(aug_x, mean, comps) if aug_x.size else np.zeros((0, 2))
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}_real.csv").write_bytes(_csv_bytes(real_labels, real_pts))
    Path(f"{prefix}_augmented.csv").write_bytes(_csv_bytes(aug_labels, aug_pts))
    var = np.var(real_pts, axis=0)
    meta = {
        "mean": [float(v) for v in mean],
        "components": [[float(v) for v in row] for row in comps],
        "explained_variance": [float(v) for v in var],
        "real_counts": {k: len(v) for k, v in real.items()},
        "augmented_counts": {k: len(v) for k, v in augmented.items()},
    }
    Path(f"{prefix}_pca.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    as_rows = lambda labels, pts: [(l, float(a), float(b)) for l, (a, b) in zip(labels, pts)]
    return (ProjectionOutput(as_rows(real_labels, real_pts), comps, mean),
            ProjectionOutput(as_rows(aug_labels, aug_pts), comps, mean))


def read_projection_csv(path: str | Path) -> list[tuple[str, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["domain"], float(r["pc1"]), float(r["pc2"])) for r in csv.DictReader(fh)]


def domain_embeddings(domains, bundle, per_domain: int = 200) -> dict[str, np.ndarray]:
    """Image embeddings of the first ``per_domain`` images of every domain."""
    from .embedding import encode_images

    out = {}
    for name, ds in domains.items():
        imgs = [s.image for s in ds.samples[:per_domain]]
        if imgs:
            out[name] = encode_images(np.stack(imgs), bundle).numpy().astype(np.float64)
    return out


def augmented_embeddings(source, aug_set, bundle, per_domain: int = 200) -> dict[str, np.ndarray]:
    """Embeddings of source images with each augmentation added to their feature maps.

    The full augmentation is added when its spatial size matches the feature
    map, otherwise its channel-wise spatial mean. Keys are the prompt texts
    when the set records them, else ``A_<id>``.
    """
    import torch

    imgs = np.stack([s.image for s in source.samples[:per_domain]])
    x = torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous()
    prompts = aug_set.meta.get("prompts") or []
    out = {}
    with torch.no_grad():
        fm = bundle.feature_extractor(x)
        for i, aug in enumerate(aug_set.augmentations):
            a = aug.tensor.permute(2, 0, 1)
            if tuple(a.shape[1:]) != tuple(fm.shape[2:]):
                a = a.mean(dim=(1, 2), keepdim=True)
            label = prompts[i] if i < len(prompts) else f"A_{aug.id}"
            out[label] = bundle.projector(fm + a.unsqueeze(0)).numpy().astype(np.float64)
    return out


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def centroid_alignment(unaugmented, augmented_by_prompt: Sequence, prompt_embeddings) -> list[tuple[float, float]]:
    """Per prompt ``j``: (cos(centroid of augmented_j, q_j), cos(centroid of unaugmented, q_j))."""
    base = _matrix(unaugmented).mean(axis=0)
    q = _matrix(prompt_embeddings)
    if len(augmented_by_prompt) != len(q):
        raise InvalidInputError("one augmented group per prompt embedding is required")
    return [(_cos(_matrix(g).mean(axis=0), q[j]), _cos(base, q[j])) for j, g in enumerate(augmented_by_prompt)]
