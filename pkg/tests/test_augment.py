import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semaug.augment import (Augmentation, AugmentationSet, OptConfig, apply_augmentation, augmentation_loss,
                            augmented_projection, cosine_distance, embedding_shift, load_augmentations,
                            optimize_augmentations, pool_augmentation, prompt_shifts, random_augmentation_set,
                            save_augmentations, target_embedding)
from semaug.embedding import ArchConfig, build_bundle, encode_text
from semaug.errors import DegenerateShiftError, InvalidInputError
from semaug.prompts import generate_prompts

vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3)


def test_embedding_shift_examples():
    assert torch.allclose(embedding_shift([0.0, 0.0], [2.0, 0.0]), torch.tensor([1.0, 0.0]))
    expect = torch.tensor([1.0, 2.0], dtype=torch.float64) / math.sqrt(5.0)
    got = embedding_shift(torch.tensor([1.0, 1.0], dtype=torch.float64), torch.tensor([2.0, 3.0], dtype=torch.float64))
    assert torch.allclose(got, expect, atol=1e-12)


def test_embedding_shift_degenerate():
    with pytest.raises(DegenerateShiftError):
        embedding_shift([1.0, 2.0], [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(vec, vec)
def test_embedding_shift_unit_norm(a, b):
    qa, qb = torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)
    if float(torch.linalg.vector_norm(qb - qa)) < 1e-6:
        return
    s = embedding_shift(qa, qb)
    assert abs(float(torch.linalg.vector_norm(s)) - 1.0) < 1e-9
    z = torch.randn(3, dtype=torch.float64)
    assert abs(float(torch.linalg.vector_norm(target_embedding(z, s) - z)) - 1.0) < 1e-9


def test_target_embedding():
    z = torch.tensor([0.5, -1.0, 2.0])
    assert torch.equal(target_embedding(z, torch.tensor([1.0, 0.0, 0.0])), torch.tensor([1.5, -1.0, 2.0]))
    with pytest.raises(InvalidInputError):
        target_embedding(z, torch.zeros(2))


def test_target_embedding_from_toy_prompts(random_bundle):
    q_s = encode_text("an image taken during the day", random_bundle).double()
    q_t = encode_text("an image taken on a fog night", random_bundle).double()
    z = torch.randn(32, dtype=torch.float64)
    diff = (q_t - q_s).numpy()
    oracle = z.numpy() + diff / np.sqrt((diff ** 2).sum())
    assert np.allclose(target_embedding(z, embedding_shift(q_s, q_t)).numpy(), oracle, atol=1e-12)


def test_cosine_distance_examples():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert float(cosine_distance(a, a)) == pytest.approx(0.0, abs=1e-12)
    assert float(cosine_distance(a, -a)) == pytest.approx(2.0, abs=1e-12)
    b = torch.tensor([1.0, 1.0], dtype=torch.float64)
    assert float(cosine_distance(a, b)) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
    assert float(cosine_distance(a, b)) == pytest.approx(0.29289, abs=1e-5)
    with pytest.raises(InvalidInputError):
        cosine_distance(a, torch.zeros(2))


@settings(max_examples=100, deadline=None)
@given(vec, vec)
def test_cosine_distance_range(a, b):
    ta, tb = torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)
    if float(ta.norm()) < 1e-6 or float(tb.norm()) < 1e-6:
        return
    d = float(cosine_distance(ta, tb))
    assert -1e-12 <= d <= 2 + 1e-12


def test_augmented_projection_identity_and_mismatch(random_bundle):
    fm = torch.randn(8, 8, 32)
    z = random_bundle.projector(fm.permute(2, 0, 1).unsqueeze(0))[0]
    with torch.no_grad():
        zb = augmented_projection(fm, torch.zeros(8, 8, 32), random_bundle)
    assert torch.equal(zb, z.detach())
    with pytest.raises(InvalidInputError):
        augmented_projection(fm, torch.zeros(4, 4, 32), random_bundle)


def test_augmented_projection_linear_projector():
    b = build_bundle(ArchConfig(pooling="average"), seed=4)
    with torch.no_grad():
        b.projector.proj.bias.zero_()
        fm, a = torch.randn(8, 8, 32), torch.randn(8, 8, 32)
        z = augmented_projection(fm, torch.zeros_like(fm), b)
        za = augmented_projection(torch.zeros_like(fm), a, b)
        assert torch.allclose(augmented_projection(fm, a, b), z + za, atol=1e-5)


def _double_bundle(channels=8, pooling="attention", seed=0):
    b = build_bundle(ArchConfig(channels=channels, stem_channels=4, d_embed=6, token_dim=6, pooling=pooling), seed)
    b.projector.double()
    return b


def _brute_loss(crops, z, zs, A, bundle, l1_weight):
    total = 0.0
    for i, c in enumerate(crops):
        for j in range(len(A)):
            with torch.no_grad():
                zb = augmented_projection(c, A[j], bundle).numpy()
            t = zs[i][j].numpy()
            cos = float(zb @ t / (np.linalg.norm(zb) * np.linalg.norm(t)))
            total += (1.0 - cos) + l1_weight * float(np.abs(zb - z[i].numpy()).sum())
    return total


def test_loss_zero_when_targets_equal_embeddings():
    b = _double_bundle()
    crops = torch.randn(2, 4, 4, 8, dtype=torch.float64)
    with torch.no_grad():
        z = torch.stack([b.projector(c.permute(2, 0, 1).unsqueeze(0))[0] for c in crops])
    zs = z.unsqueeze(1).expand(2, 3, -1)
    assert float(augmentation_loss(crops, z, zs, torch.zeros(3, 4, 4, 8, dtype=torch.float64), b).detach()) == pytest.approx(
        0.0, abs=1e-12)


def test_loss_orthogonal_target_is_one():
    b = _double_bundle()
    crop = torch.randn(4, 4, 8, dtype=torch.float64)
    with torch.no_grad():
        z = b.projector(crop.permute(2, 0, 1).unsqueeze(0))[0]
    t = torch.randn(6, dtype=torch.float64)
    t = t - (t @ z) / (z @ z) * z
    loss = augmentation_loss([crop], z[None], t[None, None], torch.zeros(1, 4, 4, 8, dtype=torch.float64), b)
    assert float(loss.detach()) == pytest.approx(1.0, abs=1e-12)


def test_loss_matches_term_by_term_oracle():
    b = _double_bundle(seed=3)
    g = torch.Generator().manual_seed(0)
    crops = torch.randn(2, 4, 4, 8, generator=g, dtype=torch.float64)
    z = torch.randn(2, 6, generator=g, dtype=torch.float64)
    zs = torch.randn(2, 2, 6, generator=g, dtype=torch.float64)
    A = 0.3 * torch.randn(2, 4, 4, 8, generator=g, dtype=torch.float64)
    for w in (0.0, 1.0, 2.5):
        got = float(augmentation_loss(list(crops), list(z), zs, A, b, l1_weight=w).detach())
        assert got == pytest.approx(_brute_loss(crops, z, zs, A, b, w), rel=1e-10, abs=1e-10)
        assert got >= 0
    with pytest.raises(InvalidInputError):
        augmentation_loss(crops, z, zs, A, b, l1_weight=-1)
    with pytest.raises(InvalidInputError):
        augmentation_loss(crops, z, zs, A[:, :2], b)


def central_difference_check(pooling="attention", seed=0, eps=1e-3):
    """Max relative error between autograd and central differences on a 4x4x8 instance with 2 prompts."""
    b = _double_bundle(pooling=pooling, seed=seed)
    g = torch.Generator().manual_seed(seed)
    crops = torch.randn(3, 4, 4, 8, generator=g, dtype=torch.float64)
    z = torch.randn(3, 6, generator=g, dtype=torch.float64)
    zs = torch.randn(3, 2, 6, generator=g, dtype=torch.float64)
    A = (0.2 * torch.randn(2, 4, 4, 8, generator=g, dtype=torch.float64)).requires_grad_(True)
    augmentation_loss(crops, z, zs, A, b).backward()
    analytic = A.grad.detach().reshape(-1)
    numeric = torch.zeros_like(analytic)
    flat = A.detach().reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += eps
            minus[i] -= eps
            lp = augmentation_loss(crops, z, zs, plus.reshape(A.shape), b)
            lm = augmentation_loss(crops, z, zs, minus.reshape(A.shape), b)
            numeric[i] = (lp - lm) / (2 * eps)
    return float(torch.linalg.vector_norm(analytic - numeric) / torch.linalg.vector_norm(numeric))


@pytest.mark.parametrize("pooling", ["attention", "average"])
def test_gradient_matches_central_differences(pooling):
    assert central_difference_check(pooling) < 1e-4


def _tiny_prompts():
    return generate_prompts(["fog", "rain"], ["night"])


def test_optimize_contract(random_bundle, clear_small):
    images = [s.image for s in clear_small.samples]
    before = {k: v.clone() for k, v in random_bundle.state_dict().items()}
    aug = optimize_augmentations(images, _tiny_prompts(), random_bundle, OptConfig(iterations=30, seed=1))
    assert len(aug) == 2 and [a.prompt_id for a in aug.augmentations] == [1, 2]
    assert tuple(aug.augmentations[0].tensor.shape) == (8, 8, 32)
    assert len(aug.optimizer_log) == 30 and all(math.isfinite(v) for v in aug.optimizer_log)
    assert aug.optimizer_log[-1] <= aug.optimizer_log[0]
    for k, v in random_bundle.state_dict().items():
        assert torch.equal(v, before[k]), k
    again = optimize_augmentations(images, _tiny_prompts(), random_bundle, OptConfig(iterations=30, seed=1))
    assert torch.equal(aug.stacked(), again.stacked())


def test_optimize_stationary_when_targets_equal_z(random_bundle, clear_small, monkeypatch):
    import semaug.augment as aug_mod

    feats = torch.randn(4, 32, 8, 8)
    with torch.no_grad():
        z = random_bundle.projector(feats)
    augs = torch.zeros(2, 32, 8, 8, requires_grad=True)
    aug_mod.batched_objective(feats, z, z.unsqueeze(1).expand(4, 2, -1), augs, random_bundle.projector, 1.0).backward()
    assert float(augs.grad.abs().max()) < 1e-6

    real = aug_mod.prompt_shifts
    monkeypatch.setattr(aug_mod, "prompt_shifts", lambda ps, b: (real(ps, b)[0], torch.zeros(2, 32)))
    cfg = OptConfig(iterations=1)
    out = optimize_augmentations([clear_small.samples[0].image], _tiny_prompts(), random_bundle, cfg)
    # only round-off gradients reach Adam, so the update stays far below one lr step
    assert float(out.stacked().abs().max()) < 0.1 * cfg.learning_rate
    assert out.optimizer_log[0] < 1e-5


def test_optimize_degenerate_prompt_names_id(random_bundle, clear_small):
    ps = generate_prompts(["fog", "qqq"], ["zzz"], template="an image taken on a {weather} {time}",
                          source_prompt="an image taken on a www yyy")
    with pytest.raises(DegenerateShiftError) as info:
        optimize_augmentations([clear_small.samples[0].image], ps, random_bundle, OptConfig(iterations=1))
    assert info.value.prompt_id == 2


def test_optimize_requires_images(random_bundle):
    with pytest.raises(InvalidInputError):
        optimize_augmentations([], _tiny_prompts(), random_bundle)


def test_opt_config_validation():
    for kw in ({"iterations": 0}, {"learning_rate": 0.0}, {"l1_weight": -0.1}):
        with pytest.raises(InvalidInputError):
            OptConfig(**kw)


def test_prompt_shifts_unit(random_bundle):
    _, shifts = prompt_shifts(_tiny_prompts(), random_bundle)
    assert torch.allclose(torch.linalg.vector_norm(shifts, dim=1), torch.ones(2), atol=1e-6)


def test_pool_augmentation():
    v = torch.tensor([1.0, -2.0, 3.0])
    assert torch.equal(pool_augmentation(v.expand(4, 5, 3)), v)
    a = torch.zeros(2, 2, 2)
    a[..., 0] = torch.tensor([[1.0, 3.0], [5.0, 7.0]])
    assert float(pool_augmentation(a)[0]) == 4.0
    assert torch.equal(pool_augmentation(torch.zeros(3, 3, 4)), torch.zeros(4))


def test_apply_augmentation():
    fm = torch.full((8, 8, 3), 2.0)
    p = torch.tensor([0.5, -1.0, 0.0])
    assert torch.equal(apply_augmentation(fm, torch.zeros(3)), fm)
    assert torch.equal(apply_augmentation(fm, p), (2.0 + p).expand(8, 8, 3))
    assert tuple(apply_augmentation(torch.zeros(12, 20, 3), p).shape) == (12, 20, 3)
    with pytest.raises(InvalidInputError):
        apply_augmentation(fm, torch.zeros(4))


def _set(m=3):
    g = torch.Generator().manual_seed(0)
    items = [Augmentation(j + 1, torch.randn(2, 2, 4, generator=g), j + 1) for j in range(m)]
    return AugmentationSet(items, torch.randn(5, generator=g), [3.0, 2.0], {"prompt_ids": [1, 2, 3]})


def test_random_augmentation_set_matches_std():
    like = _set()
    r = random_augmentation_set(like, seed=1)
    assert r.stacked().shape == like.stacked().shape
    assert r.meta["sigma"] == pytest.approx(float(like.stacked().std()))
    assert torch.equal(r.stacked(), random_augmentation_set(like, seed=1).stacked())
    assert float(random_augmentation_set(like, sigma=0.0).stacked().abs().max()) == 0.0


def test_augmentation_archive_round_trip(tmp_path):
    s = _set()
    save_augmentations(s, tmp_path / "aug.tnsa")
    back = load_augmentations(tmp_path / "aug.tnsa")
    assert torch.equal(back.stacked(), s.stacked())
    assert torch.equal(back.source_embedding, s.source_embedding)
    assert back.optimizer_log == s.optimizer_log
    assert [a.id for a in back.augmentations] == [1, 2, 3]
