import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semaug.data import apply_domain, domain_spec, generate_caption_corpus, generate_synthetic_domain
from semaug.embedding import (CLIP_SCALE, UNK, ArchConfig, FeatureExtractor, ToyPretrainConfig, build_bundle,
                              contrastive_gap, encode_image, encode_image_features, encode_images, encode_text,
                              load_bundle, pretrain_toy_embedding, project_features, save_bundle, tokenize)
from semaug.errors import InvalidInputError
from semaug.prompts import cosine_similarity


def test_encode_text_deterministic_and_shape(random_bundle):
    a = encode_text("an image taken during the day", random_bundle)
    b = encode_text("an image taken during the day", random_bundle)
    assert a.shape == (32,)
    assert torch.equal(a, b)


def test_encode_text_weather_token_changes_embedding(toy_bundle):
    a = encode_text("an image taken on a rain night", toy_bundle)
    b = encode_text("an image taken on a fog night", toy_bundle)
    cos = float(a @ b / (a.norm() * b.norm()))
    assert cos == pytest.approx(cosine_similarity(a, b), abs=1e-6)
    assert cos < 1.0


def test_encode_text_empty_prompt_rejected(random_bundle):
    with pytest.raises(InvalidInputError):
        encode_text("", random_bundle)
    with pytest.raises(InvalidInputError):
        encode_text("   ", random_bundle)


def test_unknown_tokens_map_to_unk(random_bundle):
    te = random_bundle.text_encoder
    assert te.ids("zzzqx") == [te.vocab[UNK]]
    assert torch.equal(encode_text("zzzqx", random_bundle), encode_text("qqqq", random_bundle))
    assert tokenize("A Photo, of a CAT") == ["a", "photo", "of", "a", "cat"]


def test_feature_map_shape_toy(random_bundle):
    fm = encode_image_features(np.zeros((64, 64, 3), np.float32), random_bundle)
    assert tuple(fm.shape) == (8, 8, 32)
    assert torch.isfinite(fm).all()


def test_feature_map_shape_large_config():
    fe = FeatureExtractor(CLIP_SCALE)
    with torch.no_grad():
        fm = fe(torch.zeros(1, 3, 224, 224))
    assert tuple(fm.shape[1:]) == (1024, 14, 14)


def test_undersized_image_rejected(random_bundle):
    with pytest.raises(InvalidInputError):
        encode_image_features(np.zeros((16, 16, 3), np.float32), random_bundle)


def test_non_square_feature_map(random_bundle):
    fm = encode_image_features(np.random.default_rng(0).random((64, 96, 3), dtype=np.float32), random_bundle)
    assert tuple(fm.shape) == (8, 12, 32)


def test_channel_mismatch_rejected(random_bundle):
    with pytest.raises(InvalidInputError):
        project_features(torch.zeros(8, 8, 16), random_bundle)


@pytest.mark.parametrize("pooling", ["attention", "average"])
def test_zero_map_with_zero_bias_projects_to_zero(pooling):
    b = build_bundle(ArchConfig(pooling=pooling), seed=1)
    with torch.no_grad():
        b.projector.proj.bias.zero_()
    assert torch.equal(project_features(torch.zeros(8, 8, 32), b), torch.zeros(32))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=32, max_size=32), st.integers(1, 9), st.integers(1, 9))
def test_pooling_modes_agree_on_constant_maps(values, h, w):
    att = build_bundle(ArchConfig(pooling="attention"), seed=2)
    avg = att.with_pooling("average")
    fm = torch.tensor(values, dtype=torch.float32).expand(h, w, 32).contiguous()
    x = fm.permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        pa, pv = att.projector.pool(x), avg.projector.pool(x)
    assert torch.allclose(pa, pv, rtol=1e-6, atol=1e-6)


def test_encode_image_is_composition(random_bundle, rng):
    img = rng.random((64, 64, 3), dtype=np.float32)
    z = encode_image(img, random_bundle)
    assert torch.equal(z, project_features(encode_image_features(img, random_bundle), random_bundle))
    assert torch.equal(z, encode_image(img.copy(), random_bundle))
    assert torch.allclose(encode_images(np.stack([img, img]), random_bundle)[1], z, atol=1e-6)


def test_fog_shift_changes_embedding(toy_bundle):
    ds = generate_synthetic_domain(domain_spec("clear"), 1, seed=9)
    img = ds.samples[0].image
    fogged = apply_domain(img, domain_spec("fog"), np.random.default_rng(0))
    assert not torch.allclose(encode_image(img, toy_bundle), encode_image(fogged, toy_bundle))


def test_pretrain_gap_on_holdout(toy_bundle, toy_corpus):
    held = toy_corpus[int(0.8 * len(toy_corpus)):]
    gap = contrastive_gap(toy_bundle, held)
    assert gap == pytest.approx(toy_bundle.meta["holdout_gap"], abs=1e-5)
    assert gap > 0.1
    assert toy_bundle.pretrained


def test_pretrain_bit_identical_across_runs():
    corpus = generate_caption_corpus(96, seed=5)
    cfg = ToyPretrainConfig(epochs=2, batch_size=32)
    a, b = pretrain_toy_embedding(corpus, cfg), pretrain_toy_embedding(corpus, cfg)
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k]), k


def test_pretrain_zero_epochs_equals_init():
    corpus = generate_caption_corpus(16, seed=5)
    b = pretrain_toy_embedding(corpus, ToyPretrainConfig(epochs=0, seed=3))
    init = build_bundle(seed=3)
    assert not b.pretrained
    for k, v in init.state_dict().items():
        assert torch.equal(v, b.state_dict()[k]), k


def test_pretrain_empty_dataset_rejected():
    with pytest.raises(InvalidInputError):
        pretrain_toy_embedding([], ToyPretrainConfig(epochs=1))


def test_bundle_save_load_round_trip(random_bundle, tmp_path):
    save_bundle(random_bundle, tmp_path / "enc.tnsa")
    back = load_bundle(tmp_path / "enc.tnsa")
    assert back.cfg == random_bundle.cfg
    for k, v in random_bundle.state_dict().items():
        assert torch.equal(v, back.state_dict()[k]), k


def test_arch_config_validation():
    with pytest.raises(InvalidInputError):
        ArchConfig(pooling="max")
    with pytest.raises(InvalidInputError):
        ArchConfig(stride=6)
