import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from semaug.archive import read_archive, write_archive
from semaug.errors import DegenerateSpectrumError, InvalidInputError, LoadError
from semaug.projection import (centroid_alignment, export_projection, pca_fit, pca_project,
                               read_projection_csv)

arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                    elements=st.floats(-1e6, 1e6, width=32))


@settings(max_examples=50, deadline=None)
@given(st.lists(arrays, min_size=1, max_size=4))
def test_archive_round_trip_bit_exact(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("a") / "x.tnsa"
    named = {f"t{i}": t for i, t in enumerate(tensors)}
    write_archive(path, named)
    back = read_archive(path)
    assert list(back) == list(named)
    for k, v in named.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.astype("<f4").tobytes()


def test_archive_layout(tmp_path):
    write_archive(tmp_path / "x.tnsa", {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    data = (tmp_path / "x.tnsa").read_bytes()
    (hlen,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + hlen])
    assert header == {"version": 1, "entries": [{"name": "a", "shape": [2, 3], "dtype": "f32"}]}
    assert len(data) == 8 + hlen + 24
    assert np.frombuffer(data[8 + hlen:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_archive_errors(tmp_path):
    with pytest.raises(ValueError):
        write_archive(tmp_path / "x.tnsa", {"a": np.zeros(2), "b": np.zeros(1)} | {"a": np.zeros(1)} if False else
                      _dup_items())
    p = tmp_path / "t.tnsa"
    write_archive(p, {"a": np.zeros(4)})
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(LoadError):
        read_archive(p)
    p.write_bytes(b"\x01")
    with pytest.raises(LoadError):
        read_archive(p)


class _dup_items(dict):
    def items(self):
        return [("a", np.zeros(1)), ("a", np.zeros(2))]


def test_pca_axis_aligned():
    g = np.random.default_rng(0)
    x = np.stack([g.normal(0, 3, 200), g.normal(0, 1, 200)], 1)
    x -= x.mean(0)
    x = x @ np.linalg.svd(np.cov(x.T))[0]  # decorrelate so the axes are exact
    x = x / x.std(0) * np.array([3.0, 1.0])
    mean, comps = pca_fit(x)
    assert np.allclose(np.abs(comps), np.eye(2), atol=1e-8)
    for c in comps:
        assert c[np.argmax(np.abs(c))] > 0


def test_pca_three_point_oracle():
    x = np.array([[0.0, 0.0, 1.0], [2.0, 1.0, 1.0], [1.0, 3.0, 1.0]])
    mean, comps = pca_fit(x)
    vals, vecs = np.linalg.eigh(np.cov((x - x.mean(0)).T))
    order = np.argsort(vals)[::-1][:2]
    for k, idx in enumerate(order):
        v = vecs[:, idx]
        v = v if v[np.argmax(np.abs(v))] > 0 else -v
        assert np.allclose(comps[k], v, atol=1e-8)
    pts = pca_project(x, mean, comps)
    assert np.var(pts[:, 0], ddof=1) == pytest.approx(vals[order[0]], rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 30), st.integers(2, 8))
def test_pca_properties(seed, n, d):
    x = np.random.default_rng(seed).normal(size=(n, d)) * np.linspace(3, 1, d)
    mean, comps = pca_fit(x)
    assert np.allclose(comps @ comps.T, np.eye(2), atol=1e-6)
    pts = pca_project(x, mean, comps)
    assert pts[:, 0].var() >= pts[:, 1].var() - 1e-12
    assert np.allclose(pca_project(mean[None], mean, comps), 0, atol=1e-12)
    a, b = x[0], x[1]
    lhs = pca_project((a + b)[None], mean, comps) - pca_project(b[None], mean, comps)
    rhs = pca_project(a[None], mean, comps) - pca_project(np.zeros((1, d)), mean, comps)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_pca_errors():
    with pytest.raises(DegenerateSpectrumError):
        pca_fit(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    with pytest.raises(InvalidInputError):
        pca_fit(np.zeros((2, 3)))
    mean, comps = pca_fit(np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(InvalidInputError):
        pca_project(np.zeros((2, 4)), mean, comps)


def test_export_projection(tmp_path):
    g = np.random.default_rng(1)
    real = {"clear": g.normal(size=(10, 5)), "fog": g.normal(1, 1, size=(8, 5))}
    aug = {"fog night": g.normal(size=(6, 5)), "rain day": g.normal(size=(4, 5))}
    r, a = export_projection(real, aug, tmp_path / "fig")
    rows = read_projection_csv(tmp_path / "fig_real.csv")
    assert len(read_projection_csv(tmp_path / "fig_augmented.csv")) == 10
    clear = np.array([[p1, p2] for d, p1, p2 in rows if d == "clear"])
    mean, comps = pca_fit(np.concatenate(list(real.values())))
    assert np.allclose(clear.mean(0), pca_project(real["clear"], mean, comps).mean(0), atol=1e-7)
    meta = json.loads((tmp_path / "fig_pca.json").read_text())
    assert np.allclose(meta["components"], r.components) and np.array_equal(r.components, a.components)
    first = [(tmp_path / f"fig_{s}").read_bytes() for s in ("real.csv", "augmented.csv", "pca.json")]
    export_projection(real, aug, tmp_path / "fig")
    assert first == [(tmp_path / f"fig_{s}").read_bytes() for s in ("real.csv", "augmented.csv", "pca.json")]
    with pytest.raises(InvalidInputError):
        export_projection({"clear": real["clear"]}, aug, tmp_path / "x")


def test_centroid_alignment():
    base = np.array([[1.0, 0.0], [1.0, 0.2]])
    out = centroid_alignment(base, [np.array([[0.0, 1.0]])], np.array([[0.0, 1.0]]))
    assert out[0][0] == pytest.approx(1.0) and out[0][1] < 0.2
