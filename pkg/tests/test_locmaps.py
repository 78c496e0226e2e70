import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acol import locmaps as lm
from acol.tensor_core import ConvLayerParams, ShapeError, conv2d_forward, gap


def eq3_direct_sum(s, w, c):
    """Explicit loop over channels: sum_k S_k * W[k, c]."""
    out = np.zeros(s.shape[1:])
    for k in range(s.shape[0]):
        out += s[k] * w[k, c]
    return out


class TestSelectMap:
    def test_single_category(self):
        maps = np.arange(4.0).reshape(1, 1, 2, 2)
        m = lm.select_map(maps, 0)
        np.testing.assert_array_equal(m.grid, maps[0, 0])
        assert not m.normalized

    def test_mean_equals_logit(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal((1, 6, 4, 4))
        head = ConvLayerParams(rng.standard_normal((3, 6, 1, 1)), np.zeros(3))
        maps = conv2d_forward(s, head)
        logits = gap(maps)
        for c in range(3):
            assert lm.select_map(maps, c).grid.mean() == pytest.approx(logits[0, c], abs=1e-12)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        s = rng.standard_normal((5, 4, 4))
        w = rng.standard_normal((5, 3))
        head = ConvLayerParams(np.ascontiguousarray(w.T).reshape(3, 5, 1, 1), np.zeros(3))
        maps = conv2d_forward(s[None], head)
        for c in range(3):
            np.testing.assert_allclose(lm.select_map(maps, c).grid, eq3_direct_sum(s, w, c), atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            lm.select_map(np.zeros((1, 2, 3, 3)), 2)


class TestCamPosthoc:
    def test_one_hot_column(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal((3, 4, 4))
        w = np.zeros((3, 2))
        w[1, 0] = 1
        np.testing.assert_array_equal(lm.cam_posthoc(s, w, 0).grid, s[1])

    def test_two_term_hand_sum(self):
        s = np.stack([np.ones((2, 2)), np.array([[0.0, 2.0], [2.0, 0.0]])])
        w = np.array([[0.5], [0.25]])
        np.testing.assert_allclose(lm.cam_posthoc(s, w, 0).grid, [[0.5, 1.0], [1.0, 0.5]])

    def test_equals_forward_map_single_precision(self):
        rng = np.random.default_rng(2)
        s = rng.standard_normal((64, 8, 8)).astype(np.float32)
        w = (rng.standard_normal((64, 10)) / 8).astype(np.float32)
        head = ConvLayerParams(np.ascontiguousarray(w.T).reshape(10, 64, 1, 1), np.zeros(10, np.float32))
        maps = conv2d_forward(s[None], head)
        for c in range(10):
            np.testing.assert_allclose(lm.cam_posthoc(s, w, c).grid, lm.select_map(maps, c).grid, atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            lm.cam_posthoc(np.zeros((3, 2, 2)), np.zeros((4, 2)), 0)


class TestNormalize:
    def test_min_max(self):
        np.testing.assert_allclose(lm.normalize_map(np.array([[1.0, 3.0], [3.0, 5.0]])), [[0, 0.5], [0.5, 1]])

    def test_already_normalized(self):
        m = np.array([[0.0, 0.3], [1.0, 0.7]])
        np.testing.assert_array_equal(lm.normalize_map(m), m)

    def test_constant_is_zero(self):
        np.testing.assert_array_equal(lm.normalize_map(np.full((3, 3), 4.2)), np.zeros((3, 3)))


class TestFuse:
    def test_idempotent(self):
        m = np.array([[0.1, 0.9]])
        np.testing.assert_array_equal(lm.fuse_maps(m, m), m)

    def test_zero_is_neutral(self):
        m = np.array([[0.1, 0.9]])
        np.testing.assert_array_equal(lm.fuse_maps(m, np.zeros_like(m)), m)

    def test_definition(self):
        np.testing.assert_array_equal(lm.fuse_maps([[0.2, 0.8]], [[0.5, 0.1]]), [[0.5, 0.8]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            lm.fuse_maps(np.zeros((2, 2)), np.zeros((2, 3)))


class TestEquivalenceReport:
    def test_double_precision(self):
        r = lm.equivalence_report(seed=0, trials=20, dtype=np.float64)
        assert r["max_logit_diff"] <= 1e-12 and r["max_map_diff"] <= 1e-12

    def test_single_precision(self):
        r = lm.equivalence_report(seed=0, trials=100, k=64, c=10, h=8, dtype=np.float32)
        assert r["max_logit_diff"] <= 1e-5

    def test_one_hot_exact(self):
        r = lm.equivalence_report(seed=3, trials=5, weights="onehot", dtype=np.float32)
        assert r["max_map_diff"] == 0.0
        # a one-hot dot product picks a single term; the means match bit for bit
        assert r["max_logit_diff"] == 0.0

    def test_rejects_zero_trials(self):
        with pytest.raises(ValueError):
            lm.equivalence_report(trials=0)


maps_2d = arrays(
    np.float64,
    st.tuples(st.integers(1, 6), st.integers(1, 6)),
    elements=st.floats(-100, 100, allow_nan=False, width=64),
)


@settings(max_examples=60, deadline=None)
@given(maps_2d)
def test_normalize_properties(m):
    n = lm.normalize_map(m)
    assert n.min() >= 0 and n.max() <= 1
    if m.max() > m.min():
        np.testing.assert_allclose(lm.normalize_map(n), n, atol=1e-12)
        assert n.flat[np.argmax(m)] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fuse_algebra(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.random((3, 4, 5))
    f = lm.fuse_maps
    np.testing.assert_array_equal(f(a, b), f(b, a))
    np.testing.assert_array_equal(f(f(a, b), c), f(a, f(b, c)))
    out = f(a, b)
    assert out.min() >= 0 and out.max() <= 1


def test_heatmap_png_and_overlay(tmp_path):
    from PIL import Image

    m = np.linspace(0, 1, 64).reshape(8, 8)
    path = lm.save_heatmap_png(m, tmp_path / "m.png")
    with Image.open(path) as im:
        assert im.mode == "L" and im.size == (8, 8)
        px = np.asarray(im)
    assert px[0, 0] == 0 and px[-1, -1] == 255
    img = np.zeros((3, 16, 16))
    ov = lm.overlay_heatmap(img, m, alpha=1.0)
    assert ov.shape == (16, 16, 3) and ov.dtype == np.uint8
    np.testing.assert_array_equal(ov[0, 0], lm.JET_LUT[0])
    assert lm.JET_LUT.shape == (256, 3)
