import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dakd.core import (IGNORE, FeatureMap, ImageTensor, LabelMap, LogitMap,
                       ProbabilityMap, bilinear_resize, pseudo_labels, softmax)


def scalar_bilinear(grid, y, x):
    """Independent corner-aligned bilinear oracle for a 2D grid."""
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1 = min(y0 + 1, grid.shape[0] - 1)
    x1 = min(x0 + 1, grid.shape[1] - 1)
    fy, fx = y - y0, x - x0
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bot * fy


class TestTypes:
    def test_image_range_enforced(self):
        with pytest.raises(ValueError):
            ImageTensor(np.full((8, 8, 3), 1.5))

    def test_image_min_size(self):
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((4, 8, 3)))

    def test_label_values_checked(self):
        with pytest.raises(ValueError):
            LabelMap(np.full((4, 4), 7), num_classes=3)

    def test_label_ignore_allowed(self):
        lm = LabelMap(np.full((4, 4), IGNORE), num_classes=3)
        assert np.all(lm.data == IGNORE)

    def test_probability_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            ProbabilityMap(np.full((2, 2, 3), 0.5))

    def test_logits_must_be_finite(self):
        with pytest.raises(ValueError):
            LogitMap(np.array([[[np.inf, 0.0]]]))


class TestSoftmax:
    def test_uniform_logits(self):
        p = softmax(LogitMap(np.zeros((2, 2, 3))))
        assert np.allclose(p.data, 1.0 / 3.0, atol=1e-12)

    def test_shift_invariance(self):
        for x in (-50.0, 0.0, 123.0):
            z = np.zeros((1, 1, 2))
            z[..., 1] = np.log(2.0)
            p = softmax(LogitMap(z + x))
            assert np.allclose(p.data[0, 0], [1 / 3, 2 / 3], atol=1e-12)

    def test_derived_three_way(self):
        p = softmax(LogitMap(np.array([[[1.0, 2.0, 3.0]]])))
        assert np.allclose(p.data[0, 0], [0.09003057, 0.24472847, 0.66524096],
                           atol=1e-6)

    @given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
    def test_stability_at_large_magnitudes(self, a, b, c):
        p = softmax(LogitMap(np.array([[[a, b, c]]])))
        assert np.all(np.isfinite(p.data))
        assert abs(p.data.sum() - 1.0) < 1e-9


class TestPseudoLabels:
    def test_argmax(self):
        lm = pseudo_labels(ProbabilityMap(np.array([[[0.1, 0.7, 0.2]]])))
        assert lm.data[0, 0] == 1

    def test_tie_break_lowest_index(self):
        lm = pseudo_labels(ProbabilityMap(np.array([[[0.5, 0.5]]])))
        assert lm.data[0, 0] == 0

    @given(st.integers(0, 10_000), st.floats(0.1, 10.0))
    @settings(max_examples=50)
    def test_temperature_invariance(self, seed, tau):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(3, 3, 4))
        a = pseudo_labels(softmax(LogitMap(z / tau)))
        b = pseudo_labels(softmax(LogitMap(z)))
        assert np.array_equal(a.data, b.data)

    def test_never_emits_ignore(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(size=(8, 8, 6))
        p /= p.sum(axis=2, keepdims=True)
        lm = pseudo_labels(ProbabilityMap(p))
        assert lm.data.max() < 6


class TestBilinearResize:
    def test_identity(self):
        f = FeatureMap(np.random.default_rng(0).normal(size=(5, 7, 2)))
        out = bilinear_resize(f, 5, 7)
        assert np.array_equal(out.data, f.data)

    def test_constant_any_size(self):
        f = FeatureMap(np.full((3, 3, 2), 4.2))
        out = bilinear_resize(f, 9, 5)
        assert np.allclose(out.data, 4.2, atol=1e-12)

    def test_2x2_to_4x4_against_scalar_oracle(self):
        grid = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = bilinear_resize(FeatureMap(grid[..., None]), 4, 4)
        for i in range(4):
            for j in range(4):
                expected = scalar_bilinear(grid, i / 3.0, j / 3.0)
                assert out.data[i, j, 0] == pytest.approx(expected, abs=1e-12)
        # frozen closed-form values: f(y, x) = 2y + x on the unit square
        frozen = 2.0 * (np.arange(4) / 3.0)[:, None] + (np.arange(4) / 3.0)
        assert np.allclose(out.data[..., 0], frozen, atol=1e-12)

    def test_rejects_bad_target(self):
        with pytest.raises(ValueError):
            bilinear_resize(FeatureMap(np.zeros((2, 2, 1))), 0, 4)

    def test_probability_renormalized(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0.01, 1, size=(4, 4, 5))
        p /= p.sum(axis=2, keepdims=True)
        out = bilinear_resize(ProbabilityMap(p), 11, 7)
        assert np.allclose(out.data.sum(axis=2), 1.0, atol=1e-12)

    @given(st.integers(0, 1000))
    @settings(max_examples=30)
    def test_down_then_up_constant_exact_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        const = FeatureMap(np.full((6, 6, 1), float(rng.uniform(-5, 5))))
        down = bilinear_resize(const, 3, 3)
        up = bilinear_resize(down, 6, 6)
        assert np.allclose(up.data, const.data, atol=1e-12)

        f = FeatureMap(rng.normal(size=(6, 6, 2)))
        out = bilinear_resize(f, 9, 4)
        for c in range(2):
            assert out.data[..., c].min() >= f.data[..., c].min() - 1e-12
            assert out.data[..., c].max() <= f.data[..., c].max() + 1e-12
