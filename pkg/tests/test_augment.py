import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mitodet import augment as aug
from mitodet.errors import BadDimensions, InvalidIndex


def _patch(seed=0, size=128):
    return np.random.default_rng(seed).uniform(0, 1, (size, size, 3))


def _smooth_patch(size=128):
    yy, xx = np.mgrid[0:size, 0:size] / size
    return np.stack([0.5 + 0.2 * np.sin(3 * xx), 0.5 + 0.2 * np.cos(2 * yy), 0.6 + 0.1 * xx * yy], axis=-1)


class TestDihedral:
    def test_identity(self):
        p = _patch(size=6)
        assert np.array_equal(aug.dihedral(p, 0), p)

    def test_rotation_has_order_four(self):
        p = _patch(size=6)
        q = p
        for _ in range(4):
            q = aug.dihedral(q, 1)
        assert np.array_equal(q, p)

    def test_clockwise_corner(self):
        p = np.zeros((4, 4, 3))
        p[0, 0] = 1
        # 90 degrees clockwise: top-left goes to x=3, y=0
        assert aug.dihedral(p, 1)[0, 3, 0] == 1

    def test_eight_distinct_elements(self):
        p = np.arange(16, dtype=float).reshape(4, 4, 1)
        outs = {aug.dihedral(p, k).tobytes() for k in range(8)}
        assert len(outs) == 8

    @pytest.mark.parametrize("k", [-1, 8])
    def test_bad_index(self, k):
        with pytest.raises(InvalidIndex):
            aug.dihedral(_patch(size=4), k)


class TestScale:
    def test_unit_factor_is_identity(self):
        p = _patch()
        assert np.abs(aug.scale(p, 1.0) - p).max() < 1e-4

    def test_keeps_dimensions(self):
        assert aug.scale(_patch(), 0.75).shape == (128, 128, 3)

    def test_zoom_doubles_dot(self):
        p = np.ones((64, 64, 3))
        p[31:33, 31:33] = 0.0  # 2-px dot centered on the patch
        dark = aug.scale(p, 2.0)[..., 0] < 0.5
        rows = np.flatnonzero(dark.any(axis=1))
        assert rows.max() - rows.min() + 1 == pytest.approx(4, abs=1)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            aug.scale(_patch(size=8), 0.0)


class TestElastic:
    def test_alpha_zero(self, rng):
        p = _patch()
        assert np.array_equal(aug.elastic(p, 0.0, 10.0, rng), p)

    def test_deterministic(self):
        p = _patch()
        a = aug.elastic(p, 100, 10, np.random.default_rng(3))
        b = aug.elastic(p, 100, 10, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_mean_preserved_on_smooth_patch(self):
        p = _smooth_patch()
        means = [aug.elastic(p, 100, 10, np.random.default_rng(s)).mean() for s in range(100)]
        assert abs(np.mean(means) - p.mean()) / p.mean() < 0.02


class TestEnhance:
    def test_identity(self):
        p = _patch()
        assert np.allclose(aug.enhance(p), p, atol=1e-12)

    def test_zero_brightness_is_black(self):
        assert aug.enhance(_patch(), brightness=0.0).max() == 0.0

    def test_zero_color_is_gray(self):
        out = aug.enhance(_patch(), color=0.0)
        assert np.allclose(out[..., 0], out[..., 1]) and np.allclose(out[..., 1], out[..., 2])

    def test_order_is_color_contrast_brightness(self):
        p = _patch(size=8) * 0.5 + 0.25
        luma = np.array([0.299, 0.587, 0.114])
        g = (p @ luma)[..., None]
        q = g + 1.2 * (p - g)
        m = (q @ luma).mean()
        q = 0.9 * (m + 1.1 * (q - m))
        assert np.allclose(aug.enhance(p, brightness=0.9, contrast=1.1, color=1.2), np.clip(q, 0, 1))


class TestBlurNoise:
    def test_zero_is_identity(self, rng):
        p = _patch()
        assert np.array_equal(aug.blur(p, 0.0), p)
        assert np.array_equal(aug.noise(p, 0.0, rng), p)

    def test_blur_preserves_mean(self):
        p = _smooth_patch()
        assert abs(aug.blur(p, 2.0).mean() - p.mean()) < 1e-3

    def test_noise_std(self):
        p = np.full((400, 400, 3), 0.5)
        out = aug.noise(p, 0.1, np.random.default_rng(5))
        assert 0.095 <= (out - p).std() <= 0.105


class TestAugmentPatch:
    def test_no_families_is_center_crop(self, rng):
        p = _patch()
        out = aug.augment_patch(p, aug.AugmentConfig().with_families(""), rng)
        assert np.array_equal(out, p[14:114, 14:114])

    def test_rotation_only_is_a_dihedral_crop(self):
        p = _patch()
        out = aug.augment_patch(p, aug.AugmentConfig().with_families("R"), np.random.default_rng(2))
        crops = [aug.dihedral(p, k)[14:114, 14:114] for k in range(8)]
        assert any(np.array_equal(out, c) for c in crops)

    def test_translation_is_a_crop(self):
        p = _patch()
        out = aug.augment_patch(p, aug.AugmentConfig().with_families("T"), np.random.default_rng(2))
        hits = [(y, x) for y in range(29) for x in range(29) if np.array_equal(out, p[y : y + 100, x : x + 100])]
        assert len(hits) == 1

    def test_seeds_differ(self):
        p = _patch()
        a = aug.augment_patch(p, aug.AugmentConfig(), np.random.default_rng(0))
        b = aug.augment_patch(p, aug.AugmentConfig(), np.random.default_rng(1))
        assert np.any(a != b)

    def test_same_seed_same_output(self):
        p = _patch()
        a = aug.augment_patch(p, aug.AugmentConfig(), np.random.default_rng(9))
        b = aug.augment_patch(p, aug.AugmentConfig(), np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_wrong_size(self, rng):
        with pytest.raises(BadDimensions):
            aug.augment_patch(_patch(size=100), aug.AugmentConfig(), rng)

    def test_uint8_input(self, rng):
        p = (np.random.default_rng(0).uniform(0, 1, (128, 128, 3)) * 255).astype(np.uint8)
        out = aug.augment_patch(p, aug.AugmentConfig(), rng)
        assert out.shape == (100, 100, 3) and out.dtype == np.float64

    @given(st.integers(0, 2**32 - 1), st.sets(st.sampled_from("RSECHBGT")))
    def test_output_range_and_size(self, seed, fams):
        cfg = aug.AugmentConfig().with_families("".join(fams))
        out = aug.augment_patch(_patch(seed % 7), cfg, np.random.default_rng(seed))
        assert out.shape == (100, 100, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestConfig:
    def test_paper_ranges(self):
        c = aug.AugmentConfig()
        assert c.zoom_range == (0.75, 1.25)
        assert (c.elastic_alpha, c.elastic_sigma) == (100.0, 10.0)
        assert c.color_factor_range == (0.75, 1.5)
        assert c.contrast_factor_range == (0.75, 1.5)
        assert c.brightness_factor_range == (0.75, 1.25)
        assert c.blur_sigma_range == (0.0, 2.0)
        assert c.noise_std_range == (0.0, 0.1)
        assert (c.crop_size, c.input_size) == (100, 128)

    def test_rejects_bad_ranges(self):
        with pytest.raises(ValueError):
            aug.AugmentConfig(zoom_range=(1.2, 0.8))
        with pytest.raises(ValueError):
            aug.AugmentConfig(crop_size=200)
        with pytest.raises(ValueError):
            aug.AugmentConfig(enabled_families=frozenset("RX"))


@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(2, 40))
def test_remap_matches_scipy_mirror(seed, h, w):
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, (h, w, 3))
    rows = rng.uniform(-2 * h, 3 * h, (7, 9))
    cols = rng.uniform(-2 * w, 3 * w, (7, 9))
    ref = np.stack([ndimage.map_coordinates(p[..., k], [rows, cols], order=1, mode="mirror")
                    for k in range(3)], axis=-1)
    assert np.abs(aug._remap(p, rows, cols) - ref).max() < 1e-12
