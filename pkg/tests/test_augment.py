import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from homocl import augment as aug


@pytest.fixture
def img(rng):
    return rng.random((12, 12, 3)).astype(np.float32)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(crop_scale_min=0.0), dict(crop_scale_min=0.6, crop_scale_max=0.5),
                                    dict(flip_prob=1.5), dict(grayscale_prob=-0.1),
                                    dict(jitter_strength=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            aug.AugmentConfig(**kw)


class TestCrop:
    def test_full_scale_is_identity(self, img, rng):
        out = aug.random_crop_resize(img, (1.0, 1.0), rng)
        np.testing.assert_allclose(out, img, atol=1e-6)

    @pytest.mark.parametrize("size", [1, 5, 12, 20])
    def test_output_shape(self, img, rng, size):
        out = aug.random_crop_resize(img, (0.2, 1.0), rng, size, (0.75, 4 / 3))
        assert out.shape == (size, size, 3)
        assert out.min() >= 0 and out.max() <= 1

    def test_fixed_seed_same_box(self):
        a = aug.sample_crop_box(10, 10, (0.2, 1.0), np.random.default_rng(3))
        b = aug.sample_crop_box(10, 10, (0.2, 1.0), np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_box_area_within_scale(self, rng):
        for _ in range(200):
            t, l, h, w = aug.sample_crop_box(16, 16, (0.3, 0.6), rng)
            assert 0.3 * 256 - 1e-9 <= h * w <= 0.6 * 256 + 1e-9
            assert t >= 0 and l >= 0 and t + h <= 16 and l + w <= 16


class TestJitter:
    def test_zero_strength_identity(self, img, rng):
        np.testing.assert_allclose(aug.color_jitter(img, 0.0, rng), img, atol=1e-7)

    def test_gray_fixed_point_under_saturation(self):
        gray = np.full((4, 4, 3), 0.4)
        np.testing.assert_allclose(aug.apply_jitter(gray, 1.0, 1.0, 1.7), gray)

    def test_brightness_scales(self):
        x = np.full((2, 2, 3), 0.2)
        np.testing.assert_allclose(aug.apply_jitter(x, 1.5, 1.0, 1.0), 0.3)

    def test_negative_strength(self, img, rng):
        with pytest.raises(ValueError):
            aug.color_jitter(img, -0.1, rng)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 3, 3), elements=st.floats(0, 1)),
           st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
    def test_clamped(self, x, b, c, s):
        out = aug.apply_jitter(x, b, c, s)
        assert out.min() >= 0 and out.max() <= 1


class TestFlipGray:
    def test_flip_involution(self, img):
        np.testing.assert_array_equal(aug.hflip(aug.hflip(img)), img)

    def test_flip_reverses_columns(self, img):
        np.testing.assert_array_equal(aug.hflip(img)[:, 0], img[:, -1])

    def test_grayscale_luma(self):
        x = np.zeros((1, 1, 3))
        x[0, 0] = [1.0, 0.0, 0.0]
        np.testing.assert_allclose(aug.to_grayscale(x)[0, 0], [0.299] * 3)


class TestViews:
    def test_share_source_index(self, img, rng):
        a, b = aug.make_views(img, aug.AugmentConfig(output_size=8), rng, source_index=4)
        assert a.source_index == b.source_index == 4

    def test_grayscale_always(self, img, rng):
        cfg = aug.AugmentConfig(grayscale_prob=1.0, output_size=8)
        for v in aug.make_views(img, cfg, rng):
            np.testing.assert_allclose(v.pixels[..., 0], v.pixels[..., 1], atol=1e-6)
            np.testing.assert_allclose(v.pixels[..., 1], v.pixels[..., 2], atol=1e-6)

    def test_identity_pipeline(self, img, rng):
        a, b = aug.make_views(img, aug.AugmentConfig.identity(12), rng)
        np.testing.assert_allclose(a.pixels, img, atol=1e-6)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_batch_layout(self, rng):
        imgs = rng.random((5, 10, 10, 3)).astype(np.float32)
        views, src = aug.make_view_batch(imgs, aug.AugmentConfig.identity(10), rng)
        np.testing.assert_array_equal(src, np.repeat(np.arange(5), 2))
        np.testing.assert_allclose(views[0::2], imgs, atol=1e-6)
        np.testing.assert_allclose(views[1::2], imgs, atol=1e-6)

    def test_batch_deterministic(self, rng):
        imgs = rng.random((4, 10, 10, 3)).astype(np.float32)
        cfg = aug.AugmentConfig(output_size=8)
        a, _ = aug.make_view_batch(imgs, cfg, np.random.default_rng(9))
        b, _ = aug.make_view_batch(imgs, cfg, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_batch_jitter_matches_single_image_rule(self, rng):
        # batched jitter uses the same brightness -> contrast -> saturation order
        imgs = rng.random((1, 6, 6, 3))
        cfg = aug.AugmentConfig(1.0, 1.0, 0.0, 0.4, 1.0, 0.0, 6, 1.0, 1.0)
        r = np.random.default_rng(5)
        views, _ = aug.make_view_batch(imgs, cfg, r)
        r = np.random.default_rng(5)
        factors = []
        for _ in range(2):
            aug.sample_crop_box(6, 6, (1.0, 1.0), r)
            r.random(3)
            factors.append(r.uniform(0.6, 1.4, size=3))
        for v in range(2):
            np.testing.assert_allclose(views[v], aug.apply_jitter(imgs[0], *factors[v]), atol=1e-12)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10**6))
    def test_batch_in_range(self, seed):
        r = np.random.default_rng(seed)
        imgs = r.random((3, 8, 8, 3)).astype(np.float32)
        views, _ = aug.make_view_batch(imgs, aug.AugmentConfig(jitter_strength=2.0, output_size=6), r)
        assert views.shape == (6, 6, 6, 3)
        assert views.min() >= 0 and views.max() <= 1
