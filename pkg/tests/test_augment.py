import os
import sys
from unittest.mock import MagicMock

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rdcnet.augment import (
    AugmentConfig, affine_matrix, affine_transform, gaussian_blur, hsv_shift, pipeline, random_affine, random_clip,
    random_flip, random_noise, random_offset, random_warp, warp_offsets,
)
from rdcnet.data import UNDEFINED, Sample
from rdcnet.errors import ConfigError, UsageError
from rdcnet.tensor import make_rng


@pytest.fixture
def sample():
    rng = np.random.default_rng(0)
    image = rng.random((3, 16, 16)).astype(np.float32)
    labels = np.zeros((16, 16), dtype=np.uint16)
    labels[2:7, 3:9] = 1
    labels[9:14, 8:15] = 2
    return Sample(image, labels)


def fixed_rng(**draws):
    """A generator stand-in returning scripted draws per method."""
    rng = MagicMock()
    for method, values in draws.items():
        getattr(rng, method).side_effect = list(values)
    return rng


class TestAugmentConfig:
    def test_defaults(self):
        cfg = AugmentConfig().validate()
        assert cfg.flip.p_flip == 0.5
        assert cfg.warp.amplitude == 20.0
        assert cfg.blur.sigma_range == [0.5, 3.0]
        assert not cfg.noise.enabled

    def test_disabled(self):
        cfg = AugmentConfig.disabled()
        assert not any(section['enabled'] for section in cfg.to_dict().values())

    def test_from_dict_overrides(self):
        cfg = AugmentConfig.from_dict({'warp': {'amplitude': 4.0}, 'noise': {'enabled': True}})
        assert cfg.warp.amplitude == 4.0
        assert cfg.noise.enabled
        assert cfg.flip.p_flip == 0.5

    @pytest.mark.parametrize('values,field', [
        ({'rotate': {}}, 'augment.rotate'),
        ({'warp': {'strength': 1}}, 'augment.warp.strength'),
        ({'warp': 3}, 'augment.warp'),
    ])
    def test_from_dict_rejects(self, values, field):
        with pytest.raises(ConfigError, match=field):
            AugmentConfig.from_dict(values)

    @pytest.mark.parametrize('values,field', [
        ({'flip': {'p_flip': 1.5}}, 'augment.flip.p_flip'),
        ({'flip': {'axes': ['Z']}}, 'augment.flip.axes'),
        ({'blur': {'sigma_range': [0.0, 1.0]}}, 'augment.blur.sigma_range'),
        ({'affine': {'zoom_range': [1.2, 0.8]}}, 'augment.affine.zoom_range'),
        ({'warp': {'amplitude': -1.0}}, 'augment.warp.amplitude'),
    ])
    def test_validate(self, values, field):
        with pytest.raises(ConfigError, match=field):
            AugmentConfig.from_dict(values).validate()


class TestFlip:
    def test_always_flip_x(self, sample):
        out = random_flip(sample, ['X'], 1.0, make_rng(0))
        np.testing.assert_array_equal(out.image, sample.image[:, :, ::-1])
        np.testing.assert_array_equal(out.labels, sample.labels[:, ::-1])

    def test_always_flip_y(self, sample):
        out = random_flip(sample, ['Y'], 1.0, make_rng(0))
        np.testing.assert_array_equal(out.labels, sample.labels[::-1])

    def test_never_flip(self, sample):
        out = random_flip(sample, ['X', 'Y'], 0.0, make_rng(0))
        np.testing.assert_array_equal(out.image, sample.image)
        np.testing.assert_array_equal(out.labels, sample.labels)

    def test_unknown_axis(self, sample):
        with pytest.raises(UsageError):
            random_flip(sample, ['Z'], 1.0, make_rng(0))


class TestAffine:
    def test_identity_matrix(self):
        np.testing.assert_allclose(affine_matrix(1.0, 0.0, 0.0), np.eye(2))

    def test_quarter_turn_matches_rot90(self, sample):
        out = affine_transform(sample, 1.0, 0.0, 90.0)
        np.testing.assert_array_equal(out.labels, np.rot90(sample.labels, 1))
        np.testing.assert_allclose(out.image, np.rot90(sample.image, 1, axes=(1, 2)), atol=1e-6)

    def test_zoom_out_fills_undefined(self, sample):
        out = affine_transform(sample, 0.5, 0.0, 0.0)
        assert out.labels[0, 0] == UNDEFINED
        assert out.image[:, 0, 0].tolist() == [0.0, 0.0, 0.0]

    def test_labels_are_never_interpolated(self, sample):
        out = affine_transform(sample, 1.07, 4.0, 13.0)
        assert set(np.unique(out.labels)) <= {0, 1, 2, UNDEFINED}

    def test_identity_draw_returns_sample(self, sample):
        rng = fixed_rng(uniform=[1.0, 0.0, 0.0])
        assert random_affine(sample, [1.0, 1.0], 0.0, 0.0, rng) is sample


class TestWarp:
    def test_zero_amplitude(self, sample):
        assert random_warp(sample, 0.0, make_rng(0)) is sample

    def test_negative_amplitude(self, sample):
        with pytest.raises(UsageError):
            random_warp(sample, -1.0, make_rng(0))

    def test_offsets_are_smooth_and_bounded(self):
        offsets = warp_offsets((32, 32), 4.0, make_rng(1))
        assert offsets.shape == (2, 32, 32)
        assert np.abs(offsets).max() <= 4.0
        assert np.abs(np.diff(offsets, axis=2)).max() < 1.0

    def test_labels_stay_in_range(self, sample):
        out = random_warp(sample, 3.0, make_rng(2))
        assert out.image.shape == sample.image.shape
        assert set(np.unique(out.labels)) <= {0, 1, 2, UNDEFINED}


class TestIntensity:
    def test_offset_shifts_everything(self, sample):
        rng = MagicMock()
        rng.normal.return_value = 0.25
        out = random_offset(sample.image, 0.0, 0.2, rng)
        np.testing.assert_allclose(out, sample.image + 0.25, atol=1e-6)
        assert out.dtype == np.float32

    def test_offset_draws_are_centred(self):
        rng = make_rng(0, 2)
        image = np.zeros((1, 1, 1))
        sigma = 0.2
        draws = np.array([random_offset(image, 0.0, sigma, rng)[0, 0, 0] for _ in range(10_000)])
        assert abs(draws.mean()) <= 3 * sigma / 100
        assert draws.std() == pytest.approx(sigma, rel=0.05)

    def test_noise_is_independent_per_pixel(self):
        rng = make_rng(1, 2)
        image = np.full((3, 16, 16), 0.5)
        sigma = 0.3
        residuals = np.stack([random_noise(image, 0.0, sigma, rng) - image for _ in range(50)])
        assert residuals.std() == pytest.approx(sigma, rel=0.05)
        assert abs(residuals.mean()) < 0.01
        assert residuals[0].std() > 0.0
        assert random_noise(image.astype(np.float32), 0.0, sigma, rng).dtype == np.float32

    def test_hsv_red_to_green(self):
        image = np.zeros((3, 2, 2), dtype=np.float32)
        image[0] = 1.0
        out = hsv_shift(image, 0.5, [1.0, 1.0], [1.0, 1.0], fixed_rng(uniform=[1 / 3, 1.0, 1.0]))
        np.testing.assert_allclose(out[1], 1.0, atol=1e-6)
        np.testing.assert_allclose(out[0], 0.0, atol=1e-6)
        np.testing.assert_allclose(out[2], 0.0, atol=1e-6)

    def test_hsv_needs_rgb(self):
        with pytest.raises(UsageError):
            hsv_shift(np.zeros((1, 4, 4)), 0.1, [1, 1], [1, 1], make_rng(0))

    def test_hsv_identity(self, sample):
        out = hsv_shift(sample.image, 0.0, [1.0, 1.0], [1.0, 1.0], make_rng(0))
        np.testing.assert_allclose(out, sample.image, atol=1e-5)

    def test_blur_inactive(self, sample):
        assert gaussian_blur(sample.image, 0.0, [1.0, 2.0], make_rng(0)) is sample.image

    def test_blur_keeps_constant_image(self):
        image = np.full((3, 8, 8), 0.4, dtype=np.float32)
        np.testing.assert_allclose(gaussian_blur(image, 1.0, [1.0, 2.0], make_rng(0)), 0.4, atol=1e-6)

    def test_blur_does_not_mix_channels(self):
        image = np.zeros((3, 9, 9), dtype=np.float32)
        image[1, 4, 4] = 1.0
        out = gaussian_blur(image, 1.0, [1.0, 1.0], make_rng(0))
        assert not out[0].any() and not out[2].any()
        assert out[1].sum() == pytest.approx(1.0, rel=1e-5)

    def test_clip_bounds_are_ordered(self, sample):
        out = random_clip(sample.image, 0.0, 1.0, 0.3, fixed_rng(normal=[0.8, 0.2]))
        assert out.min() >= 0.2 - 1e-7
        assert out.max() <= 0.8 + 1e-7


class TestPipeline:
    def test_disabled_is_identity(self, sample):
        out = pipeline(sample, AugmentConfig.disabled(), make_rng(0))
        np.testing.assert_array_equal(out.image, sample.image)
        np.testing.assert_array_equal(out.labels, sample.labels)

    def test_deterministic(self, sample):
        cfg = AugmentConfig.from_dict({'warp': {'amplitude': 3.0}})
        a = pipeline(sample, cfg, make_rng(4, 2, 0, 0))
        b = pipeline(sample, cfg, make_rng(4, 2, 0, 0))
        assert a.image.tobytes() == b.image.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_shapes_and_labels(self, sample):
        cfg = AugmentConfig.from_dict({'warp': {'amplitude': 3.0}, 'noise': {'enabled': True}})
        for seed in range(5):
            out = pipeline(sample, cfg, make_rng(seed))
            assert out.image.shape == sample.image.shape
            assert out.image.dtype == np.float32
            assert set(np.unique(out.labels)) <= {0, 1, 2, UNDEFINED}
