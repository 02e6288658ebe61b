"""
Augmentation Module
Training-time augmentations applied jointly to an image and its label map.

Images are resampled bilinearly, label maps by nearest neighbour only, so no
label value is ever invented. Pixels pulled in from outside the image are 0
in the image and UNDEFINED in the labels, which keeps them out of the loss.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from rdcnet.data import UNDEFINED, Sample
from rdcnet.errors import ConfigError, UsageError

logger = logging.getLogger(__name__)

AXES = {'X': -1, 'Y': -2}


# ============== Config ==============

@dataclass
class FlipConfig:
    p_flip: float = 0.5
    axes: List[str] = field(default_factory=lambda: ['X', 'Y'])
    enabled: bool = True


@dataclass
class OffsetConfig:
    mu: float = 0.0
    sigma: float = 0.2
    enabled: bool = True


@dataclass
class NoiseConfig:
    mu: float = 0.05
    sigma: float = 0.3
    enabled: bool = False


@dataclass
class HSVConfig:
    hue_delta: float = 0.3
    sat_range: List[float] = field(default_factory=lambda: [0.8, 1.2])
    val_range: List[float] = field(default_factory=lambda: [0.8, 1.2])
    enabled: bool = True


@dataclass
class BlurConfig:
    p_active: float = 0.5
    sigma_range: List[float] = field(default_factory=lambda: [0.5, 3.0])
    enabled: bool = True


@dataclass
class AffineConfig:
    zoom_range: List[float] = field(default_factory=lambda: [0.9, 1.1])
    shear_deg: float = 5.0
    rot_deg: float = 10.0
    enabled: bool = True


@dataclass
class WarpConfig:
    amplitude: float = 20.0
    enabled: bool = True


@dataclass
class ClipConfig:
    mu_min: float = -1.0
    mu_max: float = 1.0
    sigma: float = 0.3
    enabled: bool = True


@dataclass
class AugmentConfig:
    flip: FlipConfig = field(default_factory=FlipConfig)
    offset: OffsetConfig = field(default_factory=OffsetConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    hsv: HSVConfig = field(default_factory=HSVConfig)
    blur: BlurConfig = field(default_factory=BlurConfig)
    affine: AffineConfig = field(default_factory=AffineConfig)
    warp: WarpConfig = field(default_factory=WarpConfig)
    clip: ClipConfig = field(default_factory=ClipConfig)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        cfg = cls()
        for f in fields(cls):
            getattr(cfg, f.name).enabled = False
        return cfg

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "AugmentConfig":
        cfg = cls()
        sections = {f.name for f in fields(cls)}
        for name, section in values.items():
            if name not in sections:
                raise ConfigError(f"unknown section {name!r}", field=f"augment.{name}")
            if not isinstance(section, dict):
                raise ConfigError("must be a table", field=f"augment.{name}")
            current = getattr(cfg, name)
            known = {f.name for f in fields(current)}
            for key, value in section.items():
                if key not in known:
                    raise ConfigError(f"unknown key {key!r}", field=f"augment.{name}.{key}")
                setattr(current, key, value)
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> "AugmentConfig":
        def probability(value, name):
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"must lie in [0, 1], got {value}", field=f"augment.{name}")

        def ordered(pair, name, positive=False):
            if len(pair) != 2 or pair[0] > pair[1] or (positive and pair[0] <= 0):
                raise ConfigError(f"must be an ordered {'positive ' if positive else ''}pair, got {pair}",
                                  field=f"augment.{name}")

        def non_negative(value, name):
            if value < 0:
                raise ConfigError(f"must be >= 0, got {value}", field=f"augment.{name}")

        probability(self.flip.p_flip, 'flip.p_flip')
        unknown = [a for a in self.flip.axes if a not in AXES]
        if unknown:
            raise ConfigError(f"axes must be a subset of {sorted(AXES)}, got {unknown}", field='augment.flip.axes')
        non_negative(self.offset.sigma, 'offset.sigma')
        non_negative(self.noise.sigma, 'noise.sigma')
        non_negative(self.hsv.hue_delta, 'hsv.hue_delta')
        ordered(self.hsv.sat_range, 'hsv.sat_range')
        ordered(self.hsv.val_range, 'hsv.val_range')
        probability(self.blur.p_active, 'blur.p_active')
        ordered(self.blur.sigma_range, 'blur.sigma_range', positive=True)
        ordered(self.affine.zoom_range, 'affine.zoom_range', positive=True)
        non_negative(self.affine.shear_deg, 'affine.shear_deg')
        non_negative(self.affine.rot_deg, 'affine.rot_deg')
        non_negative(self.warp.amplitude, 'warp.amplitude')
        non_negative(self.clip.sigma, 'clip.sigma')
        return self


# ============== Resampling ==============

def _snap(coords: np.ndarray) -> np.ndarray:
    # float noise from trigonometry would otherwise push exact grid points off the grid
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) < 1e-6, nearest, coords)


def resample(sample: Sample, coords: np.ndarray) -> Sample:
    """Pull values from `coords` ([2, H, W] source row/col per output pixel)."""
    coords = _snap(coords)
    image = np.stack([
        ndimage.map_coordinates(channel, coords, order=1, mode='constant', cval=0.0)
        for channel in sample.image
    ]).astype(sample.image.dtype)
    labels = ndimage.map_coordinates(sample.labels, coords, order=0, mode='constant', cval=UNDEFINED)
    return Sample(image, labels.astype(np.uint16))


def _grid(height: int, width: int) -> np.ndarray:
    return np.mgrid[0:height, 0:width].astype(np.float64)


# ============== Geometric ==============

def random_flip(sample: Sample, axes: Sequence[str], p: float, rng: np.random.Generator) -> Sample:
    """Flip along each axis independently with probability p (X: columns, Y: rows)."""
    image, labels = sample.image, sample.labels
    for axis in axes:
        if axis not in AXES:
            raise UsageError(f"unknown flip axis {axis!r}")
        if rng.random() < p:
            image = np.flip(image, axis=AXES[axis])
            labels = np.flip(labels, axis=AXES[axis])
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(labels))


def affine_matrix(zoom: float, shear_deg: float, rot_deg: float) -> np.ndarray:
    """rotation . shear . zoom acting on (row, col) vectors."""
    theta, shear = np.deg2rad(rot_deg), np.deg2rad(shear_deg)
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shearing = np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
    return rotation @ shearing @ (zoom * np.eye(2))


def affine_transform(sample: Sample, zoom: float, shear_deg: float, rot_deg: float) -> Sample:
    """Apply a fixed zoom/shear/rotation about the image centre."""
    height, width = sample.size
    centre = np.array([(height - 1) / 2.0, (width - 1) / 2.0])[:, None, None]
    inverse = np.linalg.inv(affine_matrix(zoom, shear_deg, rot_deg))
    grid = _grid(height, width) - centre
    coords = np.einsum('ij,jhw->ihw', inverse, grid) + centre
    return resample(sample, coords)


def random_affine(sample: Sample, zoom_range: Sequence[float], shear_deg: float, rot_deg: float,
                  rng: np.random.Generator) -> Sample:
    zoom = rng.uniform(zoom_range[0], zoom_range[1])
    shear = rng.uniform(-shear_deg, shear_deg)
    rotation = rng.uniform(-rot_deg, rot_deg)
    if zoom == 1.0 and shear == 0.0 and rotation == 0.0:
        return sample
    return affine_transform(sample, zoom, shear, rotation)


def warp_offsets(shape: Tuple[int, int], amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform [-A, A] offsets per pixel, each component smoothed with a Gaussian of sigma 2A."""
    offsets = rng.uniform(-amplitude, amplitude, size=(2,) + tuple(shape))
    sigma = 2.0 * amplitude
    return np.stack([ndimage.gaussian_filter(o, sigma=sigma, truncate=3.0, mode='reflect') for o in offsets])


def random_warp(sample: Sample, amplitude: float, rng: np.random.Generator) -> Sample:
    if amplitude < 0:
        raise UsageError(f"warp amplitude must be >= 0, got {amplitude}")
    if amplitude == 0:
        return sample
    offsets = warp_offsets(sample.size, amplitude, rng)
    return resample(sample, _grid(*sample.size) + offsets)


# ============== Intensity ==============

def random_offset(image: np.ndarray, mu: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """One N(mu, sigma) draw added to the whole patch."""
    return (image + rng.normal(mu, sigma)).astype(image.dtype)


def random_noise(image: np.ndarray, mu: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Independent N(mu, sigma) draw added to every pixel."""
    return (image + rng.normal(mu, sigma, size=image.shape)).astype(image.dtype)


def hsv_shift(image: np.ndarray, hue_delta: float, sat_range: Sequence[float], val_range: Sequence[float],
              rng: np.random.Generator) -> np.ndarray:
    """Rotate hue on the [0, 1) circle and scale saturation and value; input is clamped to [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise UsageError(f"HSV shift needs a 3-channel image, got shape {image.shape}")
    hue = rng.uniform(-hue_delta, hue_delta)
    sat = rng.uniform(sat_range[0], sat_range[1])
    val = rng.uniform(val_range[0], val_range[1])
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0).transpose(1, 2, 0).astype(np.float64))
    hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * sat, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * val, 0.0, 1.0)
    return hsv_to_rgb(hsv).transpose(2, 0, 1).astype(image.dtype)


def gaussian_blur(image: np.ndarray, p_active: float, sigma_range: Sequence[float],
                  rng: np.random.Generator) -> np.ndarray:
    """With probability p_active, blur every channel with a normalised Gaussian truncated at 3 sigma."""
    if rng.random() >= p_active:
        return image
    sigma = rng.uniform(sigma_range[0], sigma_range[1])
    spatial = (0,) * (image.ndim - 2) + (sigma, sigma)
    return ndimage.gaussian_filter(image, sigma=spatial, truncate=3.0, mode='reflect').astype(image.dtype)


def random_clip(image: np.ndarray, mu_min: float, mu_max: float, sigma: float,
                rng: np.random.Generator) -> np.ndarray:
    lo = rng.normal(mu_min, sigma)
    hi = rng.normal(mu_max, sigma)
    if lo > hi:
        lo, hi = hi, lo
    return np.clip(image, lo, hi).astype(image.dtype)


# ============== Pipeline ==============

def pipeline(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Enabled augmentations in order: flip, offset, noise, hsv, blur, affine, warp, clip."""
    if cfg.flip.enabled:
        sample = random_flip(sample, cfg.flip.axes, cfg.flip.p_flip, rng)

    image = sample.image
    if cfg.offset.enabled:
        image = random_offset(image, cfg.offset.mu, cfg.offset.sigma, rng)
    if cfg.noise.enabled:
        image = random_noise(image, cfg.noise.mu, cfg.noise.sigma, rng)
    if cfg.hsv.enabled:
        image = hsv_shift(image, cfg.hsv.hue_delta, cfg.hsv.sat_range, cfg.hsv.val_range, rng)
    if cfg.blur.enabled:
        image = gaussian_blur(image, cfg.blur.p_active, cfg.blur.sigma_range, rng)
    sample = Sample(image, sample.labels)

    if cfg.affine.enabled:
        sample = random_affine(sample, cfg.affine.zoom_range, cfg.affine.shear_deg, cfg.affine.rot_deg, rng)
    if cfg.warp.enabled:
        sample = random_warp(sample, cfg.warp.amplitude, rng)

    if cfg.clip.enabled:
        sample = Sample(random_clip(sample.image, cfg.clip.mu_min, cfg.clip.mu_max, cfg.clip.sigma, rng),
                        sample.labels)
    return sample
