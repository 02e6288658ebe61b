"""
Data Module
Samples, the dataset manifest, synthetic ellipse datasets and PNG I/O.

Images are float [C, H, W] arrays in [0, 1]; label maps are uint16 [H, W]
arrays with 0 for background and UNDEFINED for pixels of ambiguous ownership.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from rdcnet.errors import ConfigError, DataIOError, FormatError, GenerationError

logger = logging.getLogger(__name__)

UNDEFINED = 65535
SPLITS = ('train', 'val', 'test')


@dataclass
class Sample:
    image: np.ndarray   # [C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [H, W] uint16

    def __post_init__(self):
        if self.image.ndim != 3 or self.labels.ndim != 2 or self.image.shape[1:] != self.labels.shape:
            raise ConfigError(f"image {self.image.shape} and labels {self.labels.shape} must share H, W",
                              field='sample')

    @property
    def size(self) -> Tuple[int, int]:
        return self.labels.shape


# ============== Manifest ==============

@dataclass
class ManifestEntry:
    split: str
    image_path: Path
    label_path: Path


@dataclass
class DatasetManifest:
    """(split, image, label) triples; one `split<TAB>image<TAB>label` line each on disk."""
    entries: List[ManifestEntry] = field(default_factory=list)
    seed: int = 0

    def split(self, tag: str) -> List[ManifestEntry]:
        if tag not in SPLITS:
            raise ConfigError(f"unknown split {tag!r}; expected one of {SPLITS}", field='split')
        return [e for e in self.entries if e.split == tag]

    def write(self, path) -> None:
        path = Path(path)
        root = path.parent
        lines = []
        for e in self.entries:
            image = Path(e.image_path)
            label = Path(e.label_path)
            image = image.relative_to(root) if image.is_absolute() and image.is_relative_to(root) else image
            label = label.relative_to(root) if label.is_absolute() and label.is_relative_to(root) else label
            lines.append(f"{e.split}\t{image.as_posix()}\t{label.as_posix()}")
        try:
            path.write_text('\n'.join(lines) + '\n')
        except OSError as e:
            raise DataIOError(f"Could not write manifest: {e}", path=path) from e

    @classmethod
    def read(cls, path, seed: int = 0, check_paths: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise DataIOError(f"Could not read manifest: {e}", path=path) from e
        manifest = cls(seed=seed)
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith('#'):
                continue
            parts = line.split('\t')
            if len(parts) != 3:
                raise FormatError(f"line {number}: expected split<TAB>image<TAB>label", path=path)
            tag, image, label = parts
            if tag not in SPLITS:
                raise FormatError(f"line {number}: unknown split {tag!r}", path=path)
            entry = ManifestEntry(tag, path.parent / image, path.parent / label)
            if check_paths:
                for p in (entry.image_path, entry.label_path):
                    if not p.exists():
                        raise DataIOError("Manifest references a missing file", path=p)
            manifest.entries.append(entry)
        return manifest


# ============== Synthetic Data ==============

def _ellipse_mask(size: int, center: Tuple[float, float], radii: Tuple[float, float], angle: float) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size]
    dr, dc = rows - center[0], cols - center[1]
    cos, sin = np.cos(angle), np.sin(angle)
    u = dr * cos + dc * sin
    v = -dr * sin + dc * cos
    return (u / radii[0]) ** 2 + (v / radii[1]) ** 2 <= 1.0


def _fits(mask: np.ndarray, labels: np.ndarray, overlap_fraction: float) -> bool:
    area = int(mask.sum())
    if area < 4:
        return False
    covered = mask & (labels > 0)
    if covered.sum() > overlap_fraction * area:
        return False
    for k in np.unique(labels[covered]):
        visible = labels == k
        if (mask & visible).sum() > overlap_fraction * visible.sum():
            return False
    return True


def generate_sample(size: int, n_instances: int, radius_range: Tuple[float, float], overlap_fraction: float,
                    noise_level: float, rng: np.random.Generator, max_retries: int = 200) -> Sample:
    """One image of `n_instances` coloured ellipses on a smooth textured background."""
    texture = ndimage.gaussian_filter(rng.random((3, size, size)), sigma=(0, 2, 2))
    image = 0.1 + 0.3 * (texture - texture.min()) / max(float(np.ptp(texture)), 1e-6)
    labels = np.zeros((size, size), dtype=np.uint16)

    for k in range(1, n_instances + 1):
        for _ in range(max_retries):
            radii = tuple(rng.uniform(radius_range[0], radius_range[1], size=2))
            center = tuple(rng.uniform(0, size - 1, size=2))
            mask = _ellipse_mask(size, center, radii, rng.uniform(0, np.pi))
            if _fits(mask, labels, overlap_fraction):
                break
        else:
            raise GenerationError(
                f"could not place instance {k} of {n_instances} after {max_retries} attempts; "
                f"lower the instance count, the radii or raise overlap_fraction", field='data')
        colour = rng.uniform(0.45, 1.0, size=3)
        shading = 0.85 + 0.15 * rng.random((size, size))
        labels[mask] = k
        image[:, mask] = (colour[:, None] * shading[mask][None]).astype(image.dtype)

    if noise_level > 0:
        image = image + rng.normal(0.0, noise_level, size=image.shape)
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), labels)


def generate_synthetic(n: int, size: int, min_instances: int, max_instances: int,
                       radius_range: Tuple[float, float], overlap_fraction: float, noise_level: float,
                       rng: np.random.Generator) -> List[Sample]:
    """
    Random ellipse images with per-ellipse instance ids.

    Each sample holds k ~ Uniform{min_instances..max_instances} ellipses; later
    ellipses occlude earlier ones, and no ellipse may overlap existing ones
    (or be overlapped) by more than `overlap_fraction` of its area.
    """
    if n < 0 or size < 1:
        raise ConfigError(f"need n >= 0 and size >= 1, got n={n}, size={size}", field='data.image_size')
    if not 1 <= min_instances <= max_instances:
        raise ConfigError(f"need 1 <= min <= max, got {min_instances}..{max_instances}",
                          field='data.min_instances')
    if not 0 < radius_range[0] <= radius_range[1]:
        raise ConfigError(f"need 0 < low <= high, got {radius_range}", field='data.radius_min')
    if not 0.0 <= overlap_fraction < 1.0:
        raise ConfigError(f"must lie in [0, 1), got {overlap_fraction}", field='data.overlap_fraction')
    if noise_level < 0:
        raise ConfigError(f"must be >= 0, got {noise_level}", field='data.noise_level')

    samples = []
    for _ in range(n):
        k = int(rng.integers(min_instances, max_instances + 1))
        samples.append(generate_sample(size, k, radius_range, overlap_fraction, noise_level, rng))
    return samples


def random_crop(sample: Sample, patch: int, rng: np.random.Generator) -> Sample:
    """Random patch x patch window; the sample itself when it already has that size."""
    height, width = sample.size
    if patch > height or patch > width:
        raise ConfigError(f"patch {patch} larger than image {height}x{width}", field='trainer.patch_size')
    if (height, width) == (patch, patch):
        return sample
    r = int(rng.integers(0, height - patch + 1))
    c = int(rng.integers(0, width - patch + 1))
    return Sample(sample.image[:, r:r + patch, c:c + patch].copy(), sample.labels[r:r + patch, c:c + patch].copy())


# ============== PNG I/O ==============

def _open(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataIOError("File not found", path=path)
    try:
        with Image.open(path) as img:
            img.load()
            return np.array(img)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise FormatError(f"Could not decode image: {e}", path=path) from e


def save_image(path, image: np.ndarray) -> None:
    """[C, H, W] floats in [0, 1] to an 8-bit PNG (RGB for 3 channels, grayscale for 1)."""
    path = Path(path)
    quantized = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    array = quantized[0] if quantized.shape[0] == 1 else quantized.transpose(1, 2, 0)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(array).save(path)
    except OSError as e:
        raise DataIOError(f"Could not write image: {e}", path=path) from e


def load_image(path) -> np.ndarray:
    """8-bit PNG to float32 [C, H, W] in [0, 1]."""
    array = _open(path)
    if array.dtype != np.uint8:
        raise FormatError(f"expected an 8-bit image, got {array.dtype}", path=path)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.shape[2] == 4:
        array = array[:, :, :3]
    return (array.transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_labels(path, labels: np.ndarray) -> None:
    """Label map to a 16-bit grayscale PNG."""
    path = Path(path)
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > UNDEFINED:
        raise FormatError(f"label ids must fit in 16 bits, got range {labels.min()}..{labels.max()}", path=path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(labels.astype(np.uint16)).save(path)
    except OSError as e:
        raise DataIOError(f"Could not write labels: {e}", path=path) from e


def load_labels(path) -> np.ndarray:
    array = _open(path)
    if array.ndim != 2:
        raise FormatError(f"expected a single-channel label image, got shape {array.shape}", path=path)
    return array.astype(np.uint16)


def save_sample(sample: Sample, image_path, label_path) -> None:
    save_image(image_path, sample.image)
    save_labels(label_path, sample.labels)


def load_sample(image_path, label_path) -> Sample:
    image = load_image(image_path)
    labels = load_labels(label_path)
    if image.shape[1:] != labels.shape:
        raise FormatError(f"image {image.shape[1:]} and labels {labels.shape} differ in size", path=label_path)
    return Sample(image, labels)


def load_split(manifest: DatasetManifest, tag: str) -> List[Sample]:
    return [load_sample(e.image_path, e.label_path) for e in manifest.split(tag)]


def pad_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad a [C, H, W] image at the bottom/right so H and W are multiples of `multiple`."""
    _, height, width = image.shape
    pad_h, pad_w = (-height) % multiple, (-width) % multiple
    if not (pad_h or pad_w):
        return image
    return np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
