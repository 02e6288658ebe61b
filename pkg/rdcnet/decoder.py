"""
Hough Voting Decoder
Turns a foreground probability map and pixel embeddings into an instance
label map:

    1. every foreground pixel votes for the histogram bin at its rounded embedding
    2. strict local maxima of the histogram become instance centres
    3. foreground pixels join their nearest centre in embedding space
    4. optionally, each label is cleaned with a morphological opening
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from rdcnet.errors import ConfigError, ShapeError
from rdcnet.model import FOREGROUND

logger = logging.getLogger(__name__)

Centre = Tuple[int, int]


def round_to_odd(value: float) -> int:
    """Nearest integer, bumped up by one when even; never below 1."""
    n = int(np.floor(value + 0.5))
    if n % 2 == 0:
        n += 1
    return max(n, 1)


@dataclass
class DecoderConfig:
    fg_threshold: float = 0.5
    window: Optional[int] = None  # None: round_to_odd(2 * margin)
    min_votes: int = 2
    opening_radius: float = 0.0

    def resolve(self, margin: float) -> "DecoderConfig":
        """Copy with the window filled in from the loss margin when unset."""
        window = self.window if self.window is not None else round_to_odd(2.0 * margin)
        return DecoderConfig(self.fg_threshold, window, self.min_votes, self.opening_radius).validate()

    def validate(self) -> "DecoderConfig":
        if not 0.0 < self.fg_threshold < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {self.fg_threshold}", field='decoder.fg_threshold')
        if self.window is not None and (int(self.window) != self.window or self.window < 1 or self.window % 2 == 0):
            raise ConfigError(f"must be an odd integer >= 1, got {self.window}", field='decoder.window')
        if self.min_votes < 1:
            raise ConfigError(f"must be >= 1, got {self.min_votes}", field='decoder.min_votes')
        if self.opening_radius < 0:
            raise ConfigError(f"must be >= 0, got {self.opening_radius}", field='decoder.opening_radius')
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def window_candidates(centre: int, spread: int = 2) -> List[int]:
    """
    Odd windows around `centre`, nearest first: centre, centre - 2, centre + 2, ...
    up to `spread` steps each side. Windows below 1 are dropped.
    """
    if int(centre) != centre or centre < 1 or centre % 2 == 0:
        raise ConfigError(f"must be an odd integer >= 1, got {centre}", field='decoder.window')
    if spread < 0:
        raise ConfigError(f"must be >= 0, got {spread}", field='trainer.window_spread')
    windows = [int(centre)]
    for step in range(1, spread + 1):
        windows.extend(w for w in (centre - 2 * step, centre + 2 * step) if w >= 1)
    return windows


# ============== Voting ==============

def vote_bins(embeddings: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Round-half-up each embedding to a bin, clamped into the image."""
    _, height, width = embeddings.shape
    rows = np.clip(np.floor(embeddings[0] + 0.5), 0, height - 1).astype(np.int64)
    cols = np.clip(np.floor(embeddings[1] + 0.5), 0, width - 1).astype(np.int64)
    return rows, cols


def vote_histogram(embeddings: np.ndarray, fg_mask: np.ndarray) -> np.ndarray:
    """Count foreground votes per pixel-sized bin; [2, H, W] embeddings -> [H, W] integer grid."""
    embeddings = np.asarray(embeddings)
    fg_mask = np.asarray(fg_mask, dtype=bool)
    if embeddings.ndim != 3 or embeddings.shape[0] != 2 or embeddings.shape[1:] != fg_mask.shape:
        raise ShapeError(f"embeddings {embeddings.shape} do not match mask {fg_mask.shape}", field='embeddings')
    height, width = fg_mask.shape
    rows, cols = vote_bins(embeddings)
    flat = rows[fg_mask] * width + cols[fg_mask]
    return np.bincount(flat, minlength=height * width).reshape(height, width).astype(np.int64)


def _has_tied_predecessor(hist: np.ndarray, row: int, col: int, half: int) -> bool:
    """True when an equal bin precedes (row, col) lexicographically inside its window."""
    value = hist[row, col]
    r0, c0 = max(row - half, 0), max(col - half, 0)
    c1 = min(col + half + 1, hist.shape[1])
    above = hist[r0:row, c0:c1]
    left = hist[row, c0:col]
    return bool((above == value).any() or (left == value).any())


def local_maxima(hist: np.ndarray, window: int, min_votes: int = 1) -> List[Centre]:
    """
    Bins with at least `min_votes` that beat every other bin of the centred
    window x window neighbourhood. Of a tied plateau only the lexicographically
    smallest bin is kept. Returned in row-major order.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"must be an odd integer >= 1, got {window}", field='decoder.window')
    hist = np.asarray(hist)
    half = window // 2
    window_max = ndimage.maximum_filter(hist, size=window, mode='constant', cval=-1)
    candidates = np.argwhere((hist == window_max) & (hist >= min_votes))
    return [(int(r), int(c)) for r, c in candidates if not _has_tied_predecessor(hist, r, c, half)]


def assign(embeddings: np.ndarray, fg_mask: np.ndarray, centres: Sequence[Centre]) -> np.ndarray:
    """Label each foreground pixel with 1 + index of its nearest centre; ties go to the lowest index."""
    fg_mask = np.asarray(fg_mask, dtype=bool)
    labels = np.zeros(fg_mask.shape, dtype=np.int32)
    if len(centres) == 0 or not fg_mask.any():
        return labels
    points = np.asarray(embeddings)[:, fg_mask].T.astype(np.float64)
    centre_arr = np.asarray(centres, dtype=np.float64)
    sq_dist = ((points[:, None, :] - centre_arr[None, :, :]) ** 2).sum(axis=2)
    labels[fg_mask] = np.argmin(sq_dist, axis=1) + 1
    return labels


def disc(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy ** 2 + xx ** 2) <= radius ** 2


def label_opening(labels: np.ndarray, radius: float) -> np.ndarray:
    """Morphological opening of each label with a disc; opened-away pixels become background."""
    if radius <= 0:
        return labels
    structure = disc(radius)
    out = np.zeros_like(labels)
    for k in np.unique(labels):
        if k == 0:
            continue
        opened = ndimage.binary_opening(labels == k, structure=structure)
        out[opened] = k
    return out


def decode(semantic_probs: np.ndarray, embeddings: np.ndarray, cfg: DecoderConfig) -> np.ndarray:
    """
    Full decoding of one image.

    Args:
        semantic_probs: [C, H, W] class probabilities (channel 1 is foreground)
        embeddings: [2, H, W] embeddings in pixel coordinates
        cfg: decoder configuration with a resolved window

    Returns:
        [H, W] int32 label map, 0 = background
    """
    if cfg.window is None:
        raise ConfigError("window is unresolved; call DecoderConfig.resolve(margin)", field='decoder.window')
    fg_mask = np.asarray(semantic_probs)[FOREGROUND] > cfg.fg_threshold
    hist = vote_histogram(embeddings, fg_mask)
    centres = local_maxima(hist, cfg.window, cfg.min_votes)
    labels = assign(embeddings, fg_mask, centres)
    if cfg.opening_radius > 0:
        labels = label_opening(labels, cfg.opening_radius)
    logger.debug(f"Decoded {len(centres)} instances from {int(fg_mask.sum())} foreground pixels")
    return labels
