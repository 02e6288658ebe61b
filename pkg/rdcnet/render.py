"""
Render Module
Per-iteration inspection panels: foreground probability, embedding
pseudocolour and the Hough vote histogram.
"""

import logging
from pathlib import Path
from typing import List, Optional

import matplotlib
import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from rdcnet.decoder import DecoderConfig, vote_histogram
from rdcnet.errors import DataIOError
from rdcnet.model import FOREGROUND, ModelParams, coordinate_grid, iterate
from rdcnet.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

PANELS = ('fg', 'embedding', 'votes')


def foreground_image(semantic_probs: np.ndarray) -> np.ndarray:
    """[C, H, W] probabilities to an 8-bit grayscale image of the foreground channel."""
    return np.clip(np.rint(semantic_probs[FOREGROUND] * 255.0), 0, 255).astype(np.uint8)


def embedding_image(embeddings: np.ndarray, max_distance: Optional[float] = None) -> np.ndarray:
    """
    Colour each pixel by where its embedding points: the direction of the
    offset from the pixel to its embedding picks the hue on a colour wheel,
    its length (relative to `max_distance`) the brightness.
    """
    _, height, width = embeddings.shape
    offset = embeddings - coordinate_grid(height, width).data[0]
    angle = np.arctan2(offset[0], offset[1])
    length = np.hypot(offset[0], offset[1])
    scale = max_distance or max(float(length.max()), 1e-6)
    hsv = np.stack([
        np.mod(angle / (2 * np.pi), 1.0),
        np.ones_like(angle),
        np.clip(length / scale, 0.0, 1.0),
    ], axis=-1)
    return np.rint(hsv_to_rgb(hsv) * 255.0).astype(np.uint8)


def histogram_image(hist: np.ndarray, cmap: str = 'magma') -> np.ndarray:
    """Vote counts on a log scale through a matplotlib colormap."""
    scaled = np.log1p(hist.astype(np.float64))
    top = scaled.max()
    if top > 0:
        scaled = scaled / top
    rgba = matplotlib.colormaps[cmap](scaled)
    return np.rint(rgba[..., :3] * 255.0).astype(np.uint8)


def save_panel(path, array: np.ndarray) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(array).save(path)
    except OSError as e:
        raise DataIOError(f"Could not write panel: {e}", path=path) from e
    return path


def render_iterations(params: ModelParams, image: np.ndarray, decoder_cfg: DecoderConfig, out_dir, stem: str,
                      iterations: Optional[int] = None) -> List[Path]:
    """Write the three panels for every iteration of one [C, H, W] image."""
    out_dir = Path(out_dir)
    written = []
    with no_grad():
        outputs = iterate(Tensor(image[None]), params, params.config, iterations=iterations)
        for i, (semantic_probs, embeddings) in enumerate(outputs, start=1):
            probs = semantic_probs.data[0]
            emb = embeddings.data[0]
            hist = vote_histogram(emb, probs[FOREGROUND] > decoder_cfg.fg_threshold)
            prefix = out_dir / f"{stem}_iter{i:02d}"
            written.append(save_panel(f"{prefix}_fg.png", foreground_image(probs)))
            written.append(save_panel(f"{prefix}_embedding.png", embedding_image(emb)))
            written.append(save_panel(f"{prefix}_votes.png", histogram_image(hist)))
    logger.info(f"Wrote {len(written)} inspection panels to {out_dir}")
    return written
