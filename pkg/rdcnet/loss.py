"""
Embedding Soft-Jaccard Loss
Converts embedding distances to per-instance probabilities with a Gaussian
kernel around each instance's true centroid and scores them, together with
the foreground probability, by a soft Jaccard loss.

    P(u = k) = exp(-|y_u - c_k|^2 / (2 sigma^2)),   margin = sigma * sqrt(-2 ln 0.5)

Undefined pixels never contribute; the instance term ignores background.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from rdcnet.data import UNDEFINED
from rdcnet.errors import ConfigError, ShapeError
from rdcnet.model import FOREGROUND
from rdcnet.tensor import Tensor

logger = logging.getLogger(__name__)


def sigma_from_margin(margin: float) -> float:
    """Bandwidth whose Gaussian equals 0.5 at distance `margin`."""
    if not margin > 0:
        raise ConfigError(f"must be positive, got {margin}", field='loss.margin')
    return margin / math.sqrt(-2.0 * math.log(0.5))


def margin_from_sigma(sigma: float) -> float:
    if not sigma > 0:
        raise ConfigError(f"must be positive, got {sigma}", field='loss.sigma')
    return sigma * math.sqrt(-2.0 * math.log(0.5))


@dataclass
class LossConfig:
    margin: float = 10.0
    semantic_weight: float = 1.0
    instance_weight: float = 1.0
    epsilon: float = 1e-6
    supervise_all_iterations: bool = False
    detach_centroids: bool = False

    @property
    def sigma(self) -> float:
        return sigma_from_margin(self.margin)

    def validate(self) -> "LossConfig":
        sigma_from_margin(self.margin)
        for name in ('semantic_weight', 'instance_weight'):
            if getattr(self, name) < 0:
                raise ConfigError(f"must be >= 0, got {getattr(self, name)}", field=f"loss.{name}")
        if self.epsilon < 0:
            raise ConfigError(f"must be >= 0, got {self.epsilon}", field='loss.epsilon')
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ============== Building Blocks ==============

def instance_ids(labels: np.ndarray) -> List[int]:
    """Positive, defined instance ids present in a label map, ascending."""
    ids = np.unique(labels)
    return [int(k) for k in ids if k != 0 and k != UNDEFINED]


def true_centroids(embeddings: Tensor, labels: np.ndarray, ids: Optional[Iterable[int]] = None,
                   detach: bool = False) -> Dict[int, Tensor]:
    """
    Mean embedding under each instance's true mask.

    Args:
        embeddings: [D, H, W] tensor
        labels: [H, W] instance ids; 0 background, UNDEFINED ignored
        ids: instances to compute; defaults to every id present
        detach: cut the gradient through the mean

    Returns:
        Dict of instance id to a [D] tensor
    """
    if embeddings.shape[1:] != labels.shape:
        raise ShapeError(f"embeddings {embeddings.shape} and labels {labels.shape} differ", field='labels')
    ids = instance_ids(labels) if ids is None else list(ids)
    source = embeddings.detach() if detach else embeddings
    centroids = {}
    for k in ids:
        mask = labels == k
        count = int(mask.sum())
        if count == 0:
            logger.warning(f"Instance {k} has no pixels, skipping its centroid")
            continue
        weights = Tensor(mask[None] / float(count))
        centroids[k] = (source * weights).sum(axis=(1, 2))
    return centroids


def instance_prob(embeddings: Tensor, centroid: Tensor, sigma: float) -> Tensor:
    """exp(-|y_u - c|^2 / (2 sigma^2)) for every pixel u; [D, H, W] -> [H, W]."""
    if not sigma > 0:
        raise ConfigError(f"must be positive, got {sigma}", field='loss.sigma')
    centroid = centroid if isinstance(centroid, Tensor) else Tensor(np.asarray(centroid))
    diff = embeddings - centroid.reshape(centroid.shape[0], 1, 1)
    sq_dist = (diff * diff).sum(axis=0)
    return (sq_dist * (-1.0 / (2.0 * sigma * sigma))).exp()


def soft_jaccard(pred: Tensor, target: np.ndarray, mask: np.ndarray, epsilon: float = 1e-6) -> Tensor:
    """1 - (sum p t + eps) / (sum p + sum t - sum p t + eps), restricted to `mask`."""
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(f"pred {pred.shape}, target {target.shape} and mask {mask.shape} differ", field='mask')
    mask = np.asarray(mask, dtype=bool)
    target_in = Tensor(np.asarray(target, dtype=bool) & mask)
    pm = pred * Tensor(mask)
    intersection = (pm * target_in).sum()
    target_sum = float(target_in.data.sum())
    union = pm.sum() + target_sum - intersection
    return 1.0 - (intersection + epsilon) / (union + epsilon)


# ============== Total ==============

def image_loss(semantic_probs: Tensor, embeddings: Tensor, labels: np.ndarray,
               cfg: LossConfig) -> Tuple[Tensor, Tensor]:
    """Semantic and instance terms for one image: probs [C,H,W], embeddings [D,H,W], labels [H,W]."""
    defined = labels != UNDEFINED
    foreground = defined & (labels != 0)

    semantic = soft_jaccard(semantic_probs[FOREGROUND], foreground, defined, cfg.epsilon)

    centroids = true_centroids(embeddings, labels, detach=cfg.detach_centroids)
    if not centroids:
        return semantic, Tensor(0.0)
    sigma = cfg.sigma
    terms = [
        soft_jaccard(instance_prob(embeddings, centroid, sigma), labels == k, foreground, cfg.epsilon)
        for k, centroid in centroids.items()
    ]
    instance = terms[0]
    for term in terms[1:]:
        instance = instance + term
    return semantic, instance * (1.0 / len(terms))


def esj_total(iteration_outputs: Sequence[Tuple[Tensor, Tensor]], labels: np.ndarray,
              cfg: LossConfig) -> Tensor:
    """
    Weighted semantic + instance soft-Jaccard loss.

    Args:
        iteration_outputs: (semantic_probs [N,C,H,W], embeddings [N,D,H,W]) per iteration
        labels: [N, H, W] label maps (a single [H, W] map is treated as N = 1)
        cfg: loss configuration

    Returns:
        Scalar tensor: per-image loss averaged over the batch, over the final
        iteration or averaged over all iterations when supervising them all.
    """
    if not iteration_outputs:
        raise ShapeError("no iteration outputs to score", field='iteration_outputs')
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    outputs = iteration_outputs if cfg.supervise_all_iterations else iteration_outputs[-1:]

    total = None
    for semantic_probs, embeddings in outputs:
        if semantic_probs.shape[0] != labels.shape[0] or semantic_probs.shape[2:] != labels.shape[1:]:
            raise ShapeError(f"outputs {semantic_probs.shape} do not match labels {labels.shape}",
                             field='labels')
        for n in range(labels.shape[0]):
            semantic, instance = image_loss(semantic_probs[n], embeddings[n], labels[n], cfg)
            term = semantic * cfg.semantic_weight + instance * cfg.instance_weight
            total = term if total is None else total + term
    return total * (1.0 / (labels.shape[0] * len(outputs)))
