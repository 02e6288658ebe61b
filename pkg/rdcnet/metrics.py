"""
Instance Metrics
Precision / recall / F1 at an IoU threshold, Symmetric Best Dice and the
Aggregated Jaccard Index. Pixels marked UNDEFINED in the ground truth are
removed from both maps before anything is counted.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from rdcnet.data import UNDEFINED
from rdcnet.errors import DataIOError, ShapeError, UsageError

logger = logging.getLogger(__name__)

CURVE_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(9))


@dataclass
class Overlaps:
    """Pairwise pixel overlaps between predicted and ground-truth instances."""
    pred_ids: np.ndarray
    gt_ids: np.ndarray
    intersection: np.ndarray  # [n_pred, n_gt]
    pred_area: np.ndarray
    gt_area: np.ndarray

    @property
    def union(self) -> np.ndarray:
        return self.pred_area[:, None] + self.gt_area[None, :] - self.intersection

    @property
    def iou(self) -> np.ndarray:
        union = self.union
        return np.divide(self.intersection, union, out=np.zeros(union.shape), where=union > 0)

    @property
    def dice(self) -> np.ndarray:
        total = self.pred_area[:, None] + self.gt_area[None, :]
        return np.divide(2.0 * self.intersection, total, out=np.zeros(total.shape), where=total > 0)


def overlaps(pred: np.ndarray, gt: np.ndarray) -> Overlaps:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape",
                         field='prediction')
    defined = gt != UNDEFINED
    p = pred[defined].astype(np.int64)
    g = gt[defined].astype(np.int64)

    pred_ids, p_index = np.unique(p, return_inverse=True)
    gt_ids, g_index = np.unique(g, return_inverse=True)
    joint = np.bincount(p_index * len(gt_ids) + g_index, minlength=len(pred_ids) * len(gt_ids))
    joint = joint.reshape(len(pred_ids), len(gt_ids))

    keep_p = pred_ids != 0
    keep_g = gt_ids != 0
    return Overlaps(
        pred_ids=pred_ids[keep_p],
        gt_ids=gt_ids[keep_g],
        intersection=joint[keep_p][:, keep_g],
        pred_area=joint.sum(axis=1)[keep_p],
        gt_area=joint.sum(axis=0)[keep_g],
    )


def iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """IoU of every (pred, gt) instance pair, rows and columns in ascending id order."""
    return overlaps(pred, gt).iou


def match_at_threshold(ious: np.ndarray, t: float = 0.5) -> List[Tuple[int, int]]:
    """Greedy one-to-one matching by descending IoU among pairs with IoU > t."""
    if not 0.0 < t <= 1.0:
        raise UsageError(f"IoU threshold must lie in (0, 1], got {t}")
    ious = np.asarray(ious)
    rows, cols = np.nonzero(ious > t)
    order = sorted(zip(rows, cols), key=lambda rc: (-ious[rc], rc[0], rc[1]))
    used_pred, used_gt = set(), set()
    matching = []
    for i, j in order:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)
        matching.append((int(i), int(j)))
    return matching


def prf1(matching: Sequence[Tuple[int, int]], n_pred: int, n_gt: int) -> Tuple[float, float, float]:
    """Precision, recall and F1; 0/0 counts as 1 for precision/recall and 0 for F1."""
    tp = len(matching)
    fp, fn = n_pred - tp, n_gt - tp
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _best_dice(dice: np.ndarray, n_a: int, n_b: int) -> float:
    if n_a == 0:
        return 1.0 if n_b == 0 else 0.0
    if n_b == 0:
        return 0.0
    return float(dice.max(axis=1).mean())


def sbd(pred: np.ndarray, gt: np.ndarray) -> float:
    """min(BestDice(pred|gt), BestDice(gt|pred))."""
    ov = overlaps(pred, gt)
    dice = ov.dice
    n_pred, n_gt = len(ov.pred_ids), len(ov.gt_ids)
    return min(_best_dice(dice, n_pred, n_gt), _best_dice(dice.T, n_gt, n_pred))


def aji(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    Aggregated Jaccard Index.
    Ground-truth instances are visited in ascending id order; each takes the
    unused prediction with the highest IoU. Unused predictions are added to
    the union at the end.
    """
    ov = overlaps(pred, gt)
    iou, union = ov.iou, ov.union
    used = np.zeros(len(ov.pred_ids), dtype=bool)
    inter_sum, union_sum = 0, 0
    for j in range(len(ov.gt_ids)):
        candidates = ~used & (ov.intersection[:, j] > 0)
        if candidates.any():
            i = int(np.argmax(np.where(candidates, iou[:, j], -1.0)))
            used[i] = True
            inter_sum += int(ov.intersection[i, j])
            union_sum += int(union[i, j])
        else:
            union_sum += int(ov.gt_area[j])
    union_sum += int(ov.pred_area[~used].sum())
    if union_sum == 0:
        return 1.0
    return inter_sum / union_sum


# ============== Reports ==============

@dataclass
class ImageRecord:
    name: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    sbd: float
    aji: float


@dataclass
class EvalReport:
    iou_threshold: float
    records: List[ImageRecord] = field(default_factory=list)

    SCORES = ('precision', 'recall', 'f1', 'sbd', 'aji')

    @property
    def aggregate(self) -> Dict[str, float]:
        """Per-image means of every score plus pooled counts."""
        summary: Dict[str, Any] = {'images': len(self.records)}
        for key in ('tp', 'fp', 'fn'):
            summary[key] = int(sum(getattr(r, key) for r in self.records))
        for key in self.SCORES:
            values = [getattr(r, key) for r in self.records]
            summary[key] = float(np.mean(values)) if values else 0.0
        return summary

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iou_threshold': self.iou_threshold,
            'images': [asdict(r) for r in self.records],
            'aggregate': self.aggregate,
        }

    def write(self, path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_dict(), indent=2) + '\n')
        except OSError as e:
            raise DataIOError(f"Could not write report: {e}", path=path) from e


def evaluate_image(pred: np.ndarray, gt: np.ndarray, iou_threshold: float = 0.5, name: str = '') -> ImageRecord:
    ov = overlaps(pred, gt)
    matching = match_at_threshold(ov.iou, iou_threshold)
    n_pred, n_gt = len(ov.pred_ids), len(ov.gt_ids)
    precision, recall, f1 = prf1(matching, n_pred, n_gt)
    tp = len(matching)
    return ImageRecord(
        name=name, tp=tp, fp=n_pred - tp, fn=n_gt - tp,
        precision=precision, recall=recall, f1=f1,
        sbd=sbd(pred, gt), aji=aji(pred, gt),
    )


def evaluate(pairs: Iterable[Tuple[str, np.ndarray, np.ndarray]], iou_threshold: float = 0.5) -> EvalReport:
    """Evaluate (name, pred, gt) triples."""
    report = EvalReport(iou_threshold=iou_threshold)
    for name, pred, gt in pairs:
        report.records.append(evaluate_image(pred, gt, iou_threshold, name))
    return report


def f1_curve(pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
             thresholds: Sequence[float] = CURVE_THRESHOLDS) -> List[Tuple[float, float]]:
    """Mean per-image F1 at each IoU threshold."""
    all_overlaps = [overlaps(pred, gt) for pred, gt in pairs]
    curve = []
    for t in thresholds:
        scores = [
            prf1(match_at_threshold(ov.iou, t), len(ov.pred_ids), len(ov.gt_ids))[2]
            for ov in all_overlaps
        ]
        curve.append((float(t), float(np.mean(scores)) if scores else 0.0))
    return curve


def write_curve(curve: Sequence[Tuple[float, float]], path) -> None:
    """Plot-ready `iou<TAB>f1` table."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ['iou\tf1'] + [f"{t:.2f}\t{f1:.6f}" for t, f1 in curve]
        path.write_text('\n'.join(lines) + '\n')
    except OSError as e:
        raise DataIOError(f"Could not write F1 curve: {e}", path=path) from e
