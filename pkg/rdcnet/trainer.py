"""
Trainer
Mini-batch training with Adam and a cosine learning-rate schedule, per-epoch
validation, checkpointing and exact resume.

Every random draw comes from a generator keyed by the run seed and the
position in training (epoch, sample index or step), so an interrupted run
resumed from its last checkpoint continues with the same losses as an
uninterrupted one.
"""

import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from rdcnet.augment import pipeline
from rdcnet.checkpoint import from_params, load_checkpoint, restore_params, save_checkpoint
from rdcnet.data import DatasetManifest, Sample, load_split, pad_to_multiple, random_crop
from rdcnet.decoder import DecoderConfig, decode, window_candidates
from rdcnet.errors import DataIOError, MissingInputError, NumericError
from rdcnet.loss import esj_total
from rdcnet.metrics import evaluate_image
from rdcnet.model import ModelParams, build, infer, iterate
from rdcnet.optim import adam_step, cosine_lr
from rdcnet.settings import RunConfig
from rdcnet.tensor import Tensor, backward, make_rng

logger = logging.getLogger(__name__)

# generator stream ids
STREAM_INIT = 0
STREAM_ORDER = 1
STREAM_AUGMENT = 2
STREAM_DROPOUT = 3

METRICS_HEADER = 'epoch\tloss\tval_f1'
LR_HEADER = 'step\tlr'
WINDOW_HEADER = 'window\tval_f1'


# ============== Prediction ==============

def predict_labels(params: ModelParams, image: np.ndarray, decoder_cfg: DecoderConfig,
                   iterations: Optional[int] = None) -> np.ndarray:
    """
    Instance labels for one [C, H, W] image.

    Images whose extent is not a multiple of the model scale are zero-padded
    at the bottom/right and the result cropped back to H x W.
    """
    _, height, width = image.shape
    image = pad_to_multiple(image, params.config.scale)
    semantic_probs, embeddings = infer(Tensor(image[None]), params, params.config, iterations=iterations)
    labels = decode(semantic_probs.data[0], embeddings.data[0], decoder_cfg)
    return labels[:height, :width]


def validation_f1(params: ModelParams, samples: Sequence[Sample], decoder_cfg: DecoderConfig,
                  iou_threshold: float = 0.5) -> float:
    """Mean per-image F1 at the IoU threshold."""
    if not samples:
        return 0.0
    scores = [
        evaluate_image(predict_labels(params, s.image, decoder_cfg), s.labels, iou_threshold).f1
        for s in samples
    ]
    return float(np.mean(scores))


def tune_window(params: ModelParams, samples: Sequence[Sample], decoder_cfg: DecoderConfig,
                candidates: Optional[Sequence[int]] = None) -> Tuple[int, Dict[int, float]]:
    """
    Voting window with the best validation F1.

    Args:
        params: trained model
        samples: validation samples
        decoder_cfg: resolved decoder config; its window is the centre of the default search
        candidates: odd windows to score, in preference order for ties

    Returns:
        (best window, {window: val F1}) with scores in candidate order
    """
    if candidates is None:
        candidates = window_candidates(decoder_cfg.window)
    scores: Dict[int, float] = {}
    for window in candidates:
        cfg = replace(decoder_cfg, window=window).validate()
        scores[window] = validation_f1(params, samples, cfg)
        logger.debug(f"Window {window}: val F1 {scores[window]:.4f}")
    best = max(scores, key=lambda w: scores[w])
    return best, scores


# ============== Batching ==============

def make_batch(samples: Sequence[Sample], indices: Sequence[int], run: RunConfig, epoch: int):
    """Crop and augment the chosen samples; returns ([N, C, P, P] images, [N, P, P] labels)."""
    images, labels = [], []
    for i in indices:
        rng = make_rng(run.trainer.seed, STREAM_AUGMENT, epoch, int(i))
        sample = random_crop(samples[i], run.patch_size, rng)
        sample = pipeline(sample, run.augment, rng)
        images.append(sample.image)
        labels.append(sample.labels)
    return np.stack(images), np.stack(labels)


def train_step(params: ModelParams, images: np.ndarray, labels: np.ndarray, run: RunConfig,
               step: int, lr: float) -> float:
    """Forward, loss, backward and one Adam update; returns the loss value."""
    outputs = list(iterate(
        Tensor(images), params, params.config, training=True,
        rng=make_rng(run.trainer.seed, STREAM_DROPOUT, step),
        heads_every_iteration=run.loss.supervise_all_iterations,
    ))
    loss = esj_total(outputs, labels, run.loss)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}", step=step)
    backward(loss)
    for name, tensor in params.items():
        if not np.all(np.isfinite(tensor.grad)):
            raise NumericError(f"non-finite gradient for {name}", step=step)
    adam_step(params, lr)
    return value


# ============== Logs ==============

def _read_rows(path: Path, header: str, keep) -> List[str]:
    """Existing rows of a log file that satisfy `keep(first_column)`."""
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    return [line for line in lines[1:] if line and line != header and keep(int(line.split('\t')[0]))]


def _write_rows(path: Path, header: str, rows: List[str]) -> None:
    try:
        path.write_text('\n'.join([header] + rows) + '\n')
    except OSError as e:
        raise DataIOError(f"Could not write log: {e}", path=path) from e


# ============== Training ==============

def train(run: RunConfig, manifest: DatasetManifest, out_dir=None, resume=None,
          until_epoch: Optional[int] = None) -> Dict[str, Any]:
    """
    Train on the manifest's train split, validating on its val split.

    Args:
        run: validated run config
        manifest: dataset with train and val entries
        out_dir: where checkpoints and logs go (defaults to trainer.checkpoint_dir)
        resume: checkpoint to continue from
        until_epoch: stop once this many epochs are done; the learning-rate
            schedule still spans trainer.epochs

    Returns:
        Summary dict with per-epoch losses, val F1, per-step lr and the best score
    """
    out_dir = Path(out_dir or run.trainer.checkpoint_dir)
    trainer = run.trainer
    decoder_cfg = run.resolved_decoder()

    train_samples = load_split(manifest, 'train')
    val_samples = load_split(manifest, 'val')
    if not train_samples:
        raise MissingInputError("manifest has no 'train' entries")
    if not val_samples:
        raise MissingInputError("manifest has no 'val' entries")

    steps_per_epoch = math.ceil(len(train_samples) / trainer.batch_size)
    total_steps = trainer.epochs * steps_per_epoch
    schedule_end = max(total_steps - 1, 1)

    if resume is not None:
        checkpoint = load_checkpoint(resume)
        params = restore_params(checkpoint, run.model)
        best = checkpoint.best_score
        start_epoch = checkpoint.step // steps_per_epoch
    else:
        params = build(run.model, make_rng(trainer.seed, STREAM_INIT))
        best = -1.0
        start_epoch = 0
    step = start_epoch * steps_per_epoch
    params.step_count = step
    stop_epoch = trainer.epochs if until_epoch is None else min(until_epoch, trainer.epochs)

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"Could not create output directory: {e}", path=out_dir) from e
    metrics_path = out_dir / 'metrics.tsv'
    lr_path = out_dir / 'lr.tsv'
    metric_rows = _read_rows(metrics_path, METRICS_HEADER, lambda epoch: epoch <= start_epoch)
    lr_rows = _read_rows(lr_path, LR_HEADER, lambda s: s < step)

    logger.info("=" * 50)
    logger.info(f"Training {params.count()} parameters on {len(train_samples)} images "
                f"({len(val_samples)} val), epochs {start_epoch + 1}..{stop_epoch} of {trainer.epochs}")
    logger.info("=" * 50)

    history: Dict[str, Any] = {'loss': [], 'val_f1': [], 'lr': []}
    for epoch in range(start_epoch, stop_epoch):
        order = make_rng(trainer.seed, STREAM_ORDER, epoch).permutation(len(train_samples))
        losses = []
        for b in range(steps_per_epoch):
            indices = order[b * trainer.batch_size:(b + 1) * trainer.batch_size]
            images, labels = make_batch(train_samples, indices, run, epoch)
            lr = cosine_lr(min(step, schedule_end), schedule_end, trainer.lr_max, trainer.lr_min)
            losses.append(train_step(params, images, labels, run, step, lr))
            lr_rows.append(f"{step}\t{lr:.8e}")
            history['lr'].append(lr)
            step += 1

        epoch_loss = float(np.mean(losses))
        val_f1 = validation_f1(params, val_samples, decoder_cfg)
        history['loss'].append(epoch_loss)
        history['val_f1'].append(val_f1)
        metric_rows.append(f"{epoch + 1}\t{epoch_loss:.6f}\t{val_f1:.6f}")
        _write_rows(metrics_path, METRICS_HEADER, metric_rows)
        _write_rows(lr_path, LR_HEADER, lr_rows)

        if val_f1 > best:
            best = val_f1
            save_checkpoint(out_dir / 'best.ckpt', from_params(params, step=step, best_score=best))
        save_checkpoint(out_dir / 'last.ckpt', from_params(params, step=step, best_score=best))
        logger.info(f"Epoch {epoch + 1}/{trainer.epochs}: loss {epoch_loss:.4f}, val F1 {val_f1:.3f}, "
                    f"lr {history['lr'][-1]:.2e}")

    if trainer.tune_window and stop_epoch == trainer.epochs:
        best_path = out_dir / 'best.ckpt'
        tuned_params = restore_params(load_checkpoint(best_path), run.model) if best_path.exists() else params
        window, scores = tune_window(tuned_params, val_samples, decoder_cfg,
                                     window_candidates(decoder_cfg.window, trainer.window_spread))
        _write_rows(out_dir / 'window.tsv', WINDOW_HEADER, [f"{w}\t{f1:.6f}" for w, f1 in scores.items()])
        history['window'] = window
        history['window_scores'] = scores
        logger.info(f"Tuned voting window: {window} (val F1 {scores[window]:.3f}, default {decoder_cfg.window})")

    logger.info("=" * 50)
    logger.info(f"Training complete: {step} steps, best val F1 {best:.3f}")
    logger.info("=" * 50)

    history.update({
        'steps': step,
        'best_val_f1': best,
        'last_checkpoint': str(out_dir / 'last.ckpt'),
        'best_checkpoint': str(out_dir / 'best.ckpt'),
    })
    return history
