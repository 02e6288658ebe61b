"""
RDCNet Command Line
`rdcnet generate|train|predict|eval|inspect`, all driven by one TOML run config.

Every command loads and validates the config before touching the
filesystem. Library errors are mapped to exit codes:
0 ok, 2 config, 3 I/O, 4 numeric failure, 5 missing inputs.
"""

import functools
import logging
import sys
from pathlib import Path
from typing import Optional, Tuple

import click

from config import Config
from rdcnet.data import SPLITS, DatasetManifest, ManifestEntry, generate_synthetic, load_image, load_labels, \
    pad_to_multiple, save_labels, save_sample
from rdcnet.errors import DataIOError, MissingInputError, RDCNetError
from rdcnet.settings import RunConfig, load_run_config
from rdcnet.tensor import make_rng

logger = logging.getLogger(__name__)

STREAM_GENERATE = 10

CONFIG_OPTION = click.option('--config', 'config_path', type=click.Path(dir_okay=False, path_type=Path),
                             default=None, help='TOML run config (defaults apply when omitted).')


def handle_errors(command):
    """Turn package errors into a one-line message and the matching exit status."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except RDCNetError as e:
            logger.debug("Command failed", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
    return wrapper


def _with_window(run: RunConfig, window: Optional[int]) -> RunConfig:
    if window is not None:
        run.decoder.window = window
        run.validate()
    return run


@click.group()
def cli():
    """Recurrent dilated convolution network for instance segmentation."""
    logging.basicConfig(level=Config.LOG_LEVEL, format=Config.LOG_FORMAT)


# ============== generate ==============

@cli.command()
@CONFIG_OPTION
@click.option('--out', 'out_dir', type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option('--n-train', type=click.IntRange(min=0), default=200, show_default=True)
@click.option('--n-val', type=click.IntRange(min=0), default=32, show_default=True)
@click.option('--n-test', type=click.IntRange(min=0), default=32, show_default=True)
@handle_errors
def generate(config_path, out_dir, n_train, n_val, n_test):
    """Write a synthetic ellipse dataset and its manifest."""
    run = load_run_config(config_path)
    data = run.data
    counts = dict(zip(SPLITS, (n_train, n_val, n_test)))

    logger.info("=" * 50)
    logger.info(f"Generating {sum(counts.values())} images of {data.image_size}x{data.image_size} into {out_dir}")
    logger.info("=" * 50)

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"Could not create output directory: {e}", path=out_dir) from e

    manifest = DatasetManifest(seed=run.trainer.seed)
    for index, (split, n) in enumerate(counts.items()):
        rng = make_rng(run.trainer.seed, STREAM_GENERATE, index)
        samples = generate_synthetic(n, data.image_size, data.min_instances, data.max_instances,
                                     (data.radius_min, data.radius_max), data.overlap_fraction,
                                     data.noise_level, rng)
        for i, sample in enumerate(samples):
            image_path = out_dir / 'images' / f"{split}_{i:04d}.png"
            label_path = out_dir / 'labels' / f"{split}_{i:04d}.png"
            save_sample(sample, image_path, label_path)
            manifest.entries.append(ManifestEntry(split, image_path.resolve(), label_path.resolve()))
    manifest_path = out_dir / 'manifest.tsv'
    manifest.write(manifest_path.resolve())

    summary = ', '.join(f"{split} {n}" for split, n in counts.items())
    logger.info(f"Generation complete: {summary}")
    click.echo(f"Wrote {len(manifest.entries)} samples ({summary}) to {manifest_path}")


# ============== train ==============

@cli.command()
@CONFIG_OPTION
@click.option('--manifest', 'manifest_path', type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False, path_type=Path), default=None,
              help='Checkpoint and log directory (default: trainer.checkpoint_dir).')
@click.option('--resume', type=click.Path(dir_okay=False, path_type=Path), default=None,
              help='Checkpoint to continue from.')
@handle_errors
def train(config_path, manifest_path, out_dir, resume):
    """Train on the manifest's train split, validating on val."""
    from rdcnet.trainer import train as run_training

    run = load_run_config(config_path)
    manifest = DatasetManifest.read(manifest_path, seed=run.trainer.seed)
    history = run_training(run, manifest, out_dir=out_dir, resume=resume)
    click.echo(f"Trained {history['steps']} steps; best val F1 {history['best_val_f1']:.3f}; "
               f"checkpoint {history['last_checkpoint']}")
    if 'window' in history:
        click.echo(f"Tuned voting window {history['window']} (set [decoder] window or pass --window to predict)")


# ============== predict ==============

def _load_model(checkpoint_path: Path):
    from rdcnet.checkpoint import load_checkpoint, restore_params
    return restore_params(load_checkpoint(checkpoint_path))


@cli.command()
@CONFIG_OPTION
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option('--iterations', type=click.IntRange(min=1), default=None,
              help='Override the iteration count at inference (same weights, no retraining).')
@click.option('--window', type=click.IntRange(min=1), default=None, help='Odd voting window in pixels.')
@click.argument('images', nargs=-1, required=True, type=click.Path(dir_okay=False, path_type=Path))
@handle_errors
def predict(config_path, checkpoint_path, out_dir, iterations, window, images: Tuple[Path, ...]):
    """Segment images into 16-bit label PNGs named after the inputs."""
    from rdcnet.trainer import predict_labels

    run = _with_window(load_run_config(config_path), window)
    decoder_cfg = run.resolved_decoder()
    params = _load_model(checkpoint_path)

    for path in images:
        labels = predict_labels(params, load_image(path), decoder_cfg, iterations=iterations)
        save_labels(out_dir / f"{path.stem}.png", labels)
        logger.info(f"{path.name}: {int(labels.max(initial=0))} instances")
    click.echo(f"Wrote {len(images)} label maps to {out_dir}")


# ============== eval ==============

@cli.command(name='eval')
@CONFIG_OPTION
@click.option('--manifest', 'manifest_path', type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option('--split', type=click.Choice(SPLITS), default='test', show_default=True)
@click.option('--pred-dir', type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option('--iou', type=click.FloatRange(min=0.0, max=1.0, min_open=True), default=0.5, show_default=True)
@click.option('--out', 'report_path', type=click.Path(dir_okay=False, path_type=Path), required=True)
@handle_errors
def evaluate(config_path, manifest_path, split, pred_dir, iou, report_path):
    """Score predictions against a manifest split; writes a JSON report and an F1-vs-IoU table."""
    from rdcnet.metrics import evaluate as run_evaluation, f1_curve, write_curve

    run = load_run_config(config_path)
    manifest = DatasetManifest.read(manifest_path, seed=run.trainer.seed)
    entries = manifest.split(split)
    pairs = []
    for entry in entries:
        pred_path = pred_dir / f"{Path(entry.image_path).stem}.png"
        if not pred_path.exists():
            raise MissingInputError("No prediction for ground-truth image", path=pred_path)
        pairs.append((pred_path.stem, load_labels(pred_path), load_labels(entry.label_path)))

    logger.info("=" * 50)
    logger.info(f"Evaluating {len(pairs)} {split} images at IoU {iou}")
    logger.info("=" * 50)

    report = run_evaluation(pairs, iou)
    report.write(report_path)
    curve_path = report_path.with_name(f"{report_path.stem}_f1_curve.tsv")
    write_curve(f1_curve([(pred, gt) for _, pred, gt in pairs]), curve_path)

    summary = report.aggregate
    logger.info(f"Evaluation complete: F1 {summary['f1']:.3f}, SBD {summary['sbd']:.3f}, AJI {summary['aji']:.3f}")
    click.echo(f"precision {summary['precision']:.4f}  recall {summary['recall']:.4f}  f1 {summary['f1']:.4f}  "
               f"sbd {summary['sbd']:.4f}  aji {summary['aji']:.4f}")


# ============== inspect ==============

@cli.command()
@CONFIG_OPTION
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option('--iterations', type=click.IntRange(min=1), default=None)
@click.option('--window', type=click.IntRange(min=1), default=None)
@click.argument('image', type=click.Path(dir_okay=False, path_type=Path))
@handle_errors
def inspect(config_path, checkpoint_path, out_dir, iterations, window, image: Path):
    """Write foreground, embedding and vote-histogram panels for every iteration."""
    from rdcnet.render import render_iterations

    run = _with_window(load_run_config(config_path), window)
    params = _load_model(checkpoint_path)
    pixels = pad_to_multiple(load_image(image), params.config.scale)
    written = render_iterations(params, pixels, run.resolved_decoder(), out_dir, image.stem, iterations=iterations)
    click.echo(f"Wrote {len(written)} panels to {out_dir}")


def main():
    cli()


if __name__ == '__main__':
    main()
