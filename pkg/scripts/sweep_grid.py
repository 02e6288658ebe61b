"""
Dilation / Iteration Sweep
Retrains one model per (dilation set, iteration count) point and records
test F1 at IoU 0.5, so the effect of receptive field and refinement depth
can be plotted. Each point is trained from scratch; nothing is shared
between runs.

Usage:
    python scripts/sweep_grid.py --config acceptance.toml --manifest data/manifest.tsv --out sweep/
"""

import copy
import logging
import sys
from pathlib import Path

import click

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import Config
from rdcnet.checkpoint import load_checkpoint, restore_params
from rdcnet.data import DatasetManifest, load_split
from rdcnet.errors import RDCNetError
from rdcnet.metrics import evaluate
from rdcnet.settings import load_run_config
from rdcnet.trainer import predict_labels, train

logger = logging.getLogger(__name__)

DILATION_SETS = ([1], [1, 2], [1, 2, 4], [1, 2, 4, 8])
ITERATIONS = (1, 2, 3, 5, 8)


@click.command()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option('--manifest', 'manifest_path', type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option('--iterations', 'iteration_list', multiple=True, type=int, help='Override the iteration grid.')
def main(config_path, manifest_path, out_dir, iteration_list):
    logging.basicConfig(level=Config.LOG_LEVEL, format=Config.LOG_FORMAT)
    try:
        base = load_run_config(config_path)
        manifest = DatasetManifest.read(manifest_path, seed=base.trainer.seed)
        test_samples = load_split(manifest, 'test')
        out_dir.mkdir(parents=True, exist_ok=True)

        rows = ['dilations\titerations\ttest_f1']
        for rates in DILATION_SETS:
            for iterations in iteration_list or ITERATIONS:
                run = copy.deepcopy(base)
                run.model.dilation_rates = list(rates)
                run.model.iterations = iterations
                run.validate()
                tag = f"d{'-'.join(map(str, rates))}_i{iterations}"
                logger.info(f"Sweep point {tag}")
                history = train(run, manifest, out_dir=out_dir / tag)

                params = restore_params(load_checkpoint(history['best_checkpoint']))
                decoder_cfg = run.resolved_decoder()
                report = evaluate(
                    (str(i), predict_labels(params, s.image, decoder_cfg), s.labels)
                    for i, s in enumerate(test_samples)
                )
                rows.append(f"{','.join(map(str, rates))}\t{iterations}\t{report.aggregate['f1']:.6f}")
                (out_dir / 'sweep.tsv').write_text('\n'.join(rows) + '\n')
    except RDCNetError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(e.exit_code)
    click.echo(f"Wrote {len(rows) - 1} sweep points to {out_dir / 'sweep.tsv'}")


if __name__ == '__main__':
    main()
