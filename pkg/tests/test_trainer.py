import os
import sys
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rdcnet.data import DatasetManifest, ManifestEntry, generate_synthetic, load_split, save_sample
from rdcnet.errors import ConfigError, MissingInputError, NumericError
from rdcnet.model import build
from rdcnet.settings import RunConfig
from rdcnet.tensor import Tensor, make_rng
from rdcnet.trainer import (
    LR_HEADER, METRICS_HEADER, WINDOW_HEADER, make_batch, predict_labels, train, tune_window, validation_f1,
)


def tiny_run(**trainer):
    values = {
        'model': {'groups': 2, 'group_channels': 4, 'dilation_rates': [1, 2], 'iterations': 2, 'scale': 2,
                  'stem_channels': 8},
        'loss': {'margin': 3.0},
        'augment': {'warp': {'amplitude': 2.0}},
        'trainer': {'epochs': 2, 'batch_size': 2, 'seed': 3, **trainer},
        'data': {'image_size': 16, 'min_instances': 1, 'max_instances': 2, 'radius_min': 2.0,
                 'radius_max': 3.0},
    }
    return RunConfig.from_dict(values).validate()


def write_manifest(root, splits=('train', 'train', 'train', 'val')):
    samples = generate_synthetic(len(splits), 16, 1, 2, (2.0, 3.0), 0.1, 0.02, make_rng(11))
    entries = []
    for i, (split, sample) in enumerate(zip(splits, samples)):
        image, label = root / 'images' / f'{split}_{i}.png', root / 'labels' / f'{split}_{i}.png'
        save_sample(sample, image, label)
        entries.append(ManifestEntry(split, image, label))
    manifest = DatasetManifest(entries)
    manifest.write(root / 'manifest.tsv')
    return DatasetManifest.read(root / 'manifest.tsv')


@pytest.fixture
def manifest(tmp_path):
    return write_manifest(tmp_path / 'data')


class TestTrain:
    def test_smoke(self, manifest, tmp_path):
        out = tmp_path / 'run'
        history = train(tiny_run(), manifest, out)
        assert len(history['loss']) == 2
        assert all(np.isfinite(history['loss']))
        assert history['steps'] == 4
        assert (out / 'last.ckpt').exists()
        assert (out / 'best.ckpt').exists()
        metrics = (out / 'metrics.tsv').read_text().splitlines()
        assert metrics[0] == METRICS_HEADER
        assert [line.split('\t')[0] for line in metrics[1:]] == ['1', '2']

    def test_lr_schedule_endpoints(self, manifest, tmp_path):
        history = train(tiny_run(), manifest, tmp_path / 'run')
        assert history['lr'][0] == pytest.approx(1e-3)
        assert history['lr'][-1] == pytest.approx(1e-5)
        assert all(a >= b for a, b in zip(history['lr'], history['lr'][1:]))
        rows = (tmp_path / 'run' / 'lr.tsv').read_text().splitlines()
        assert rows[0] == LR_HEADER
        assert [int(r.split('\t')[0]) for r in rows[1:]] == [0, 1, 2, 3]

    def test_resume_reproduces_uninterrupted_run(self, manifest, tmp_path):
        run = tiny_run()
        full, split = tmp_path / 'full', tmp_path / 'split'
        train(run, manifest, full)
        train(run, manifest, split, until_epoch=1)
        assert len((split / 'metrics.tsv').read_text().splitlines()) == 2
        train(run, manifest, split, resume=split / 'last.ckpt')
        for name in ('metrics.tsv', 'lr.tsv', 'last.ckpt'):
            assert (full / name).read_bytes() == (split / name).read_bytes(), name

    def test_non_finite_loss(self, manifest, tmp_path):
        with patch('rdcnet.trainer.esj_total', return_value=Tensor(np.nan)):
            with pytest.raises(NumericError, match='step 0'):
                train(tiny_run(), manifest, tmp_path / 'run')

    def test_missing_val_split(self, tmp_path):
        manifest = write_manifest(tmp_path / 'data', splits=('train', 'train'))
        with pytest.raises(MissingInputError, match='val'):
            train(tiny_run(), manifest, tmp_path / 'run')


class TestBatching:
    def test_batch_is_deterministic(self, manifest):
        samples = load_split(manifest, 'train')
        run = tiny_run(patch_size=8)
        images_a, labels_a = make_batch(samples, [0, 2], run, epoch=1)
        images_b, labels_b = make_batch(samples, [0, 2], run, epoch=1)
        assert images_a.shape == (2, 3, 8, 8)
        assert labels_a.shape == (2, 8, 8)
        assert images_a.tobytes() == images_b.tobytes()
        assert labels_a.tobytes() == labels_b.tobytes()
        images_c, _ = make_batch(samples, [0, 2], run, epoch=2)
        assert images_a.tobytes() != images_c.tobytes()


class TestPredictLabels:
    def test_pads_and_crops(self):
        run = tiny_run()
        params = build(run.model, make_rng(0))
        labels = predict_labels(params, np.random.default_rng(0).random((3, 15, 13)).astype(np.float32),
                                run.resolved_decoder())
        assert labels.shape == (15, 13)

    def test_blank_when_background_dominates(self):
        run = tiny_run()
        params = build(run.model, make_rng(0))
        params['output.weight'].data[...] = 0.0
        params['output.bias'].data[...] = [5.0, -5.0, 0.0, 0.0]
        labels = predict_labels(params, np.zeros((3, 16, 16), dtype=np.float32), run.resolved_decoder())
        assert not labels.any()


class TestTuneWindow:
    def test_picks_highest_scoring_window(self):
        run = tiny_run()
        scores = {7: 0.4, 5: 0.55, 9: 0.7, 3: 0.1, 11: 0.65}
        with patch('rdcnet.trainer.validation_f1', side_effect=lambda params, samples, cfg: scores[cfg.window]):
            window, found = tune_window(None, [], run.resolved_decoder())
        assert window == 9
        assert list(found) == [7, 5, 9, 3, 11]

    def test_ties_prefer_the_earlier_candidate(self):
        run = tiny_run()
        with patch('rdcnet.trainer.validation_f1', return_value=0.5):
            window, _ = tune_window(None, [], run.resolved_decoder(), candidates=[5, 3, 7])
        assert window == 5

    def test_even_candidate(self):
        with pytest.raises(ConfigError, match='decoder.window'):
            tune_window(None, [], tiny_run().resolved_decoder(), candidates=[4])

    def test_chosen_window_maximises_val_f1(self, manifest):
        run = tiny_run()
        params = build(run.model, make_rng(0))
        samples = load_split(manifest, 'val') + load_split(manifest, 'train')
        decoder_cfg = run.resolved_decoder()
        window, scores = tune_window(params, samples, decoder_cfg, candidates=[1, 3, 7, 15])
        expected = {w: validation_f1(params, samples, replace(decoder_cfg, window=w)) for w in (1, 3, 7, 15)}
        assert scores == pytest.approx(expected)
        assert scores[window] == max(expected.values())


class TestTrainTunesWindow:
    def test_records_window_after_training(self, manifest, tmp_path):
        out = tmp_path / 'run'
        history = train(tiny_run(), manifest, out)
        assert history['window'] in (7, 5, 9, 3, 11)
        assert history['window_scores'][history['window']] == max(history['window_scores'].values())
        rows = (out / 'window.tsv').read_text().splitlines()
        assert rows[0] == WINDOW_HEADER
        assert [int(r.split('\t')[0]) for r in rows[1:]] == [7, 5, 9, 3, 11]

    def test_skipped_when_disabled(self, manifest, tmp_path):
        history = train(tiny_run(tune_window=False), manifest, tmp_path / 'run')
        assert 'window' not in history
        assert not (tmp_path / 'run' / 'window.tsv').exists()

    def test_skipped_for_partial_runs(self, manifest, tmp_path):
        history = train(tiny_run(), manifest, tmp_path / 'run', until_epoch=1)
        assert 'window' not in history
