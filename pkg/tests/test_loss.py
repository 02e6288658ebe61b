import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rdcnet.data import UNDEFINED
from rdcnet.errors import ConfigError, ShapeError
from rdcnet.loss import (
    LossConfig, esj_total, image_loss, instance_ids, instance_prob, margin_from_sigma, sigma_from_margin,
    soft_jaccard, true_centroids,
)
from rdcnet.tensor import Tensor, backward, float64_mode
from tests.helpers import check_gradients


def two_blobs(size=12):
    labels = np.zeros((size, size), dtype=np.uint16)
    labels[1:5, 1:5] = 1
    labels[7:11, 6:10] = 2
    return labels


def perfect_outputs(labels):
    """Probabilities matching the foreground and embeddings collapsed onto each instance centre."""
    fg = (labels != 0) & (labels != UNDEFINED)
    probs = np.stack([~fg, fg]).astype(np.float64)
    rows, cols = np.mgrid[0:labels.shape[0], 0:labels.shape[1]].astype(np.float64)
    emb = np.stack([rows, cols])
    for k in instance_ids(labels):
        mask = labels == k
        emb[0][mask] = rows[mask].mean()
        emb[1][mask] = cols[mask].mean()
    return Tensor(probs), Tensor(emb)


class TestMargin:
    def test_half_probability_at_margin(self):
        sigma = sigma_from_margin(10.0)
        assert math.exp(-100.0 / (2 * sigma ** 2)) == pytest.approx(0.5)

    def test_inverse(self):
        assert margin_from_sigma(sigma_from_margin(6.0)) == pytest.approx(6.0)

    @pytest.mark.parametrize('margin', [0.0, -1.0])
    def test_non_positive(self, margin):
        with pytest.raises(ConfigError, match='loss.margin'):
            sigma_from_margin(margin)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig().validate()
        assert cfg.margin == 10.0
        assert not cfg.supervise_all_iterations

    def test_negative_weight(self):
        with pytest.raises(ConfigError, match='loss.instance_weight'):
            LossConfig(instance_weight=-1.0).validate()


class TestCentroids:
    def test_mean_under_mask(self):
        labels = two_blobs()
        _, emb = perfect_outputs(np.zeros_like(labels))
        centroids = true_centroids(emb, labels)
        np.testing.assert_allclose(centroids[1].data, [2.5, 2.5])
        np.testing.assert_allclose(centroids[2].data, [8.5, 7.5])

    def test_undefined_is_not_an_instance(self):
        labels = two_blobs()
        labels[0, 0] = UNDEFINED
        assert instance_ids(labels) == [1, 2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            true_centroids(Tensor(np.zeros((2, 4, 4))), np.zeros((5, 5), dtype=np.uint16))


class TestInstanceProb:
    def test_one_at_centroid_half_at_margin(self):
        rows, cols = np.mgrid[0:5, 0:5].astype(np.float64)
        prob = instance_prob(Tensor(np.stack([rows, cols])), Tensor([2.0, 2.0]), sigma_from_margin(2.0)).data
        assert prob[2, 2] == pytest.approx(1.0)
        assert prob[0, 2] == pytest.approx(0.5, rel=1e-5)
        assert prob[4, 4] < 0.5


class TestSoftJaccard:
    def test_perfect_prediction(self):
        target = np.array([[1, 0], [1, 1]], dtype=bool)
        loss = soft_jaccard(Tensor(target.astype(float)), target, np.ones_like(target))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_empty_prediction(self):
        target = np.ones((3, 3), dtype=bool)
        loss = soft_jaccard(Tensor(np.zeros((3, 3))), target, np.ones_like(target))
        assert loss.item() == pytest.approx(1.0, abs=1e-6)

    def test_closed_form(self):
        pred = Tensor([[0.5, 0.5], [0.0, 1.0]])
        target = np.array([[1, 0], [0, 1]], dtype=bool)
        # intersection 1.5, union 2.0 + 2 - 1.5
        loss = soft_jaccard(pred, target, np.ones_like(target), epsilon=0.0)
        assert loss.item() == pytest.approx(1 - 1.5 / 2.5, rel=1e-6)

    def test_masked_pixels_ignored(self):
        target = np.array([[1, 0, 0]], dtype=bool)
        mask = np.array([[1, 1, 0]], dtype=bool)
        a = soft_jaccard(Tensor([[0.9, 0.1, 0.0]]), target, mask)
        b = soft_jaccard(Tensor([[0.9, 0.1, 1.0]]), target, mask)
        assert a.item() == b.item()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            soft_jaccard(Tensor(np.zeros((2, 2))), np.zeros((2, 3), dtype=bool), np.ones((2, 2), dtype=bool))


class TestImageLoss:
    def test_perfect_outputs_score_near_zero(self):
        labels = two_blobs()
        probs, emb = perfect_outputs(labels)
        semantic, instance = image_loss(probs, emb, labels, LossConfig(margin=2.0))
        assert semantic.item() == pytest.approx(0.0, abs=1e-5)
        assert instance.item() < 1e-3

    def test_no_instances(self):
        labels = np.zeros((6, 6), dtype=np.uint16)
        probs, emb = perfect_outputs(labels)
        semantic, instance = image_loss(probs, emb, labels, LossConfig())
        assert instance.item() == 0.0
        assert semantic.item() == pytest.approx(0.0, abs=1e-5)

    def test_undefined_pixels_do_not_contribute(self):
        labels = two_blobs()
        labels[5:7, :] = UNDEFINED
        probs, emb = perfect_outputs(labels)
        scrambled = emb.data.copy()
        scrambled[:, 5:7, :] = 100.0
        noisy_probs = probs.data.copy()
        noisy_probs[:, 5:7, :] = 0.5
        cfg = LossConfig(margin=3.0)
        a = image_loss(probs, emb, labels, cfg)
        b = image_loss(Tensor(noisy_probs), Tensor(scrambled), labels, cfg)
        assert a[0].item() == pytest.approx(b[0].item())
        assert a[1].item() == pytest.approx(b[1].item())

    def test_merged_embeddings_cost_more(self):
        labels = two_blobs()
        probs, emb = perfect_outputs(labels)
        merged = np.full_like(emb.data, 5.0)
        cfg = LossConfig(margin=3.0)
        assert image_loss(probs, Tensor(merged), labels, cfg)[1].item() > image_loss(probs, emb, labels, cfg)[1].item()


class TestEsjTotal:
    def test_final_iteration_only_by_default(self):
        labels = two_blobs()
        good = perfect_outputs(labels)
        bad = (good[0], Tensor(np.zeros_like(good[1].data)))
        cfg = LossConfig(margin=3.0)
        outputs = [(p.reshape(1, *p.shape), e.reshape(1, *e.shape)) for p, e in (bad, good)]
        assert esj_total(outputs, labels, cfg).item() == pytest.approx(esj_total(outputs[1:], labels, cfg).item())

    def test_all_iterations_averaged(self):
        labels = two_blobs()
        good = perfect_outputs(labels)
        bad = (good[0], Tensor(np.zeros_like(good[1].data)))
        outputs = [(p.reshape(1, *p.shape), e.reshape(1, *e.shape)) for p, e in (bad, good)]
        cfg = LossConfig(margin=3.0, supervise_all_iterations=True)
        single = LossConfig(margin=3.0)
        expected = (esj_total(outputs[:1], labels, single).item() + esj_total(outputs[1:], labels, single).item()) / 2
        assert esj_total(outputs, labels, cfg).item() == pytest.approx(expected, rel=1e-5)

    def test_weights(self):
        labels = two_blobs()
        probs, emb = perfect_outputs(labels)
        bad_emb = Tensor(np.zeros((1, 2, 12, 12)))
        outputs = [(probs.reshape(1, 2, 12, 12), bad_emb)]
        semantic_only = esj_total(outputs, labels, LossConfig(margin=3.0, instance_weight=0.0))
        assert semantic_only.item() == pytest.approx(0.0, abs=1e-5)

    def test_batch_shape_mismatch(self):
        labels = np.zeros((2, 4, 4), dtype=np.uint16)
        outputs = [(Tensor(np.full((1, 2, 4, 4), 0.5)), Tensor(np.zeros((1, 2, 4, 4))))]
        with pytest.raises(ShapeError):
            esj_total(outputs, labels, LossConfig())

    def test_no_outputs(self):
        with pytest.raises(ShapeError):
            esj_total([], np.zeros((4, 4), dtype=np.uint16), LossConfig())

    def test_detached_centroids_keep_the_value(self):
        labels = two_blobs()
        probs, emb = perfect_outputs(labels)
        noisy = Tensor(emb.data + np.random.default_rng(1).standard_normal(emb.shape))
        a = image_loss(probs, noisy, labels, LossConfig(margin=3.0))[1]
        b = image_loss(probs, noisy, labels, LossConfig(margin=3.0, detach_centroids=True))[1]
        assert a.item() == pytest.approx(b.item())

    def test_gradients(self):
        labels = two_blobs(8)
        labels[3, 0] = UNDEFINED
        rng = np.random.default_rng(0)
        with float64_mode():
            logits = Tensor(rng.standard_normal((1, 2, 8, 8)), track_grad=True)
            rows, cols = np.mgrid[0:8, 0:8]
            emb = Tensor(np.stack([rows, cols])[None] + rng.standard_normal((1, 2, 8, 8)), track_grad=True)
            cfg = LossConfig(margin=2.0)

            def loss():
                e = logits.exp()
                probs = e / e.sum(axis=1, keepdims=True)
                return esj_total([(probs, emb)], labels, cfg)

            assert check_gradients(loss, [logits, emb]) < 1e-4


class TestLossProperties:
    def test_all_undefined_image_costs_nothing(self):
        labels = np.full((6, 6), UNDEFINED, dtype=np.uint16)
        rng = np.random.default_rng(2)
        outputs = [(Tensor(rng.random((1, 2, 6, 6))), Tensor(rng.standard_normal((1, 2, 6, 6))))]
        assert esj_total(outputs, labels, LossConfig()).item() == 0.0

    def test_translating_embeddings_keeps_the_loss(self):
        labels = two_blobs()
        with float64_mode():
            probs, emb = perfect_outputs(labels)
            noisy = emb.data + np.random.default_rng(3).standard_normal(emb.shape)
            shifted = noisy + np.array([7.0, -4.0])[:, None, None]
            cfg = LossConfig(margin=3.0)
            a = esj_total([(probs.reshape(1, 2, 12, 12), Tensor(noisy[None]))], labels, cfg).item()
            b = esj_total([(probs.reshape(1, 2, 12, 12), Tensor(shifted[None]))], labels, cfg).item()
        assert a == pytest.approx(b, rel=1e-9)

    def test_moving_a_pixel_away_never_helps(self):
        labels = np.zeros((8, 8), dtype=np.uint16)
        labels[1:6, 1:6] = 1
        foreground = labels != 0
        with float64_mode():
            _, emb = perfect_outputs(labels)
            centroid = true_centroids(emb, labels, detach=True)[1]
            sigma = sigma_from_margin(2.0)
            values = []
            for distance in np.linspace(0.0, 8.0, 17):
                moved = emb.data.copy()
                moved[:, 1, 1] -= distance / np.sqrt(2.0)
                prob = instance_prob(Tensor(moved), centroid, sigma)
                values.append(soft_jaccard(prob, labels == 1, foreground).item())
        assert all(later >= earlier for earlier, later in zip(values, values[1:]))
        assert values[-1] > values[0]

    def test_masked_pixels_get_zero_gradient(self):
        labels = two_blobs(8)
        labels[0, :] = UNDEFINED
        labels[2, 2] = UNDEFINED
        rng = np.random.default_rng(4)
        with float64_mode():
            probs = Tensor(rng.uniform(0.1, 0.9, (1, 2, 8, 8)), track_grad=True)
            rows, cols = np.mgrid[0:8, 0:8]
            emb = Tensor(np.stack([rows, cols])[None] + rng.standard_normal((1, 2, 8, 8)), track_grad=True)
            backward(esj_total([(probs, emb)], labels, LossConfig(margin=2.0)))
        undefined = labels == UNDEFINED
        background = labels == 0
        assert np.all(probs.grad[0][:, undefined] == 0.0)
        assert np.all(emb.grad[0][:, undefined] == 0.0)
        assert np.all(emb.grad[0][:, background] == 0.0)
        assert np.any(emb.grad[0][:, labels == 1] != 0.0)
