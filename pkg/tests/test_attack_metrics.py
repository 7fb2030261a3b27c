import math

import numpy as np
import pytest
import torch

from exceptions import EvaluatorRefusedError, ParameterError, ShapeMismatchError
from Comparison.attack_metrics import (
    AttackMetricsCalculator,
    MetricsReport,
    attack_accuracy,
    attribute_accuracy,
    class_centroid,
    feature_distance,
    half_brightness_detector,
    knn_distance,
    nearest_feature_distance,
    psnr,
    top_k_hits,
)
from Ingestion.dataset_loader import ImageSample
from Models.classifiers import build_classifier

SHAPE = (1, 1, 2)


def flat_evaluator(num_classes=5, biases=None):
    """softmax_net: features are the raw pixels; biases alone set the ranking."""
    model = build_classifier('softmax_net', num_classes=num_classes, input_shape=SHAPE)
    with torch.no_grad():
        model.net.classifier.weight.zero_()
        if biases is not None:
            model.net.classifier.bias.copy_(torch.tensor(biases, dtype=torch.float32))
    return model


def pixel(a, b, label=0):
    return ImageSample(np.array([[[a, b]]], dtype=np.float32), label)


# PSNR

def test_psnr_reference_values():
    zeros, ones = np.zeros((1, 4, 4)), np.ones((1, 4, 4))
    assert math.isinf(psnr(ones, ones))
    assert psnr(zeros, ones) == pytest.approx(0.0)
    assert psnr(zeros, np.full((1, 4, 4), 0.1)) == pytest.approx(20.0)
    assert psnr(zeros, np.full((1, 4, 4), 25.5), max_value=255.0) == pytest.approx(20.0)


def test_psnr_decreases_with_noise():
    base = np.full((1, 8, 8), 0.5)
    signs = np.where(np.random.default_rng(0).random(base.shape) > 0.5, 1.0, -1.0)
    values = [psnr(base, base + a * signs) for a in np.linspace(0.01, 0.4, 10)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_argument_checks():
    with pytest.raises(ShapeMismatchError):
        psnr(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)))
    with pytest.raises(ParameterError):
        psnr(np.zeros(2), np.ones(2), max_value=0.0)


# Attack accuracy

def test_rank_three_label_counts_only_at_k_three_and_above():
    evaluator = flat_evaluator(biases=[3.0, 2.0, 1.0, 0.0, -1.0])
    results = [(np.zeros(SHAPE, dtype=np.float32), 2)]
    assert attack_accuracy(evaluator, results, k=1) == 0.0
    assert attack_accuracy(evaluator, results, k=2) == 0.0
    assert attack_accuracy(evaluator, results, k=3) == 1.0
    assert attack_accuracy(evaluator, results, k=5) == 1.0


def test_top_rank_for_every_result_is_perfect():
    evaluator = flat_evaluator(biases=[0.0, 0.0, 9.0, 0.0, 0.0])
    results = [(np.random.default_rng(i).random(SHAPE), 2) for i in range(4)]
    assert attack_accuracy(evaluator, results, k=1) == 1.0


def test_k_equal_to_class_count_is_always_one():
    evaluator = flat_evaluator(biases=[3.0, 2.0, 1.0, 0.0, -1.0])
    results = [(np.zeros(SHAPE), label) for label in range(5)]
    assert attack_accuracy(evaluator, results, k=5) == 1.0


def test_ties_break_toward_lower_class_index():
    hits = top_k_hits(np.array([[0.5, 0.5]]), [1], 1)
    assert hits.tolist() == [False]
    assert top_k_hits(np.array([[0.5, 0.5]]), [0], 1).tolist() == [True]


def test_evaluator_with_target_digest_is_refused():
    evaluator = flat_evaluator()
    with pytest.raises(EvaluatorRefusedError):
        attack_accuracy(evaluator, [(np.zeros(SHAPE), 0)], target_digest=evaluator.architecture_digest)
    with pytest.raises(EvaluatorRefusedError):
        AttackMetricsCalculator(evaluator, [pixel(0, 0)], target_digest=evaluator.architecture_digest)


def test_attack_accuracy_argument_checks():
    with pytest.raises(ParameterError):
        attack_accuracy(flat_evaluator(), [], k=1)
    with pytest.raises(ParameterError):
        attack_accuracy(flat_evaluator(), [(np.zeros(SHAPE), 0)], k=0)


# Distances

def test_centroid_is_mean_feature():
    evaluator = flat_evaluator()
    samples = [pixel(0.2, 0.4), pixel(0.6, 0.0), pixel(1.0, 1.0, label=1)]
    np.testing.assert_allclose(class_centroid(evaluator, samples, 0), [0.4, 0.2], atol=1e-6)
    np.testing.assert_allclose(class_centroid(evaluator, samples, 1), [1.0, 1.0], atol=1e-6)
    reordered = samples[::-1]
    np.testing.assert_allclose(class_centroid(evaluator, reordered, 0),
                               class_centroid(evaluator, samples, 0), atol=1e-6)
    with pytest.raises(ParameterError):
        class_centroid(evaluator, samples, 3)


def test_feature_distance_to_centroid():
    evaluator = flat_evaluator()
    recon = np.array([[[0.4, 0.2]]], dtype=np.float32)
    assert feature_distance(evaluator, recon, [0.4, 0.2]) == pytest.approx(0.0, abs=1e-6)
    assert feature_distance(evaluator, np.array([[[1.0, 0.0]]]), [0.0, 0.0]) == pytest.approx(1.0)
    with pytest.raises(ShapeMismatchError):
        feature_distance(evaluator, recon, [0.0, 0.0, 0.0])


def test_nearest_neighbor_is_minimum():
    assert nearest_feature_distance([0.0, 0.0], [[3.0, 0.0], [0.0, 5.0]]) == pytest.approx(3.0)
    with pytest.raises(ParameterError):
        nearest_feature_distance([0.0], np.zeros((0, 1)))


def test_knn_distance_of_training_image_is_zero():
    evaluator = flat_evaluator()
    samples = [pixel(0.2, 0.4), pixel(0.6, 0.0)]
    assert knn_distance(evaluator, samples[1].image, samples) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ParameterError):
        knn_distance(evaluator, samples[0].image, [])


def test_knn_obeys_triangle_inequality():
    evaluator = flat_evaluator()
    rng = np.random.default_rng(0)
    samples = [pixel(*rng.random(2)) for _ in range(6)]
    recon = rng.random(SHAPE).astype(np.float32)
    centroid = class_centroid(evaluator, samples, 0)
    feats = np.stack([s.image.ravel() for s in samples]).astype(np.float64)
    nearest = feats[np.argmin(np.linalg.norm(feats - recon.ravel(), axis=1))]
    bound = feature_distance(evaluator, recon, centroid) + np.linalg.norm(centroid - nearest)
    assert knn_distance(evaluator, recon, samples) <= bound + 1e-6


# Attributes

def test_attribute_accuracy():
    images = [np.ones((1, 4, 4)), np.zeros((1, 4, 4))]
    always_one = lambda image: 1
    assert attribute_accuracy(always_one, [(images[0], 1), (images[1], 0)]) == 0.5
    detector = half_brightness_detector('left')
    assert attribute_accuracy(detector, [(images[0], 1), (images[1], 0)]) == 1.0
    with pytest.raises(ParameterError):
        attribute_accuracy(always_one, [(images[0], 2)])
    with pytest.raises(ParameterError):
        half_brightness_detector('middle')


# Aggregation

def test_calculator_averages_over_labels_first():
    evaluator = flat_evaluator(num_classes=2, biases=[1.0, 0.0])
    private = [pixel(0.0, 0.0, 0), pixel(1.0, 1.0, 1)]
    calculator = AttackMetricsCalculator(evaluator, private, top_k=2)
    results = [
        (np.array([[[0.0, 0.0]]], dtype=np.float32), 0),
        (np.array([[[0.0, 1.0]]], dtype=np.float32), 0),
        (np.array([[[1.0, 1.0]]], dtype=np.float32), 1),
    ]
    report = calculator.evaluate(results, ground_truth=[r[0] for r in results])
    # label 0: mean(0, 1) = 0.5; label 1: 0
    assert report.feat_dist == pytest.approx(0.25)
    assert report.knn_dist == pytest.approx(0.25)
    assert report.attack_acc_top1 == pytest.approx(2 / 3)
    assert report.attack_acc_topk == 1.0
    assert math.isinf(report.psnr_db)
    assert report.counts == {'images': 3, 'labels': 2}
    assert report.per_label[0]['n'] == 2


def test_calculator_is_order_invariant():
    evaluator = flat_evaluator(num_classes=2)
    rng = np.random.default_rng(3)
    private = [pixel(*rng.random(2), label=i % 2) for i in range(8)]
    results = [(rng.random(SHAPE).astype(np.float32), i % 2) for i in range(6)]
    calculator = AttackMetricsCalculator(evaluator, private)
    a = calculator.evaluate(results)
    b = calculator.evaluate(results[::-1])
    assert a.feat_dist == pytest.approx(b.feat_dist)
    assert a.knn_dist == pytest.approx(b.knn_dist)
    assert a.psnr_db is None


def test_report_row_and_validation():
    report = MetricsReport(psnr_db=float('inf'), attack_acc_top1=0.5, attack_acc_topk=1.0,
                           top_k=2, feat_dist=1.0, knn_dist=0.5)
    row = report.to_csv_row('mnist_cnn_target', 'gmi', 'none')
    assert row['psnr'] == 'inf'
    assert row['attack_acc_top1'] == '0.500000'
    with pytest.raises(ParameterError):
        MetricsReport(psnr_db=None, attack_acc_top1=1.5, attack_acc_topk=1.0, top_k=2,
                      feat_dist=0.0, knn_dist=0.0)
