"""
Attack Metrics Module
Scores reconstructions: PSNR, evaluation-classifier attack accuracy,
feature distance to the class centroid, nearest-neighbor feature distance
and implicit-attribute accuracy.
"""

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import EvaluatorRefusedError, ParameterError, ShapeMismatchError
from Ingestion.dataset_loader import samples_by_label, stack_samples
from Models.classifiers import feature_extract, predict_proba

# Brightness threshold of the rule-based half-image attribute detectors
ATTRIBUTE_BRIGHTNESS_THRESHOLD = 0.5


@dataclass
class MetricsReport:
    """
    Aggregate metrics for one attack.

    Accuracies are fractions over images; feat_dist and knn_dist are
    averaged per label first, then uniformly over labels.
    """
    psnr_db: Optional[float]
    attack_acc_top1: float
    attack_acc_topk: float
    top_k: int
    feat_dist: float
    knn_dist: float
    per_label: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ('attack_acc_top1', 'attack_acc_topk'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {value}")
        for name in ('feat_dist', 'knn_dist'):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")

    def to_dict(self):
        payload = asdict(self)
        payload['psnr_db'] = config.format_metric(self.psnr_db) if self.psnr_db is not None else None
        payload['per_label'] = {str(k): v for k, v in self.per_label.items()}
        return payload

    def to_csv_row(self, model, attack, setting):
        """Row for the results table (config.RESULTS_CSV_FIELDS)."""
        return {
            'model': model,
            'attack': attack,
            'setting': setting,
            'psnr': config.format_metric(self.psnr_db),
            'attack_acc_top1': config.format_metric(self.attack_acc_top1),
            'attack_acc_topk': config.format_metric(self.attack_acc_topk),
            'feat_dist': config.format_metric(self.feat_dist),
            'knn_dist': config.format_metric(self.knn_dist),
        }


def psnr(target, recon, max_value=config.PSNR_MAX_VALUE):
    """
    Peak signal-to-noise ratio in decibels.

    Args:
        target (np.ndarray): Ground-truth image
        recon (np.ndarray): Reconstruction, same shape
        max_value (float): Peak intensity (1.0 for [0, 1] images, 255 for bytes)

    Returns:
        float: 10 * log10(max^2 / MSE), or +inf when MSE = 0
    """
    target = np.asarray(target, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if target.shape != recon.shape:
        raise ShapeMismatchError(f"Shape mismatch: target={target.shape}, recon={recon.shape}")
    if max_value <= 0:
        raise ParameterError(f"max_value must be positive, got {max_value}")

    mse = float(np.mean((target - recon) ** 2))
    if mse == 0.0:
        return config.EPSILON_INFINITY
    return float(10.0 * np.log10(max_value ** 2 / mse))


def check_evaluator(eval_model, target_digest):
    """Refuse to score with a model that has the target's architecture digest."""
    if target_digest is not None and eval_model.architecture_digest == target_digest:
        raise EvaluatorRefusedError(
            "Evaluation classifier must differ from the target network "
            f"(both have digest {target_digest})"
        )


def top_k_hits(probabilities, class_indices, k):
    """
    Whether each true class index is among the k most probable.

    Ties are broken by ascending class index.
    """
    probabilities = np.atleast_2d(probabilities)
    k = min(int(k), probabilities.shape[1])
    ranking = np.argsort(-probabilities, axis=1, kind='stable')[:, :k]
    return np.array([idx in row for idx, row in zip(class_indices, ranking)])


def attack_accuracy(eval_model, results, k=1, target_digest=None):
    """
    Fraction of reconstructions whose target label is in the evaluator's top k.

    Args:
        eval_model (ClassifierModel): Evaluation classifier
        results (list): (image, label) pairs, label in original ids
        k (int): Top-k cutoff (>= 1; values above the class count act as the count)
        target_digest (str): Architecture digest of the attacked model

    Returns:
        float: Accuracy in [0, 1]

    Raises:
        EvaluatorRefusedError: Evaluator digest equals the target's
    """
    check_evaluator(eval_model, target_digest)
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if not results:
        raise ParameterError("No reconstructions to score")

    images = np.stack([np.asarray(image, dtype=np.float32) for image, _ in results])
    indices = [eval_model.class_index(int(label)) for _, label in results]
    hits = top_k_hits(predict_proba(eval_model, images), indices, k)
    return float(hits.mean())


def class_centroid(eval_model, samples, label):
    """
    Mean evaluation-classifier feature of one label's training images.

    Raises:
        ParameterError: If the label has no samples
    """
    images = [s.image for s in samples if s.label == label]
    if not images:
        raise ParameterError(f"Label {label} is absent from the training set")
    return feature_extract(eval_model, np.stack(images)).astype(np.float64).mean(axis=0)


def feature_distance(eval_model, recon, centroid):
    """L2 distance between F_eval(recon) and a centroid."""
    feature = feature_extract(eval_model, recon).astype(np.float64)
    centroid = np.asarray(centroid, dtype=np.float64)
    if feature.shape != centroid.shape:
        raise ShapeMismatchError(f"Feature dim {feature.shape} != centroid dim {centroid.shape}")
    return float(np.linalg.norm(feature - centroid))


def nearest_feature_distance(feature, class_features):
    """Min L2 distance from one feature vector to rows of class_features."""
    class_features = np.asarray(class_features, dtype=np.float64)
    if class_features.size == 0:
        raise ParameterError("Class set is empty")
    feature = np.asarray(feature, dtype=np.float64)
    if class_features.shape[1:] != feature.shape:
        raise ShapeMismatchError(f"Feature dim {feature.shape} != class features {class_features.shape[1:]}")
    return float(np.min(np.linalg.norm(class_features - feature, axis=1)))


def knn_distance(eval_model, recon, class_samples):
    """Shortest feature-space distance from recon to a class's training images."""
    if not class_samples:
        raise ParameterError("Class set is empty")
    images, _ = stack_samples(class_samples)
    return nearest_feature_distance(feature_extract(eval_model, recon),
                                    feature_extract(eval_model, images))


def half_brightness_detector(side='left', threshold=ATTRIBUTE_BRIGHTNESS_THRESHOLD):
    """
    Rule-based attribute detector: 1 when the mean intensity of the given
    half of the image exceeds the threshold.
    """
    if side not in ('left', 'right', 'top', 'bottom'):
        raise ParameterError(f"Unknown side: {side}")

    def detect(image):
        image = np.asarray(image)
        h, w = image.shape[-2:]
        region = {
            'left': image[..., :, :w // 2],
            'right': image[..., :, w - w // 2:],
            'top': image[..., :h // 2, :],
            'bottom': image[..., h - h // 2:, :],
        }[side]
        return int(region.mean() > threshold)

    return detect


def attribute_accuracy(attribute_classifier, results):
    """
    Fraction of reconstructions whose detected binary attribute matches the
    attribute of the original image.

    Args:
        attribute_classifier (callable): image -> 0 or 1
        results (list): (recon image, attribute label in {0, 1}) pairs

    Raises:
        ParameterError: Non-binary labels or empty results
    """
    if not results:
        raise ParameterError("No reconstructions to score")
    labels = [int(label) for _, label in results]
    if any(label not in (0, 1) for label in labels):
        raise ParameterError("Attribute labels must be binary (0 or 1)")

    correct = sum(int(attribute_classifier(image)) == label for (image, _), label in zip(results, labels))
    return correct / len(results)


class AttackMetricsCalculator:
    """
    Scores batches of attack results against the private training set.
    """

    def __init__(self, eval_model, private_train, target_digest=None, top_k=config.TOP_K,
                 max_value=config.PSNR_MAX_VALUE):
        """
        Args:
            eval_model (ClassifierModel): Evaluation classifier
            private_train (list): Private training ImageSamples (centroids, KNN)
            target_digest (str): Attacked model's architecture digest
            top_k (int): k for the top-k accuracy column
            max_value (float): PSNR peak value
        """
        check_evaluator(eval_model, target_digest)
        self.eval_model = eval_model
        self.target_digest = target_digest
        self.top_k = top_k
        self.max_value = max_value
        self._by_label = samples_by_label(private_train)
        self._features = {}

    def class_features(self, label):
        """Evaluation features of one label's training images (cached)."""
        if label not in self._features:
            samples = self._by_label.get(label)
            if not samples:
                raise ParameterError(f"Label {label} is absent from the training set")
            images, _ = stack_samples(samples)
            self._features[label] = feature_extract(self.eval_model, images).astype(np.float64)
        return self._features[label]

    def centroid(self, label):
        return self.class_features(label).mean(axis=0)

    def evaluate(self, results, ground_truth=None):
        """
        Aggregate metrics for one attack.

        Args:
            results (list): AttackResult objects or (image, label) pairs
            ground_truth (list): Optional original images aligned with results (PSNR)

        Returns:
            MetricsReport
        """
        pairs = [(r.image, r.label) if hasattr(r, 'image') else (r[0], r[1]) for r in results]
        if not pairs:
            raise ParameterError("No reconstructions to score")
        if ground_truth is not None and len(ground_truth) != len(pairs):
            raise ShapeMismatchError(f"{len(ground_truth)} ground-truth images for {len(pairs)} results")

        images = np.stack([np.asarray(image, dtype=np.float32) for image, _ in pairs])
        labels = [int(label) for _, label in pairs]
        probs = predict_proba(self.eval_model, images)
        indices = [self.eval_model.class_index(label) for label in labels]
        top1 = top_k_hits(probs, indices, 1)
        topk = top_k_hits(probs, indices, self.top_k)
        feats = feature_extract(self.eval_model, images).astype(np.float64)

        psnrs = None
        if ground_truth is not None:
            psnrs = [psnr(gt, image, self.max_value) for gt, (image, _) in zip(ground_truth, pairs)]

        per_label = {}
        for label in sorted(set(labels)):
            rows = [i for i, l in enumerate(labels) if l == label]
            class_feats = self.class_features(label)
            centroid = class_feats.mean(axis=0)
            entry = {
                'n': len(rows),
                'top1': float(top1[rows].mean()),
                'topk': float(topk[rows].mean()),
                'feat_dist': float(np.mean([np.linalg.norm(feats[i] - centroid) for i in rows])),
                'knn_dist': float(np.mean([nearest_feature_distance(feats[i], class_feats) for i in rows])),
            }
            if psnrs is not None:
                entry['psnr'] = float(np.mean([psnrs[i] for i in rows]))
            per_label[label] = entry

        return MetricsReport(
            psnr_db=float(np.mean(psnrs)) if psnrs is not None else None,
            attack_acc_top1=float(top1.mean()),
            attack_acc_topk=float(topk.mean()),
            top_k=self.top_k,
            feat_dist=float(np.mean([e['feat_dist'] for e in per_label.values()])),
            knn_dist=float(np.mean([e['knn_dist'] for e in per_label.values()])),
            per_label=per_label,
            counts={'images': len(pairs), 'labels': len(per_label)},
        )

    def generate_report(self, report, title="ATTACK METRICS"):
        """
        Human-readable metric summary.

        Args:
            report (MetricsReport): Output of evaluate()
            title (str): Banner title

        Returns:
            str: Formatted report
        """
        lines = []
        lines.append("=" * 60)
        lines.append(title)
        lines.append("=" * 60)

        lines.append(f"\nOverall ({report.counts.get('images', 0)} images, "
                     f"{report.counts.get('labels', 0)} labels):")
        if report.psnr_db is not None:
            lines.append(f"  PSNR: {report.psnr_db:.2f} dB")
        lines.append(f"  Attack acc (top-1): {report.attack_acc_top1 * 100:.1f}%")
        lines.append(f"  Attack acc (top-{report.top_k}): {report.attack_acc_topk * 100:.1f}%")
        lines.append(f"  Feat dist: {report.feat_dist:.2f}")
        lines.append(f"  KNN dist: {report.knn_dist:.2f}")

        lines.append("\nPer label:")
        for label, entry in report.per_label.items():
            lines.append(f"  {label}: n={entry['n']}  top1={entry['top1'] * 100:.1f}%  "
                         f"feat={entry['feat_dist']:.2f}  knn={entry['knn_dist']:.2f}")

        lines.append("=" * 60)
        return "\n".join(lines)
