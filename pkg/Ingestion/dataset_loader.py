"""
Dataset Ingestion Module
Handles loading image datasets, private/public splits by class, and train/test splits.
"""

import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import DataFormatError, DatasetLoadError, ParameterError, SplitOverlapError


@dataclass
class ImageSample:
    """
    One image with its class label.

    image is a float32 array (channels x height x width) in [0, 1];
    label is the class id (config.UNLABELED for augmented samples).
    """
    image: np.ndarray
    label: int

    def __post_init__(self):
        if self.image.ndim != 3:
            raise DataFormatError(f"Image must be CxHxW, got shape {self.image.shape}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise DataFormatError("Image intensities must lie within [0, 1]")
        if self.label < 0 and self.label != config.UNLABELED:
            raise DataFormatError(f"Invalid label: {self.label}")
        self.label = int(self.label)


@dataclass
class SplitSpec:
    """Private and public label sets; they must not intersect."""
    private_labels: frozenset = field(default_factory=frozenset)
    public_labels: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.private_labels = frozenset(int(l) for l in self.private_labels)
        self.public_labels = frozenset(int(l) for l in self.public_labels)

    def validate(self):
        overlap = self.private_labels & self.public_labels
        if overlap:
            raise SplitOverlapError(
                f"Private and public label sets overlap on {sorted(overlap)}"
            )


def normalize_intensities(raw, normalization=config.DEFAULT_NORMALIZATION):
    """
    Map raw intensities from the given range onto [0, 1].

    Args:
        raw (np.ndarray): Raw pixel values
        normalization (tuple): (low, high) of the raw range

    Returns:
        np.ndarray: float32 array clipped to [0, 1]
    """
    low, high = float(normalization[0]), float(normalization[1])
    if high <= low:
        raise ParameterError(f"Normalization range must be increasing, got {normalization}")
    scaled = (raw.astype(np.float64) - low) / (high - low)
    return np.clip(scaled, 0.0, 1.0).astype(np.float32)


def _read_image_file(image_path):
    """Decode one image file to a CxHxW array of raw intensities."""
    if not image_path.lower().endswith(config.IMAGE_EXTENSIONS):
        raise DataFormatError(f"Unsupported image type: {image_path}")
    if not os.path.exists(image_path):
        raise DatasetLoadError(f"Image not found: {image_path}")

    image = cv2.imread(image_path, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DataFormatError(f"Failed to decode image: {image_path}")

    if image.ndim == 2:
        return image[np.newaxis, :, :]

    # OpenCV decodes to BGR(A); the lab works in RGB
    if image.shape[2] == 4:
        image = cv2.cvtColor(image, cv2.COLOR_BGRA2RGB)
    else:
        image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    return np.transpose(image, (2, 0, 1))


def _read_label_manifest(directory_path):
    """Returns [(relative_path, label)] in manifest order."""
    manifest_path = os.path.join(directory_path, config.LABEL_MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DatasetLoadError(
            f"No {config.LABEL_MANIFEST_NAME} found in {directory_path}"
        )

    entries = []
    with open(manifest_path, newline='') as f:
        for row in csv.reader(f):
            if len(row) < 2:
                continue
            relative_path, label = row[0].strip(), row[1].strip()
            try:
                entries.append((relative_path, int(label)))
            except ValueError:
                # Header row
                continue
    return entries


def load_image_directory(directory_path, normalization=config.DEFAULT_NORMALIZATION,
                         max_workers=8):
    """
    Load a directory of images described by a label manifest.

    Args:
        directory_path (str): Directory holding the images and labels.csv
        normalization (tuple): Raw intensity range
        max_workers (int): Decoder threads (order is preserved)

    Returns:
        list: ImageSample list in manifest order

    Raises:
        DatasetLoadError: If the directory or its manifest is missing or empty
        DataFormatError: If images do not share one shape
    """
    if not os.path.isdir(directory_path):
        raise DatasetLoadError(f"Dataset directory not found: {directory_path}")

    entries = _read_label_manifest(directory_path)
    if not entries:
        raise DatasetLoadError(f"No labelled images listed in {directory_path}")

    paths = [os.path.join(directory_path, rel) for rel, _ in entries]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        raw_images = list(pool.map(_read_image_file, paths))

    reference_shape = raw_images[0].shape
    for path, raw in zip(paths, raw_images):
        if raw.shape != reference_shape:
            raise DataFormatError(
                f"Image shape mismatch: {path} has {raw.shape}, expected {reference_shape}"
            )

    return [
        ImageSample(normalize_intensities(raw, normalization), label)
        for raw, (_, label) in zip(raw_images, entries)
    ]


def _load_mnist(name):
    """Resolve an MNIST registry name through torchvision."""
    from torchvision import datasets

    splits = {
        'mnist_train': (True,),
        'mnist_test': (False,),
        'mnist': (True, False),
    }[name]

    images, labels = [], []
    for train in splits:
        dataset = datasets.MNIST(root=config.DATA_ROOT, train=train, download=True)
        images.append(dataset.data.numpy())
        labels.append(dataset.targets.numpy())
    return np.concatenate(images)[:, np.newaxis, :, :], np.concatenate(labels)


def load_dataset(source, normalization=config.DEFAULT_NORMALIZATION, verbose=False):
    """
    Load a dataset from a registry name or a directory of images.

    Args:
        source (str): One of config.DATASET_REGISTRY, or a directory path
        normalization (tuple): Raw intensity range mapped to [0, 1]
        verbose (bool): Print a summary line

    Returns:
        list: ImageSample list in deterministic order

    Raises:
        DatasetLoadError: Missing or empty source
        DataFormatError: Non-uniform image shapes
    """
    source = str(source)
    if source in config.DATASET_REGISTRY:
        raw_images, labels = _load_mnist(source)
        images = normalize_intensities(raw_images, normalization)
        samples = [ImageSample(img, int(lbl)) for img, lbl in zip(images, labels)]
    else:
        samples = load_image_directory(source, normalization)

    if verbose:
        print(f"✓ Loaded {len(samples)} samples of shape {samples[0].image.shape} from {source}")

    return samples


def split_private_public(data, spec):
    """
    Split samples into private and public sets by label.

    Args:
        data (list): ImageSample list
        spec (SplitSpec): Disjoint label sets

    Returns:
        tuple: (private_samples, public_samples); samples whose label is in
        neither set are dropped

    Raises:
        SplitOverlapError: If the label sets intersect
        ParameterError: If a split label never occurs in the data
    """
    spec.validate()

    present = {s.label for s in data}
    absent = (spec.private_labels | spec.public_labels) - present
    if absent:
        raise ParameterError(f"Split labels not present in data: {sorted(absent)}")

    private = [s for s in data if s.label in spec.private_labels]
    public = [s for s in data if s.label in spec.public_labels]
    return private, public


def train_test_split(samples, train_fraction=config.PRIVATE_TRAIN_FRACTION, seed=0):
    """
    Seeded random split of a sample list into training and test parts.

    Returns:
        tuple: (train_samples, test_samples)
    """
    if not 0.0 < train_fraction <= 1.0:
        raise ParameterError(f"train_fraction must be in (0, 1], got {train_fraction}")

    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_fraction * len(samples)))
    train = [samples[i] for i in sorted(order[:n_train])]
    test = [samples[i] for i in sorted(order[n_train:])]
    return train, test


def subsample(samples, fraction, seed=0):
    """Seeded subset keeping `fraction` of each label (at least one per label)."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(samples)

    rng = np.random.default_rng(seed)
    keep = []
    for label in sorted({s.label for s in samples}):
        indices = [i for i, s in enumerate(samples) if s.label == label]
        n_keep = max(1, int(round(fraction * len(indices))))
        keep.extend(rng.choice(indices, size=n_keep, replace=False).tolist())
    return [samples[i] for i in sorted(keep)]


def stack_samples(samples):
    """
    Stack samples into arrays.

    Returns:
        tuple: (images float32 NxCxHxW, labels int64 N)
    """
    if not samples:
        raise ParameterError("Cannot stack an empty sample list")
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels


def samples_by_label(samples):
    """Group samples into {label: [ImageSample]} preserving order."""
    grouped = {}
    for sample in samples:
        grouped.setdefault(sample.label, []).append(sample)
    return grouped
