"""
Configuration file for the Model-Inversion Attack Lab
All parameters and constants used across the system
"""

import hashlib
import json
import random

import numpy as np
import torch

TOOL_VERSION = "1.0.0"

# ============================================================================
# DATA PARAMETERS
# ============================================================================

# Where registry datasets (torchvision MNIST) are downloaded
DATA_ROOT = "data"

# Registry names resolved by Ingestion.dataset_loader.load_dataset
DATASET_REGISTRY = ("mnist", "mnist_train", "mnist_test")

# Label manifest expected inside a directory-of-images source
LABEL_MANIFEST_NAME = "labels.csv"
IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp')

# Raw intensity range of decoded image files (mapped to [0, 1])
DEFAULT_NORMALIZATION = (0.0, 255.0)

# Default split: digits 5-9 private, 0-4 public
MNIST_PRIVATE_LABELS = (5, 6, 7, 8, 9)
MNIST_PUBLIC_LABELS = (0, 1, 2, 3, 4)

# Private data is split into training (90%) and test (10%) sets
PRIVATE_TRAIN_FRACTION = 0.9

# Label carried by autoencoder-interpolated public samples
UNLABELED = -1

# Public-set augmentation defaults
AUGMENT_LATENT_DIM = 32
AUGMENT_EPOCHS = 20
AUGMENT_LEARNING_RATE = 1e-3
AUGMENT_BATCH_SIZE = 128

# ============================================================================
# MASK AND BLUR PARAMETERS
# ============================================================================

# Center mask: central box, given as fractions of image height/width
CENTER_MASK_GEOMETRY = {
    'height': 0.5,
    'width': 0.5,
}

# Face "T" mask: an eye band spanning the full width plus a vertical
# strip (horizontally centered) over the nose and mouth
FACE_T_MASK_GEOMETRY = {
    'band_top': 0.25,
    'band_height': 0.20,
    'strip_width': 0.30,
    'strip_top': 0.25,
    'strip_height': 0.60,
}

BLUR_SIGMA = 3.0
BLUR_KERNEL_SIZE = 9

# ============================================================================
# CLASSIFIER TRAINING PARAMETERS
# ============================================================================

CLASSIFIER_OPTIMIZER = 'sgd'
CLASSIFIER_LEARNING_RATE = 1e-2
CLASSIFIER_BATCH_SIZE = 64
CLASSIFIER_MOMENTUM = 0.9
CLASSIFIER_WEIGHT_DECAY = 1e-4
CLASSIFIER_EPOCHS = 10

# ============================================================================
# DIFFERENTIAL PRIVACY PARAMETERS
# ============================================================================

DP_CLIP_NORM = 1.5
DP_DELTA = 1e-5
DP_EPOCHS = 40
DP_BATCH_SIZE = 256

# Learning rates: a small rate for the noisiest model, 0.1 otherwise
DP_LEARNING_RATE = 0.1
DP_LEARNING_RATE_HIGH_NOISE = 0.01
DP_HIGH_NOISE_THRESHOLD = 28.0

# Integer Renyi orders for the subsampled Gaussian accountant. 2-64 covers
# moderate noise; the sparse tail is needed once sigma is large (sigma=28
# is minimized near order 250).
ACCOUNTANT_ORDERS = tuple(range(2, 65)) + (80, 96, 128, 160, 192, 256, 384, 512)

# Stands in for epsilon when no noise is added
EPSILON_INFINITY = float('inf')

# ============================================================================
# GAN PRIOR PARAMETERS
# ============================================================================

LATENT_DIM = 100
LAMBDA_DIV = 0.5
GAN_LEARNING_RATE = 0.004
GAN_BETA1 = 0.5
GAN_BETA2 = 0.999
GAN_BATCH_SIZE = 64
GAN_ITERATIONS = 10000
CRITIC_STEPS = 5
GRADIENT_PENALTY_WEIGHT = 10.0
RECONSTRUCTION_WEIGHT = 1.0

# Data shapes build_prior_networks knows how to lay out (C, H, W)
SUPPORTED_PRIOR_SHAPES = ((3, 64, 64), (1, 64, 64), (3, 28, 28), (1, 28, 28))

# Local discriminator patch edge, as a fraction of the image edge
LOCAL_PATCH_FRACTION = 0.5

AUX_MODES = ('none', 'corrupted', 'blurred')

# ============================================================================
# INVERSION PARAMETERS
# ============================================================================

LAMBDA_ID = 100.0
INVERSION_RESTARTS = 5
INVERSION_ITERATIONS = 1500
INVERSION_OPTIMIZER = 'sgd_momentum'
INVERSION_LEARNING_RATE = 0.02
INVERSION_MOMENTUM = 0.9
INVERSION_BATCH_SIZE = 64

# MNIST stage-2 overrides
MNIST_INVERSION_OPTIMIZER = 'sgd_nesterov'
MNIST_INVERSION_LEARNING_RATE = 0.01
MNIST_INVERSION_ITERATIONS = 3000

# Floor inside log(p) of the identity loss
PROBABILITY_FLOOR = 1e-12

# EMI starts from mid-gray without auxiliary knowledge; later restarts jitter it
EMI_INIT_VALUE = 0.5
EMI_RESTART_JITTER = 0.05

# ============================================================================
# METRICS PARAMETERS
# ============================================================================

PSNR_MAX_VALUE = 1.0
TOP_K = 5
# ============================================================================
# THEORY VALIDATION PARAMETERS
# ============================================================================

THEORY_INSTANCES = 1000
THEORY_MAX_SIZES = (5, 4, 3)  # |X_s|, |X_ns|, |Y|
THEORY_PROBABILITY_FLOOR = 1e-6
THEORY_IDENTITY_TOLERANCE = 1e-9
THEORY_ORDERING_TOLERANCE = 1e-12

# ============================================================================
# EXPERIMENT DEFAULTS
# ============================================================================

ATTACK_LABELS_PER_RUN = 5
IMAGES_PER_LABEL = 20
ATTACKS = ('gmi', 'emi', 'pii')

RESULTS_CSV_FIELDS = [
    'model',
    'attack',
    'setting',
    'psnr',
    'attack_acc_top1',
    'attack_acc_topk',
    'feat_dist',
    'knn_dist',
]

# ============================================================================
# FILE PATHS
# ============================================================================

OUTPUT_DIR = "runs"
CACHE_DIR = "runs/cache"
MANIFEST_NAME = "manifest.json"
RESULTS_CSV_NAME = "results.csv"
CHECKPOINT_FORMAT_VERSION = 1

# ============================================================================
# VISUALIZATION PARAMETERS
# ============================================================================

GRID_COLUMNS = ('target', 'aux', 'emi', 'pii', 'gmi')
GRID_CELL_SIZE = 64
GRID_PADDING = 2
PLOT_DPI = 120

# ============================================================================
# HELPER FUNCTIONS
# ============================================================================

def seed_everything(seed):
    """
    Seed python, numpy and torch RNGs and request deterministic kernels.

    Args:
        seed (int): Global seed

    Returns:
        torch.Generator: A CPU generator seeded with the same value
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)

    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def digest(payload):
    """
    Stable SHA-256 digest of a JSON-serializable payload.

    Args:
        payload: dict/list/scalars (tuples are serialized as lists)

    Returns:
        str: 16-character hex digest
    """
    encoded = json.dumps(payload, sort_keys=True, default=str).encode('utf-8')
    return hashlib.sha256(encoded).hexdigest()[:16]


def dp_learning_rate(noise_ratio):
    """
    Learning rate for DP-SGD given the noise ratio.

    Args:
        noise_ratio (float): sigma (noise std / clip norm)

    Returns:
        float: 0.01 for the noisiest setting, 0.1 otherwise
    """
    if noise_ratio >= DP_HIGH_NOISE_THRESHOLD:
        return DP_LEARNING_RATE_HIGH_NOISE
    return DP_LEARNING_RATE


def default_mask_geometry(kind):
    """
    Returns a copy of the default geometry for a mask kind.

    Args:
        kind (str): 'center' or 'face_t'

    Returns:
        dict: Geometry fractions
    """
    if kind == 'center':
        return dict(CENTER_MASK_GEOMETRY)
    elif kind == 'face_t':
        return dict(FACE_T_MASK_GEOMETRY)
    raise ValueError(f"Unknown mask kind: {kind}")


def format_metric(value):
    """Render a float for CSV/JSON output ('inf' for infinities)."""
    if value is None:
        return ''
    value = float(value)
    if np.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return f"{value:.6f}"
