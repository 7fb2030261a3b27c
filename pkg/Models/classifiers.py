"""
Classifier Architecture Module
Defines target networks and evaluation classifiers with an explicit
feature-extractor / probability-head decomposition.
"""

import os
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import ParameterError, ShapeMismatchError


def _flat_size(module, input_shape):
    """Number of features `module` emits for one input of `input_shape`."""
    with torch.no_grad():
        return int(module(torch.zeros(1, *input_shape)).flatten(1).shape[1])


class SplitNet(nn.Module):
    """
    Base class: forward(x) = head(features(x)) returns logits.
    """

    def features(self, x):
        raise NotImplementedError

    def head(self, features):
        return self.classifier(features)

    def forward(self, x):
        return self.head(self.features(x))


class MnistCnnTarget(SplitNet):
    """3 conv + 2 pool target, with optional dropout and batch norm."""

    def __init__(self, input_shape, num_classes, dropout=0.0, batch_norm=False):
        super().__init__()
        channels = input_shape[0]

        def block(c_in, c_out):
            layers = [nn.Conv2d(c_in, c_out, 3, padding=1)]
            if batch_norm:
                layers.append(nn.BatchNorm2d(c_out))
            layers.append(nn.ReLU())
            return layers

        self.conv = nn.Sequential(
            *block(channels, 32), nn.MaxPool2d(2),
            *block(32, 64), nn.MaxPool2d(2),
            *block(64, 128),
            nn.Flatten(),
        )
        self.fc = nn.Sequential(nn.Linear(_flat_size(self.conv, input_shape), 128), nn.ReLU())
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(128, num_classes)

    def features(self, x):
        return self.fc(self.conv(x))

    def head(self, features):
        return self.classifier(self.dropout(features))


class MlpTarget(SplitNet):
    """MLP with 512 and 256 hidden units."""

    def __init__(self, input_shape, num_classes):
        super().__init__()
        self.body = nn.Sequential(
            nn.Flatten(),
            nn.Linear(int(np.prod(input_shape)), 512), nn.ReLU(),
            nn.Linear(512, 256), nn.ReLU(),
        )
        self.classifier = nn.Linear(256, num_classes)

    def features(self, x):
        return self.body(x)


class EvalCnn3(SplitNet):
    """Three convolutions followed by two fully connected layers."""

    def __init__(self, input_shape, num_classes):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(input_shape[0], 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(),
        )
        self.fc = nn.Sequential(
            nn.Dropout(0.25),
            nn.Linear(_flat_size(self.conv, input_shape), 256), nn.ReLU(),
        )
        self.classifier = nn.Linear(256, num_classes)

    def features(self, x):
        return self.fc(self.conv(x))


class EvalCnn5(SplitNet):
    """Five convolutions and two pooling layers."""

    def __init__(self, input_shape, num_classes):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(input_shape[0], 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.classifier = nn.Linear(128, num_classes)

    def features(self, x):
        return self.conv(x)


class LeNet(SplitNet):
    """Three convolutions, two max pools and one FC layer."""

    def __init__(self, input_shape, num_classes):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(input_shape[0], 6, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(6, 16, 5), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 120, 5), nn.ReLU(),
            nn.Flatten(),
        )
        self.classifier = nn.Linear(_flat_size(self.conv, input_shape), num_classes)

    def features(self, x):
        return self.conv(x)


class StackedCnn(SplitNet):
    """
    Conv + batch norm + leaky ReLU blocks, global pooling, one FC layer.
    Depth 5 is SimpleCNN; deeper stacks stand in for the face-recognition nets.
    """

    def __init__(self, input_shape, num_classes, depth=5, width=32):
        super().__init__()
        layers = []
        c_in, c_out = input_shape[0], width
        for i in range(depth):
            stride = 2 if i % 2 == 1 else 1
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(0.2),
            ]
            c_in = c_out
            if stride == 2:
                c_out = min(c_out * 2, 256)
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.conv = nn.Sequential(*layers)
        self.classifier = nn.Linear(c_in, num_classes)

    def features(self, x):
        return self.conv(x)


class SoftmaxNet(SplitNet):
    """A single affine map; the feature extractor is the flattened image."""

    def __init__(self, input_shape, num_classes):
        super().__init__()
        self.classifier = nn.Linear(int(np.prod(input_shape)), num_classes)

    def features(self, x):
        return x.flatten(1)


ARCHITECTURES = {
    'mnist_cnn_target': MnistCnnTarget,
    'mnist_mlp_dp_target': MlpTarget,
    'mnist_eval_cnn': EvalCnn3,
    'mnist_eval_cnn3': EvalCnn3,
    'mnist_eval_cnn5': EvalCnn5,
    'lenet': LeNet,
    'simple_cnn': lambda shape, k: StackedCnn(shape, k, depth=5),
    'softmax_net': SoftmaxNet,
    'face_evolve_small': lambda shape, k: StackedCnn(shape, k, depth=6),
    'vgg16_small': lambda shape, k: StackedCnn(shape, k, depth=8),
    'resnet152_small': lambda shape, k: StackedCnn(shape, k, depth=10),
}

# Flags an architecture accepts beyond (input_shape, num_classes)
ARCHITECTURE_FLAGS = {
    'mnist_cnn_target': ('dropout', 'batch_norm'),
}

ARCHITECTURE_FLAG_DEFAULTS = {
    'mnist_cnn_target': {'dropout': 0.0, 'batch_norm': False},
}


def canonical_flags(architecture, flags=None):
    """Flags with the architecture defaults filled in, so equal networks compare equal."""
    merged = dict(ARCHITECTURE_FLAG_DEFAULTS.get(architecture, {}))
    merged.update(flags or {})
    if 'dropout' in merged:
        merged['dropout'] = float(merged['dropout'])
    if 'batch_norm' in merged:
        merged['batch_norm'] = bool(merged['batch_norm'])
    return merged


def _init_weights(module):
    """Fan-in scaled uniform initialization for conv/linear layers."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        bound = 1.0 / np.sqrt(module.weight[0].numel())
        nn.init.uniform_(module.weight, -bound, bound)
        if module.bias is not None:
            nn.init.uniform_(module.bias, -bound, bound)


class ClassifierModel:
    """
    A classifier under attack or used for evaluation.

    Wraps a SplitNet and remembers which original label ids its output
    indices stand for (classes[i] is the label of output i).
    """

    def __init__(self, architecture, net, input_shape, classes, flags=None):
        self.architecture = architecture
        self.net = net
        self.input_shape = tuple(int(d) for d in input_shape)
        self.classes = tuple(int(c) for c in classes)
        self.flags = dict(flags or {})
        self.net.eval()

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def architecture_digest(self):
        return config.digest({
            'architecture': self.architecture,
            'flags': self.flags,
            'input_shape': self.input_shape,
            'num_classes': self.num_classes,
        })

    def class_index(self, label):
        """Output index for an original label id."""
        if label not in self.classes:
            raise ParameterError(f"Label {label} is not one of the model classes {self.classes}")
        return self.classes.index(label)

    def _check_batch(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(
                f"Input shape {tuple(x.shape[1:])} does not match model input {self.input_shape}"
            )

    # Differentiable tensor-level API (used by training and attacks)

    def features(self, x):
        self._check_batch(x)
        return self.net.features(x)

    def logits(self, x):
        self._check_batch(x)
        return self.net(x)

    def probabilities(self, x):
        return F.softmax(self.logits(x), dim=1)

    def parameter_dtype(self):
        return next(self.net.parameters()).dtype


def build_classifier(architecture, num_classes=None, input_shape=(1, 28, 28), seed=0,
                     classes=None, **flags):
    """
    Build an untrained classifier.

    Args:
        architecture (str): Registry id from ARCHITECTURES
        num_classes (int): Number of outputs (or pass `classes`)
        input_shape (tuple): (C, H, W)
        seed (int): Initialization seed
        classes (sequence): Original label ids for the outputs
        **flags: Architecture flags (dropout, batch_norm for mnist_cnn_target)

    Returns:
        ClassifierModel

    Raises:
        ParameterError: Unknown architecture id or flag
    """
    if architecture not in ARCHITECTURES:
        raise ParameterError(
            f"Unknown architecture '{architecture}', expected one of {sorted(ARCHITECTURES)}"
        )
    if classes is None:
        if num_classes is None:
            raise ParameterError("Provide num_classes or classes")
        classes = tuple(range(num_classes))
    elif num_classes is not None and num_classes != len(classes):
        raise ParameterError(f"num_classes={num_classes} disagrees with {len(classes)} classes")

    allowed = ARCHITECTURE_FLAGS.get(architecture, ())
    unknown = set(flags) - set(allowed)
    if unknown:
        raise ParameterError(f"Architecture '{architecture}' does not accept flags {sorted(unknown)}")

    torch.manual_seed(seed)
    input_shape = tuple(int(d) for d in input_shape)
    net = ARCHITECTURES[architecture](input_shape, len(classes), **flags)
    net.apply(_init_weights)

    return ClassifierModel(architecture, net, input_shape, classes, flags)


def _as_batch(model, image):
    """Convert a CxHxW or NxCxHxW array into a model-dtype tensor batch."""
    x = torch.as_tensor(np.asarray(image), dtype=model.parameter_dtype())
    if x.dim() == len(model.input_shape):
        return x.unsqueeze(0), True
    return x, False


@torch.no_grad()
def predict_proba(model, image):
    """
    Class probabilities for one image or a batch.

    Args:
        model (ClassifierModel): Classifier
        image (np.ndarray): CxHxW or NxCxHxW

    Returns:
        np.ndarray: K or NxK probabilities
    """
    model.net.eval()
    x, single = _as_batch(model, image)
    probs = model.probabilities(x).cpu().numpy()
    return probs[0] if single else probs


@torch.no_grad()
def feature_extract(model, image, batch_size=512):
    """
    Penultimate-layer features for one image or a batch.

    Returns:
        np.ndarray: D or NxD features
    """
    model.net.eval()
    x, single = _as_batch(model, image)
    chunks = [model.features(x[i:i + batch_size]).cpu().numpy()
              for i in range(0, len(x), batch_size)]
    feats = np.concatenate(chunks)
    return feats[0] if single else feats


def save_classifier(model, output_path, train_config=None):
    """
    Write a versioned checkpoint.

    Args:
        model (ClassifierModel): Model to save
        output_path (str): Destination .pt file
        train_config (dict): Config whose digest is recorded
    """
    os.makedirs(os.path.dirname(output_path) or '.', exist_ok=True)
    torch.save({
        'format_version': config.CHECKPOINT_FORMAT_VERSION,
        'architecture': model.architecture,
        'input_shape': model.input_shape,
        'classes': model.classes,
        'flags': model.flags,
        'state_dict': model.net.state_dict(),
        'config_digest': config.digest(train_config or {}),
    }, output_path)


def load_classifier(checkpoint_path):
    """Rebuild a ClassifierModel from save_classifier output."""
    if not os.path.exists(checkpoint_path):
        raise FileNotFoundError(f"Classifier checkpoint not found: {checkpoint_path}")

    payload = torch.load(checkpoint_path, map_location='cpu', weights_only=False)
    if payload.get('format_version') != config.CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint version in {checkpoint_path}")

    model = build_classifier(payload['architecture'], input_shape=payload['input_shape'],
                             classes=payload['classes'], **payload['flags'])
    model.net.load_state_dict(payload['state_dict'])
    model.net.eval()
    return model
