"""
Classifier Training Module
Trains target networks and evaluation classifiers with cross-entropy, and
measures the empirical predictive power of a masked-out region.
"""

import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import DataFormatError, ParameterError
from Ingestion.auxiliary_knowledge import apply_corruption, render_mask
from Ingestion.dataset_loader import stack_samples

OPTIMIZERS = ('sgd', 'sgd_nesterov', 'adam')


@dataclass
class TrainConfig:
    """Optimizer settings for ordinary (non-private) training."""
    optimizer: str = config.CLASSIFIER_OPTIMIZER
    learning_rate: float = config.CLASSIFIER_LEARNING_RATE
    batch_size: int = config.CLASSIFIER_BATCH_SIZE
    momentum: float = config.CLASSIFIER_MOMENTUM
    weight_decay: float = config.CLASSIFIER_WEIGHT_DECAY
    epochs: int = config.CLASSIFIER_EPOCHS
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"Unknown optimizer '{self.optimizer}', expected one of {OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self):
        return asdict(self)


def make_optimizer(name, parameters, learning_rate, momentum=0.0, weight_decay=0.0):
    """torch optimizer for one of OPTIMIZERS."""
    if name == 'sgd':
        return torch.optim.SGD(parameters, lr=learning_rate, momentum=momentum,
                               weight_decay=weight_decay)
    elif name == 'sgd_nesterov':
        return torch.optim.SGD(parameters, lr=learning_rate, momentum=momentum,
                               weight_decay=weight_decay, nesterov=True)
    elif name == 'adam':
        return torch.optim.Adam(parameters, lr=learning_rate, weight_decay=weight_decay)
    raise ParameterError(f"Unknown optimizer: {name}")


def encode_labels(model, labels):
    """
    Map original label ids to output indices of `model`.

    Raises:
        DataFormatError: If a label is not one of the model's classes
    """
    lookup = {label: i for i, label in enumerate(model.classes)}
    unknown = sorted({int(l) for l in labels} - set(lookup))
    if unknown:
        raise DataFormatError(f"Labels {unknown} are not among model classes {model.classes}")
    return np.array([lookup[int(l)] for l in labels], dtype=np.int64)


def to_tensors(model, samples):
    """Stack samples into (images, target indices) tensors for `model`."""
    images, labels = stack_samples(samples)
    x = torch.from_numpy(images).to(model.parameter_dtype())
    y = torch.from_numpy(encode_labels(model, labels))
    return x, y


def classification_loss(model, x, y):
    """Mean cross-entropy, i.e. the mean of -log p_f(y|x)."""
    return F.cross_entropy(model.logits(x), y)


@torch.no_grad()
def evaluate_accuracy(model, samples, batch_size=512):
    """
    Top-1 accuracy of `model` on labelled samples.

    Returns:
        float: Fraction correct (0.0 for an empty list)
    """
    if not samples:
        return 0.0
    model.net.eval()
    x, y = to_tensors(model, samples)
    correct = 0
    for start in range(0, len(x), batch_size):
        preds = model.logits(x[start:start + batch_size]).argmax(dim=1)
        correct += int((preds == y[start:start + batch_size]).sum())
    return correct / len(x)


def train_classifier(model, train_set, test_set, train_config=None, verbose=False):
    """
    Train a classifier with cross-entropy.

    Args:
        model (ClassifierModel): Untrained model (trained in place)
        train_set (list): Labelled ImageSample list
        test_set (list): Held-out ImageSample list (may be empty)
        train_config (TrainConfig): Optimizer settings
        verbose (bool): Show progress

    Returns:
        tuple: (model, report dict {train_acc, test_acc, epochs, seed})

    Raises:
        ParameterError: If the training set is empty
    """
    train_config = train_config or TrainConfig()
    if not train_set:
        raise ParameterError("Training set is empty")

    generator = config.seed_everything(train_config.seed)
    x, y = to_tensors(model, train_set)

    optimizer = make_optimizer(train_config.optimizer, model.net.parameters(),
                               train_config.learning_rate, train_config.momentum,
                               train_config.weight_decay)

    epochs = tqdm(range(train_config.epochs), desc=f"Training {model.architecture}",
                  disable=not verbose)
    for epoch in epochs:
        model.net.train()
        order = torch.randperm(len(x), generator=generator)
        running = 0.0
        for start in range(0, len(x), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            loss = classification_loss(model, x[batch], y[batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += float(loss) * len(batch)
        epochs.set_postfix(loss=running / len(x))

    model.net.eval()
    report = {
        'train_acc': evaluate_accuracy(model, train_set),
        'test_acc': evaluate_accuracy(model, test_set),
        'epochs': train_config.epochs,
        'seed': train_config.seed,
    }

    if verbose:
        print(f"✓ {model.architecture}: train acc {report['train_acc']:.4f}, "
              f"test acc {report['test_acc']:.4f}")

    return model, report


def predictive_power_empirical(model, test_set, mask_spec):
    """
    Accuracy drop when the masked region is hidden.

    Args:
        model (ClassifierModel): Trained classifier
        test_set (list): Labelled test samples
        mask_spec (MaskSpec): Region treated as the sensitive feature

    Returns:
        float: acc(full images) - acc(masked images), in [-1, 1]
    """
    if not test_set:
        raise ParameterError("Test set is empty")

    _, height, width = test_set[0].image.shape
    mask = render_mask(mask_spec, height, width)

    masked = [type(s)(apply_corruption(s, mask).image, s.label) for s in test_set]
    return evaluate_accuracy(model, test_set) - evaluate_accuracy(model, masked)
