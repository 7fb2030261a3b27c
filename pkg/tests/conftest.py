"""
Shared fixtures: repository root on sys.path, the --runslow switch and
small synthetic image sets.
"""

import os
import sys
from pathlib import Path

import cv2
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from Ingestion.dataset_loader import ImageSample


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run MNIST-scale acceptance tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def bar_image(label, rng, size=28, noise=0.05):
    """1xHxW image with a bright horizontal bar whose row depends on the label."""
    image = rng.uniform(0.0, noise, size=(1, size, size)).astype(np.float32)
    row = 3 + 4 * (label % 6)
    image[0, row:row + 3, 4:size - 4] = 1.0
    return image


def make_samples(labels, per_label, seed=0, size=28):
    rng = np.random.default_rng(seed)
    return [ImageSample(bar_image(label, rng, size), label)
            for label in labels for _ in range(per_label)]


@pytest.fixture
def toy_samples():
    """Five labels, eight images each, 1x28x28."""
    return make_samples(range(5), 8)


def write_image_directory(directory, samples):
    """PNG files plus labels.csv for load_image_directory."""
    os.makedirs(directory, exist_ok=True)
    rows = ['path,label']
    for i, sample in enumerate(samples):
        name = f'img_{i:04d}.png'
        pixels = np.rint(sample.image[0] * 255).astype(np.uint8)
        cv2.imwrite(os.path.join(directory, name), pixels)
        rows.append(f'{name},{sample.label}')
    with open(os.path.join(directory, 'labels.csv'), 'w') as f:
        f.write('\n'.join(rows) + '\n')
    return str(directory)


@pytest.fixture
def image_directory(tmp_path, toy_samples):
    return write_image_directory(tmp_path / 'images', toy_samples)


TINY_EXPERIMENT = {
    'experiment': {
        'name': 'tiny',
        'seed': '0',
        'attacks': 'gmi, emi, pii',
        'attacked_labels': '2, 3',
        'images_per_label': '2',
    },
    'data': {
        'private_labels': '2, 3, 4',
        'public_labels': '0, 1',
        'train_fraction': '0.75',
    },
    'target': {
        'architecture': 'softmax_net',
        'learning_rate': '0.1',
        'batch_size': '8',
        'epochs': '2',
    },
    'evaluation': {
        'architecture': 'lenet',
        'batch_size': '8',
        'epochs': '1',
    },
    'prior': {
        'latent_dim': '8',
        'lambda_div': '0.5',
        'batch_size': '4',
        'iterations': '2',
        'critic_steps': '1',
    },
    'attack': {
        'restarts': '1',
        'iterations': '2',
        'batch_size': '2',
    },
    'metrics': {
        'top_k': '2',
    },
}


@pytest.fixture
def tiny_experiment(tmp_path, image_directory):
    """
    Returns write(overrides=None) -> path of an INI file for a seconds-long
    run on the synthetic image directory. Overrides map section -> {key: value};
    a value of None drops the key.
    """

    def write(overrides=None, name='tiny.ini'):
        sections = {s: dict(values) for s, values in TINY_EXPERIMENT.items()}
        sections['experiment']['output_dir'] = str(tmp_path / 'runs')
        sections['experiment']['cache_dir'] = str(tmp_path / 'cache')
        sections['data']['dataset'] = image_directory
        for section, values in (overrides or {}).items():
            target = sections.setdefault(section, {})
            for key, value in values.items():
                if value is None:
                    target.pop(key, None)
                else:
                    target[key] = str(value)

        lines = []
        for section, values in sections.items():
            lines.append(f'[{section}]')
            lines.extend(f'{key} = {value}' for key, value in values.items())
            lines.append('')
        path = tmp_path / name
        path.write_text('\n'.join(lines))
        return str(path)

    return write
