"""
Public Set Augmentation Module
Trains an autoencoder on public images and adds decoded latent interpolations.
"""

import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import ParameterError
from Ingestion.dataset_loader import ImageSample, stack_samples


class ImageAutoencoder(nn.Module):
    """
    Fully connected autoencoder on flattened images.
    """

    def __init__(self, image_shape, latent_dim, hidden_dim=256):
        super().__init__()
        self.image_shape = tuple(image_shape)
        n_pixels = int(np.prod(image_shape))

        self.encoder = nn.Sequential(
            nn.Flatten(),
            nn.Linear(n_pixels, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, latent_dim),
        )
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, n_pixels),
            nn.Sigmoid(),
        )

    def encode(self, images):
        return self.encoder(images)

    def decode(self, codes):
        return self.decoder(codes).view(-1, *self.image_shape)

    def forward(self, images):
        return self.decode(self.encode(images))


def train_autoencoder(images, latent_dim, seed, epochs=config.AUGMENT_EPOCHS,
                      learning_rate=config.AUGMENT_LEARNING_RATE,
                      batch_size=config.AUGMENT_BATCH_SIZE, verbose=False):
    """
    Fit an ImageAutoencoder with MSE reconstruction loss.

    Args:
        images (np.ndarray): NxCxHxW float32 images in [0, 1]
        latent_dim (int): Code size
        seed (int): Seed for init and batch order

    Returns:
        ImageAutoencoder: Trained model in eval mode
    """
    generator = config.seed_everything(seed)
    model = ImageAutoencoder(images.shape[1:], latent_dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    data = torch.from_numpy(images)

    model.train()
    for _ in tqdm(range(epochs), desc="Autoencoder", disable=not verbose):
        order = torch.randperm(len(data), generator=generator)
        for start in range(0, len(data), batch_size):
            batch = data[order[start:start + batch_size]]
            loss = nn.functional.mse_loss(model(batch), batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    model.eval()
    return model


@torch.no_grad()
def interpolate(autoencoder, image_a, image_b, weight):
    """
    Decode the convex combination (1 - weight) * E(a) + weight * E(b).

    Returns:
        np.ndarray: Decoded CxHxW image
    """
    codes = autoencoder.encode(torch.from_numpy(np.stack([image_a, image_b])))
    mixed = (1.0 - weight) * codes[0] + weight * codes[1]
    return autoencoder.decode(mixed.unsqueeze(0))[0].numpy()


def augment_public_autoencoder(public, latent_dim=config.AUGMENT_LATENT_DIM, pairs=0,
                               interpolation_points=1, seed=0,
                               epochs=config.AUGMENT_EPOCHS, verbose=False):
    """
    Augment the public set with decoded latent-space interpolations.

    Args:
        public (list): Public ImageSample list (non-empty)
        latent_dim (int): Autoencoder code size (> 0)
        pairs (int): Number of random image pairs to interpolate
        interpolation_points (int): Interior points per pair (>= 1)
        seed (int): Seed for training and pair selection
        epochs (int): Autoencoder training epochs

    Returns:
        list: Original samples followed by pairs * interpolation_points
        unlabeled samples
    """
    if latent_dim <= 0:
        raise ParameterError(f"latent_dim must be positive, got {latent_dim}")
    if not public:
        raise ParameterError("Public set is empty")
    if interpolation_points < 1:
        raise ParameterError(f"interpolation_points must be >= 1, got {interpolation_points}")
    if pairs < 0:
        raise ParameterError(f"pairs must be >= 0, got {pairs}")

    augmented = list(public)
    if pairs == 0:
        return augmented

    images, _ = stack_samples(public)
    autoencoder = train_autoencoder(images, latent_dim, seed, epochs=epochs, verbose=verbose)

    rng = np.random.default_rng(seed)
    weights = [k / (interpolation_points + 1) for k in range(1, interpolation_points + 1)]
    for _ in range(pairs):
        i, j = rng.choice(len(public), size=2, replace=len(public) < 2)
        for w in weights:
            decoded = np.clip(interpolate(autoencoder, images[i], images[j], w), 0.0, 1.0)
            augmented.append(ImageSample(decoded.astype(np.float32), config.UNLABELED))

    if verbose:
        print(f"✓ Augmented public set: {len(public)} → {len(augmented)} samples")

    return augmented
