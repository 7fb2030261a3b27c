"""
GAN Prior Training Module
Public knowledge distillation: WGAN-GP critic/generator alternation with a
diversity term in the target's feature space, plus checkpoints and sampling.
"""

import csv
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import (AuxModeMismatchError, MaskBoundaryError, ParameterError,
                        ShapeMismatchError, TrainingDivergedError)
from Ingestion.auxiliary_knowledge import MaskSpec, gaussian_kernel, render_mask
from Ingestion.dataset_loader import stack_samples
from Prior.gan_networks import networks_from_description

TRACE_FIELDS = ['step', 'critic_loss', 'gen_loss', 'diversity', 'penalty',
                'wasserstein', 'reconstruction']


@dataclass
class GanTrainConfig:
    """Stage-1 optimization settings."""
    lambda_div: float = config.LAMBDA_DIV
    learning_rate: float = config.GAN_LEARNING_RATE
    beta1: float = config.GAN_BETA1
    beta2: float = config.GAN_BETA2
    batch_size: int = config.GAN_BATCH_SIZE
    iterations: int = config.GAN_ITERATIONS
    critic_steps: int = config.CRITIC_STEPS
    gp_weight: float = config.GRADIENT_PENALTY_WEIGHT
    reconstruction_weight: float = config.RECONSTRUCTION_WEIGHT
    seed: int = 0
    # Occlusion used to synthesize corrupted inputs (corrupted mode)
    mask_spec: Optional[MaskSpec] = None
    blur_sigma: float = config.BLUR_SIGMA
    blur_kernel_size: int = config.BLUR_KERNEL_SIZE
    strict_diversity: bool = False

    def __post_init__(self):
        if self.lambda_div < 0:
            raise ParameterError(f"lambda_div must be >= 0, got {self.lambda_div}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ParameterError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.iterations < 0 or self.critic_steps < 1:
            raise ParameterError("iterations must be >= 0 and critic_steps >= 1")
        if self.gp_weight < 0 or self.reconstruction_weight < 0:
            raise ParameterError("Loss weights must be >= 0")
        if isinstance(self.mask_spec, dict):
            self.mask_spec = MaskSpec(**self.mask_spec)

    def to_dict(self):
        return asdict(self)


class PriorCheckpoint:
    """
    A trained prior: generator, critics, config digest and, when the
    diversity term was used, the digest of the target feature extractor.
    """

    def __init__(self, generator, discriminators, config_digest, feature_digest=None,
                 traces=None, train_config=None):
        local_present = discriminators.local_d is not None
        if local_present != (generator.aux_mode == 'corrupted'):
            raise AuxModeMismatchError(
                f"Local critic presence ({local_present}) disagrees with aux mode '{generator.aux_mode}'"
            )
        self.generator = generator
        self.discriminators = discriminators
        self.config_digest = config_digest
        self.feature_digest = feature_digest
        self.traces = traces or []
        self.train_config = train_config or {}

    @property
    def aux_mode(self):
        return self.generator.aux_mode

    @property
    def data_shape(self):
        return self.generator.data_shape

    @property
    def latent_dim(self):
        return self.generator.latent_dim

    def save(self, output_path):
        """Write a versioned checkpoint file."""
        os.makedirs(os.path.dirname(output_path) or '.', exist_ok=True)
        d_set = self.discriminators
        torch.save({
            'format_version': config.CHECKPOINT_FORMAT_VERSION,
            'aux_mode': self.aux_mode,
            'data_shape': self.data_shape,
            'latent_dim': self.latent_dim,
            'generator': self.generator.describe(),
            'global_d': d_set.global_d.describe(),
            'local_d': d_set.local_d.describe() if d_set.local_d is not None else None,
            'generator_state': self.generator.state_dict(),
            'discriminator_state': d_set.state_dict(),
            'config_digest': self.config_digest,
            'feature_digest': self.feature_digest,
            'train_config': self.train_config,
            'traces': self.traces,
        }, output_path)

    @classmethod
    def load(cls, checkpoint_path):
        if not os.path.exists(checkpoint_path):
            raise FileNotFoundError(f"Prior checkpoint not found: {checkpoint_path}")
        payload = torch.load(checkpoint_path, map_location='cpu', weights_only=False)
        if payload.get('format_version') != config.CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"Unsupported checkpoint version in {checkpoint_path}")

        generator, d_set = networks_from_description(payload['generator'], payload['global_d'],
                                                     payload['local_d'])
        generator.load_state_dict(payload['generator_state'])
        d_set.load_state_dict(payload['discriminator_state'])
        generator.eval()
        d_set.eval()
        return cls(generator, d_set, payload['config_digest'], payload['feature_digest'],
                   payload['traces'], payload['train_config'])


def wasserstein_estimate(critic, real, fake):
    """mean D(real) - mean D(fake)"""
    return critic(real).mean() - critic(fake).mean()


def crop(images, window, patch_size):
    """Crop NxCxHxW images to the patch at window = (top, left)."""
    top, left = window
    return images[..., top:top + patch_size, left:left + patch_size]


def wgan_losses(discriminators, real, fake, window=None):
    """
    WGAN critic and generator losses.

    Args:
        discriminators (DiscriminatorSet): Global critic (+ optional local)
        real (torch.Tensor): Real batch
        fake (torch.Tensor): Generated batch, same shape
        window (tuple): (top, left) of the boundary patch for the local critic

    Returns:
        tuple: (critic loss, generator adversarial loss); the local critic
        adds its own terms with equal weight
    """
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ParameterError("Real and fake batches must be non-empty")
    if tuple(real.shape) != tuple(fake.shape):
        raise ShapeMismatchError(f"Real batch {tuple(real.shape)} != fake batch {tuple(fake.shape)}")

    critic_loss = -wasserstein_estimate(discriminators.global_d, real, fake)
    gen_loss = -discriminators.global_d(fake).mean()

    if discriminators.local_d is not None and window is not None:
        p = discriminators.patch_size
        real_patch, fake_patch = crop(real, window, p), crop(fake, window, p)
        critic_loss = critic_loss - wasserstein_estimate(discriminators.local_d, real_patch, fake_patch)
        gen_loss = gen_loss - discriminators.local_d(fake_patch).mean()

    return critic_loss, gen_loss


def diversity_loss(generate, feature_extractor, z1, z2, strict=False):
    """
    Mean over latent pairs of ||F(G(z1)) - F(G(z2))|| / ||z1 - z2||.

    Args:
        generate (callable): z batch -> images (or vectors)
        feature_extractor (callable): images -> features
        z1, z2 (torch.Tensor): Paired latent batches of equal size
        strict (bool): Raise on a zero-distance pair instead of dropping it

    Returns:
        torch.Tensor: Nonnegative scalar (0 when no pair remains)
    """
    if z1.shape != z2.shape:
        raise ShapeMismatchError(f"Latent batches differ in shape: {tuple(z1.shape)} vs {tuple(z2.shape)}")

    latent_dist = torch.linalg.vector_norm((z1 - z2).flatten(1), dim=1)
    keep = latent_dist > 0
    if not bool(keep.all()):
        if strict:
            raise ParameterError(f"{int((~keep).sum())} latent pair(s) have zero distance")
        z1, z2, latent_dist = z1[keep], z2[keep], latent_dist[keep]
    if z1.shape[0] == 0:
        return torch.zeros((), dtype=latent_dist.dtype)

    f1 = feature_extractor(generate(z1)).flatten(1)
    f2 = feature_extractor(generate(z2)).flatten(1)
    feature_dist = torch.linalg.vector_norm(f1 - f2, dim=1)
    return (feature_dist / latent_dist).mean()


def gradient_penalty(critic, real, fake, weight=config.GRADIENT_PENALTY_WEIGHT, generator=None):
    """
    weight * mean (||grad_x D(x_hat)|| - 1)^2 over random interpolates x_hat.

    Args:
        critic (nn.Module): One critic
        real, fake (torch.Tensor): Batches of equal shape
        weight (float): Penalty weight (>= 0)
        generator (torch.Generator): RNG for interpolation coefficients
    """
    if weight < 0:
        raise ParameterError(f"Penalty weight must be >= 0, got {weight}")
    if tuple(real.shape) != tuple(fake.shape):
        raise ShapeMismatchError(f"Real batch {tuple(real.shape)} != fake batch {tuple(fake.shape)}")
    if weight == 0:
        return torch.zeros((), dtype=real.dtype)

    alpha_shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    alpha = torch.rand(alpha_shape, generator=generator, dtype=real.dtype)
    interpolates = (alpha * real.detach() + (1 - alpha) * fake.detach()).requires_grad_(True)

    scores = critic(interpolates)
    gradients, = torch.autograd.grad(scores.sum(), interpolates, create_graph=True)
    norms = gradients.flatten(1).norm(2, dim=1)
    return weight * ((norms - 1.0) ** 2).mean()


def patch_window(mask, patch_size, seed=0):
    """
    Pick a patch position whose window contains hidden and visible pixels.

    Args:
        mask (np.ndarray): HxW binary mask, 1 = hidden
        patch_size (int): Patch edge length
        seed: int seed or np.random.Generator

    Returns:
        tuple: (top, left)

    Raises:
        MaskBoundaryError: If the mask has no boundary
    """
    mask = (np.asarray(mask) != 0).astype(np.uint8)
    height, width = mask.shape
    if patch_size < 1 or patch_size > min(height, width):
        raise ParameterError(f"Patch size {patch_size} does not fit a {height}x{width} image")
    hidden = int(mask.sum())
    if hidden == 0 or hidden == mask.size:
        raise MaskBoundaryError("Mask is all-visible or all-hidden; it has no boundary")

    s = cv2.integral(mask)
    p = patch_size
    counts = s[p:, p:] - s[:-p, p:] - s[p:, :-p] + s[:-p, :-p]
    tops, lefts = np.nonzero((counts > 0) & (counts < p * p))
    if len(tops) == 0:
        raise MaskBoundaryError(f"No {p}x{p} window straddles the mask boundary")

    rng = np.random.default_rng(seed)
    i = int(rng.integers(len(tops)))
    return int(tops[i]), int(lefts[i])


def local_patch(image, mask, patch_size, seed=0):
    """
    A seeded random patch of `image` (CxHxW) containing the mask boundary.

    Returns:
        tuple: (patch, (top, left))
    """
    window = patch_window(mask, patch_size, seed)
    return crop(image, window, patch_size), window


def blur_tensor(images, kernel_sigma=config.BLUR_SIGMA, kernel_size=config.BLUR_KERNEL_SIZE):
    """Differentiable Gaussian blur matching the reflect border of blur_image."""
    kernel = torch.from_numpy(gaussian_kernel(kernel_sigma, kernel_size)[:, 0]).to(images.dtype)
    r = kernel_size // 2
    c = images.shape[1]

    x = torch.cat([images[..., :, :r].flip(-1), images, images[..., :, -r:].flip(-1)], dim=-1) if r else images
    x = F.conv2d(x, kernel.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    x = torch.cat([x[..., :r, :].flip(-2), x, x[..., -r:, :].flip(-2)], dim=-2) if r else x
    return F.conv2d(x, kernel.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def make_aux_batch(real, aux_mode, mask_tensor, train_config):
    """Auxiliary inputs the attacker would hold for a batch of real images."""
    if aux_mode == 'corrupted':
        return real * (1 - mask_tensor), mask_tensor.expand(real.shape[0], -1, -1, -1)
    elif aux_mode == 'blurred':
        return blur_tensor(real, train_config.blur_sigma, train_config.blur_kernel_size).clamp(0, 1), None
    return None, None


def reconstruction_loss(raw, aux_image, aux_mask, aux_mode, train_config):
    """L2 between generated and observed evidence (visible pixels, or blurred view)."""
    if aux_mode == 'corrupted':
        visible = (1 - aux_mask).expand_as(raw)
        return (((raw - aux_image) ** 2) * visible).sum() / visible.sum().clamp(min=1)
    elif aux_mode == 'blurred':
        return F.mse_loss(blur_tensor(raw, train_config.blur_sigma, train_config.blur_kernel_size),
                          aux_image)
    return torch.zeros((), dtype=raw.dtype)


def _feature_fn(feature_extractor):
    if feature_extractor is None:
        return None, None
    if hasattr(feature_extractor, 'features'):
        return feature_extractor.features, feature_extractor.architecture_digest
    return feature_extractor, None


def _finite(*values):
    return all(np.isfinite(float(v)) for v in values)


def train_prior(networks, public, feature_extractor=None, train_config=None, verbose=False):
    """
    Train the prior on public images.

    Args:
        networks (tuple): (generator, DiscriminatorSet) from build_prior_networks
        public (list or np.ndarray): ImageSample list or NxCxHxW float array
        feature_extractor: Target ClassifierModel (its features()) or a callable;
            required when lambda_div > 0
        train_config (GanTrainConfig): Optimization settings

    Returns:
        PriorCheckpoint: With per-generator-step loss traces

    Raises:
        ParameterError: lambda_div > 0 without a feature extractor
        TrainingDivergedError: A loss became non-finite
    """
    train_config = train_config or GanTrainConfig()
    generator, d_set = networks
    features, feature_digest = _feature_fn(feature_extractor)
    if train_config.lambda_div > 0 and features is None:
        raise ParameterError("lambda_div > 0 needs the target feature extractor")

    images = public if isinstance(public, np.ndarray) else stack_samples(public)[0]
    if len(images) == 0:
        raise ParameterError("Public set is empty")
    if tuple(images.shape[1:]) != tuple(generator.data_shape):
        raise ShapeMismatchError(
            f"Public images {tuple(images.shape[1:])} do not match generator shape {generator.data_shape}"
        )

    torch_gen = config.seed_everything(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    data = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    aux_mode = generator.aux_mode

    mask_np, mask_tensor = None, None
    if aux_mode == 'corrupted':
        _, height, width = generator.data_shape
        mask_np = render_mask(train_config.mask_spec or MaskSpec('center'), height, width)
        mask_tensor = torch.from_numpy(mask_np.astype(np.float32)).view(1, 1, height, width)

    g_opt = torch.optim.Adam(generator.parameters(), lr=train_config.learning_rate,
                             betas=(train_config.beta1, train_config.beta2))
    d_opt = torch.optim.Adam(d_set.parameters(), lr=train_config.learning_rate,
                             betas=(train_config.beta1, train_config.beta2))

    frozen = []
    if feature_extractor is not None and hasattr(feature_extractor, 'net'):
        feature_extractor.net.eval()
        frozen = [p for p in feature_extractor.net.parameters() if p.requires_grad]
        for p in frozen:
            p.requires_grad_(False)

    batch = train_config.batch_size
    traces = []

    def real_batch():
        return data[torch.randint(len(data), (batch,), generator=torch_gen)]

    def latent_batch():
        return torch.randn(batch, generator.latent_dim, generator=torch_gen)

    def window():
        if d_set.local_d is None:
            return None
        return patch_window(mask_np, d_set.patch_size, rng)

    generator.train()
    d_set.train()
    try:
        steps = tqdm(range(train_config.iterations), desc=f"Prior ({aux_mode})", disable=not verbose)
        for step in steps:
            for _ in range(train_config.critic_steps):
                real = real_batch()
                aux_image, aux_mask = make_aux_batch(real, aux_mode, mask_tensor, train_config)
                with torch.no_grad():
                    fake = generator.generate(latent_batch(), aux_image, aux_mask)
                win = window()
                critic_loss, _ = wgan_losses(d_set, real, fake, win)
                penalty = gradient_penalty(d_set.global_d, real, fake, train_config.gp_weight, torch_gen)
                if d_set.local_d is not None:
                    p = d_set.patch_size
                    penalty = penalty + gradient_penalty(d_set.local_d, crop(real, win, p),
                                                         crop(fake, win, p), train_config.gp_weight,
                                                         torch_gen)
                d_opt.zero_grad()
                (critic_loss + penalty).backward()
                d_opt.step()

            real = real_batch()
            aux_image, aux_mask = make_aux_batch(real, aux_mode, mask_tensor, train_config)
            z = latent_batch()
            raw = generator(z, aux_image, aux_mask)
            fake = raw if aux_mode != 'corrupted' else torch.where(aux_mask == 1, raw, aux_image)
            _, adversarial = wgan_losses(d_set, real, fake, window())
            gen_loss = adversarial

            diversity = None
            if train_config.lambda_div > 0:
                h = batch // 2
                aux_half = aux_image[:h] if aux_image is not None else None
                mask_half = aux_mask[:h] if aux_mask is not None else None
                diversity = diversity_loss(lambda zz: generator.generate(zz, aux_half, mask_half),
                                           features, z[:h], z[h:2 * h], train_config.strict_diversity)
                gen_loss = gen_loss - train_config.lambda_div * diversity

            reconstruction = None
            if aux_mode != 'none' and train_config.reconstruction_weight > 0:
                reconstruction = reconstruction_loss(raw, aux_image, aux_mask, aux_mode, train_config)
                gen_loss = gen_loss + train_config.reconstruction_weight * reconstruction

            g_opt.zero_grad()
            gen_loss.backward()
            g_opt.step()

            row = {
                'step': step,
                'critic_loss': float(critic_loss),
                'gen_loss': float(gen_loss),
                'diversity': float(diversity) if diversity is not None else None,
                'penalty': float(penalty),
                'wasserstein': -float(critic_loss),
                'reconstruction': float(reconstruction) if reconstruction is not None else None,
            }
            traces.append(row)
            if not _finite(critic_loss, gen_loss, penalty):
                raise TrainingDivergedError(f"Non-finite loss at step {step}", traces)
            if verbose and step % 100 == 0:
                steps.set_postfix(w=row['wasserstein'], g=row['gen_loss'])
    finally:
        for p in frozen:
            p.requires_grad_(True)

    generator.eval()
    d_set.eval()

    if verbose:
        print(f"✓ Prior trained for {train_config.iterations} generator steps")

    return PriorCheckpoint(generator, d_set, config.digest(train_config.to_dict()),
                           feature_digest if train_config.lambda_div > 0 else None,
                           traces, train_config.to_dict())


def aux_tensors(aux, dtype=torch.float32):
    """(image, mask) tensors with a leading batch axis for AuxKnowledge."""
    if aux is None or aux.mode == 'none':
        return None, None
    image = torch.as_tensor(aux.image, dtype=dtype).unsqueeze(0)
    mask = None
    if aux.mask is not None:
        mask = torch.as_tensor(aux.mask, dtype=dtype).view(1, 1, *aux.mask.shape)
    return image, mask


def check_aux_mode(generator, aux):
    mode = aux.mode if aux is not None else 'none'
    if mode != generator.aux_mode:
        raise AuxModeMismatchError(
            f"Auxiliary knowledge mode '{mode}' does not match generator mode '{generator.aux_mode}'"
        )


@torch.no_grad()
def sample_prior(generator, z, aux=None):
    """
    Images from a frozen generator.

    Args:
        generator: Trained generator
        z (array-like): latent_dim vector or NxLatent batch
        aux (AuxKnowledge): Required unless the generator's mode is 'none'

    Returns:
        np.ndarray: CxHxW or NxCxHxW images in [0, 1]; corrupted mode keeps
        the visible auxiliary pixels
    """
    check_aux_mode(generator, aux)
    generator.eval()
    z = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    single = z.dim() == 1
    if single:
        z = z.unsqueeze(0)
    aux_image, aux_mask = aux_tensors(aux)
    images = generator.generate(z, aux_image, aux_mask).clamp(0.0, 1.0).numpy()
    return images[0] if single else images


def save_traces_csv(traces, output_path):
    """Loss traces as CSV (empty cells for absent terms)."""
    os.makedirs(os.path.dirname(output_path) or '.', exist_ok=True)
    with open(output_path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        for row in traces:
            writer.writerow({k: ('' if row.get(k) is None else row[k]) for k in TRACE_FIELDS})
