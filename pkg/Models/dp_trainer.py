"""
Differentially Private Training Module
DP-SGD (per-sample clipping + Gaussian noise) and a Renyi-DP accountant
for the subsampled Gaussian mechanism.
"""

import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import gammaln, logsumexp
from torch.func import functional_call, grad, vmap
from tqdm import tqdm

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import ParameterError
from Models.trainer import to_tensors


@dataclass
class DPConfig:
    """DP-SGD settings; noise std on the summed gradient is noise_ratio * clip_norm."""
    clip_norm: float = config.DP_CLIP_NORM
    noise_ratio: float = 1.0
    delta: float = config.DP_DELTA
    epochs: int = config.DP_EPOCHS
    batch_size: int = config.DP_BATCH_SIZE
    learning_rate: Optional[float] = None
    seed: int = 0
    # Assert the clipping bound inside every step (test mode)
    check_clipping: bool = False

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ParameterError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_ratio < 0:
            raise ParameterError(f"noise_ratio must be >= 0, got {self.noise_ratio}")
        if not 0.0 < self.delta < 1.0:
            raise ParameterError(f"delta must be in (0, 1), got {self.delta}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate is None:
            self.learning_rate = config.dp_learning_rate(self.noise_ratio)
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")

    def to_dict(self):
        return asdict(self)


@dataclass
class PrivacyReport:
    """Accountant output for one training run."""
    epsilon: float
    delta: float
    noise_ratio: float
    sampling_rate: float
    steps: int
    orders: list = field(default_factory=list)
    rdp: list = field(default_factory=list)
    optimal_order: Optional[int] = None

    def to_dict(self):
        payload = asdict(self)
        payload['epsilon'] = config.format_metric(self.epsilon)
        return payload


def _log_a_integer_order(sampling_rate, noise_ratio, order):
    """log A_alpha for the sampled Gaussian mechanism at an integer order."""
    k = np.arange(order + 1, dtype=np.float64)
    log_binomial = gammaln(order + 1) - gammaln(k + 1) - gammaln(order - k + 1)
    log_terms = (log_binomial
                 + k * math.log(sampling_rate)
                 + (order - k) * math.log1p(-sampling_rate)
                 + (k * k - k) / (2.0 * noise_ratio ** 2))
    return float(logsumexp(log_terms))


def compute_rdp(noise_ratio, sampling_rate, steps, orders=config.ACCOUNTANT_ORDERS):
    """
    Renyi DP of `steps` compositions of the subsampled Gaussian mechanism.

    Args:
        noise_ratio (float): sigma (> 0)
        sampling_rate (float): q in (0, 1]
        steps (int): Number of noisy steps
        orders (sequence): Integer orders >= 2

    Returns:
        np.ndarray: RDP value per order
    """
    rdp = []
    for order in orders:
        if sampling_rate == 1.0:
            per_step = order / (2.0 * noise_ratio ** 2)
        else:
            per_step = _log_a_integer_order(sampling_rate, noise_ratio, order) / (order - 1)
        rdp.append(per_step * steps)
    return np.array(rdp)


def privacy_report(noise_ratio, sampling_rate, steps, delta, orders=config.ACCOUNTANT_ORDERS):
    """
    Epsilon at `delta`, minimized over the RDP orders, with the accountant trace.

    Returns:
        PrivacyReport
    """
    if delta <= 0 or delta >= 1:
        raise ParameterError(f"delta must be in (0, 1), got {delta}")
    if not 0.0 < sampling_rate <= 1.0:
        raise ParameterError(f"sampling_rate must be in (0, 1], got {sampling_rate}")
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    if noise_ratio < 0:
        raise ParameterError(f"noise_ratio must be >= 0, got {noise_ratio}")

    if noise_ratio == 0:
        return PrivacyReport(config.EPSILON_INFINITY, delta, noise_ratio, sampling_rate, steps)

    orders = np.array(orders, dtype=np.float64)
    rdp = compute_rdp(noise_ratio, sampling_rate, steps, orders.astype(int))
    epsilons = rdp + math.log(1.0 / delta) / (orders - 1)
    best = int(np.nanargmin(epsilons))

    return PrivacyReport(
        epsilon=float(epsilons[best]),
        delta=delta,
        noise_ratio=noise_ratio,
        sampling_rate=sampling_rate,
        steps=int(steps),
        orders=orders.astype(int).tolist(),
        rdp=rdp.tolist(),
        optimal_order=int(orders[best]),
    )


def compute_epsilon(noise_ratio, sampling_rate, steps, delta):
    """
    Epsilon spent by DP-SGD.

    Args:
        noise_ratio (float): sigma; 0 means no privacy (returns infinity)
        sampling_rate (float): q = batch_size / dataset size
        steps (int): Number of steps T
        delta (float): Target delta

    Returns:
        float: epsilon (config.EPSILON_INFINITY when sigma = 0)
    """
    return privacy_report(noise_ratio, sampling_rate, steps, delta).epsilon


def steps_for(n_samples, batch_size, epochs):
    """Number of DP-SGD steps for `epochs` passes in fixed-size batches."""
    return epochs * math.ceil(n_samples / batch_size)


def _per_sample_gradients(net, params, buffers, x, y):
    """Dict of per-sample gradients, each with a leading batch axis."""

    def sample_loss(p, xi, yi):
        logits = functional_call(net, (p, buffers), (xi.unsqueeze(0),))
        return F.cross_entropy(logits, yi.unsqueeze(0))

    return vmap(grad(sample_loss), in_dims=(None, 0, 0), randomness='different')(params, x, y)


def clip_per_sample(per_sample, clip_norm):
    """
    Scale each sample's gradient to L2 norm <= clip_norm.

    Returns:
        tuple: (clipped dict, per-sample norms before clipping)
    """
    flat = torch.cat([g.flatten(1) for g in per_sample.values()], dim=1)
    norms = flat.norm(dim=1)
    factors = (clip_norm / (norms + 1e-12)).clamp(max=1.0)
    clipped = {
        name: g * factors.view(-1, *([1] * (g.dim() - 1)))
        for name, g in per_sample.items()
    }
    return clipped, norms


def train_classifier_dp(model, train_set, dp_config, verbose=False):
    """
    Train with DP-SGD.

    Each step clips every per-sample gradient to L2 <= clip_norm, sums them,
    adds N(0, (noise_ratio * clip_norm)^2) noise and divides by the batch size.

    Args:
        model (ClassifierModel): Untrained model without batch norm
        train_set (list): Labelled ImageSample list
        dp_config (DPConfig): DP settings

    Returns:
        tuple: (model, PrivacyReport)
    """
    if not train_set:
        raise ParameterError("Training set is empty")
    if any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in model.net.modules()):
        raise ParameterError("Batch norm mixes samples and is incompatible with per-sample clipping")

    generator = config.seed_everything(dp_config.seed)
    x, y = to_tensors(model, train_set)
    net = model.net
    optimizer = torch.optim.SGD(net.parameters(), lr=dp_config.learning_rate)
    noise_std = dp_config.noise_ratio * dp_config.clip_norm

    steps = 0
    epochs = tqdm(range(dp_config.epochs), desc=f"DP-SGD sigma={dp_config.noise_ratio}",
                  disable=not verbose)
    for _ in epochs:
        net.train()
        order = torch.randperm(len(x), generator=generator)
        for start in range(0, len(x), dp_config.batch_size):
            batch = order[start:start + dp_config.batch_size]
            params = {name: p.detach() for name, p in net.named_parameters()}
            buffers = {name: b.detach() for name, b in net.named_buffers()}

            per_sample = _per_sample_gradients(net, params, buffers, x[batch], y[batch])
            clipped, _ = clip_per_sample(per_sample, dp_config.clip_norm)

            if dp_config.check_clipping:
                clipped_norms = torch.cat([g.flatten(1) for g in clipped.values()], dim=1).norm(dim=1)
                assert bool((clipped_norms <= dp_config.clip_norm + 1e-6).all()), \
                    "Per-sample gradient exceeds the clipping bound"

            for name, p in net.named_parameters():
                summed = clipped[name].sum(dim=0)
                if noise_std > 0:
                    summed = summed + noise_std * torch.randn(
                        summed.shape, generator=generator, dtype=summed.dtype)
                p.grad = summed / len(batch)

            optimizer.step()
            optimizer.zero_grad(set_to_none=True)
            steps += 1

    net.eval()
    # A batch larger than the data set samples every record each step
    sampling_rate = min(1.0, dp_config.batch_size / len(x))
    report = privacy_report(dp_config.noise_ratio, sampling_rate,
                            max(steps, 1), dp_config.delta)

    if verbose:
        print(f"✓ DP training done: {steps} steps, epsilon = {config.format_metric(report.epsilon)} "
              f"at delta = {dp_config.delta}")

    return model, report
