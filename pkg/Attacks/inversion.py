"""
Inversion Attacks Module
Secret revelation: latent optimization against prior + identity losses (GMI),
the pixel-space identity-only baseline (EMI) and the prior-only baseline (PII).
"""

import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
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
from exceptions import AttackFailedError, ParameterError, ShapeMismatchError
from Prior.gan_trainer import aux_tensors, check_aux_mode, crop, patch_window

INVERSION_OPTIMIZERS = ('sgd_momentum', 'sgd_nesterov')
TRACE_FIELDS = ['iteration', 'total', 'prior', 'identity']


@dataclass
class InversionConfig:
    """Stage-2 settings. Each of `batch_size` latents is an independent candidate."""
    lambda_id: float = config.LAMBDA_ID
    restarts: int = config.INVERSION_RESTARTS
    iterations: int = config.INVERSION_ITERATIONS
    optimizer: str = config.INVERSION_OPTIMIZER
    learning_rate: float = config.INVERSION_LEARNING_RATE
    momentum: float = config.INVERSION_MOMENTUM
    batch_size: int = config.INVERSION_BATCH_SIZE
    seed: int = 0
    # None leaves z unconstrained; a bound projects z onto [-bound, bound]
    latent_clamp: Optional[float] = None
    # Assert EMI pixels stay in [0, 1] after every step
    check_pixel_range: bool = False

    def __post_init__(self):
        if self.restarts < 1:
            raise ParameterError(f"restarts must be >= 1, got {self.restarts}")
        if self.iterations < 0:
            raise ParameterError(f"iterations must be >= 0, got {self.iterations}")
        if self.lambda_id < 0:
            raise ParameterError(f"lambda_id must be >= 0, got {self.lambda_id}")
        if self.optimizer not in INVERSION_OPTIMIZERS:
            raise ParameterError(f"Unknown optimizer '{self.optimizer}', expected one of {INVERSION_OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.latent_clamp is not None and self.latent_clamp <= 0:
            raise ParameterError(f"latent_clamp must be positive, got {self.latent_clamp}")

    @classmethod
    def for_mnist(cls, **overrides):
        """Nesterov momentum, lr 0.01, 3000 iterations."""
        base = cls(optimizer=config.MNIST_INVERSION_OPTIMIZER,
                   learning_rate=config.MNIST_INVERSION_LEARNING_RATE,
                   iterations=config.MNIST_INVERSION_ITERATIONS)
        return replace(base, **overrides)

    def to_dict(self):
        return asdict(self)


@dataclass
class AttackResult:
    """
    One reconstruction.

    restart_losses[r] holds the final 'prior' / 'identity' losses of the best
    candidate of restart r (None when the term does not apply) and 'aborted'.
    """
    attack: str
    label: int
    aux_mode: str
    image: np.ndarray
    chosen_restart: int
    restart_losses: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    latent: Optional[np.ndarray] = None
    seed: int = 0
    config_digest: str = ''

    @property
    def identity_loss(self):
        return self.restart_losses[self.chosen_restart]['identity']

    @property
    def prior_loss(self):
        return self.restart_losses[self.chosen_restart]['prior']


def identity_loss(target, images, label, reduction='mean'):
    """
    -log max(p_target(label | image), floor).

    Args:
        target (ClassifierModel): Target network
        images (torch.Tensor): NxCxHxW batch
        label (int): Original label id
        reduction (str): 'mean', 'sum' or 'none'

    Raises:
        ParameterError: If the label is not one of the target's classes
    """
    index = target.class_index(int(label))
    nll = -F.log_softmax(target.logits(images), dim=1)[:, index]
    losses = nll.clamp(max=-np.log(config.PROBABILITY_FLOOR))
    return _reduce(losses, reduction)


def prior_loss(discriminators, images, window=None, reduction='mean'):
    """
    -D(image), plus -D_local(patch) when a local critic and window are given.

    Raises:
        ShapeMismatchError: Image shape differs from the critic input
    """
    losses = -discriminators.global_d(images)
    if discriminators.local_d is not None and window is not None:
        losses = losses - discriminators.local_d(crop(images, window, discriminators.patch_size))
    return _reduce(losses, reduction)


def _reduce(losses, reduction):
    if reduction == 'mean':
        return losses.mean()
    elif reduction == 'sum':
        return losses.sum()
    elif reduction == 'none':
        return losses
    raise ParameterError(f"Unknown reduction: {reduction}")


def _eval_mode(*modules):
    """Eval mode for every network an attack reads; parameter flags stay untouched."""
    for module in modules:
        if module is not None:
            module.eval()


def _make_optimizer(params, inversion_config):
    return torch.optim.SGD(params, lr=inversion_config.learning_rate,
                           momentum=inversion_config.momentum,
                           nesterov=inversion_config.optimizer == 'sgd_nesterov')


def _restart_generator(seed, restart):
    generator = torch.Generator()
    generator.manual_seed(seed * 1009 + restart)
    return generator


def _finite(value):
    return bool(torch.isfinite(value).all())


def _select_restart(restart_losses, key):
    """Index of the non-aborted restart with the lowest final `key` loss."""
    candidates = [(r['final'][key], i) for i, r in enumerate(restart_losses) if not r['aborted']]
    if not candidates:
        raise AttackFailedError("Every restart aborted with a non-finite loss")
    return min(candidates)[1]


def _latent_search(prior, target, label, aux, inversion_config, attack, verbose):
    """Shared GMI / PII loop over restarts and candidate latents."""
    generator, d_set = prior.generator, prior.discriminators
    check_aux_mode(generator, aux)
    use_identity = target is not None and inversion_config.lambda_id > 0
    record_identity = target is not None

    aux_image, aux_mask = aux_tensors(aux)
    window = None
    if d_set.local_d is not None:
        window = patch_window(aux.mask, d_set.patch_size, inversion_config.seed)

    def losses(z):
        images = generator.generate(z, aux_image, aux_mask)
        lp = prior_loss(d_set, images, window, reduction='none')
        li = identity_loss(target, images, label, reduction='none') if record_identity else None
        return images, lp, li

    restarts, traces, latents = [], [], []
    _eval_mode(generator, d_set, target.net if target is not None else None)
    for r in tqdm(range(inversion_config.restarts), desc=f"{attack.upper()} label {label}",
                  disable=not verbose):
        torch_gen = _restart_generator(inversion_config.seed, r)
        z = torch.randn(inversion_config.batch_size, generator.latent_dim,
                        generator=torch_gen).requires_grad_(True)
        optimizer = _make_optimizer([z], inversion_config)
        trace, aborted = [], False

        for it in range(inversion_config.iterations):
            images = generator.generate(z, aux_image, aux_mask)
            lp = prior_loss(d_set, images, window, reduction='none')
            total = lp
            li = None
            if use_identity:
                li = identity_loss(target, images, label, reduction='none')
                total = lp + inversion_config.lambda_id * li
            if not _finite(total):
                aborted = True
                break

            # Only the latent receives a gradient; shared networks stay untouched
            z.grad, = torch.autograd.grad(total.sum(), [z])
            optimizer.step()
            if inversion_config.latent_clamp is not None:
                with torch.no_grad():
                    z.clamp_(-inversion_config.latent_clamp, inversion_config.latent_clamp)

            trace.append({
                'iteration': it,
                'total': float(total.mean()),
                'prior': float(lp.mean()),
                'identity': float(li.mean()) if li is not None else None,
            })

        with torch.no_grad():
            images, lp, li = losses(z)
        if not aborted and not (_finite(lp) and (li is None or _finite(li))):
            aborted = True

        key_losses = li if use_identity else lp
        best = int(torch.argmin(key_losses)) if not aborted else 0
        restarts.append({
            'aborted': aborted,
            'final': {
                'prior': float(lp[best]),
                'identity': float(li[best]) if li is not None else None,
            },
            'image': images[best].numpy().copy(),
            'latent': z[best].detach().numpy().copy(),
        })
        traces.append(trace)
        if aborted and verbose:
            print(f"⚠ {attack.upper()} restart {r} aborted (non-finite loss)")

    chosen = _select_restart(restarts, 'identity' if use_identity else 'prior')
    return AttackResult(
        attack=attack,
        label=int(label),
        aux_mode=generator.aux_mode,
        image=restarts[chosen]['image'],
        chosen_restart=chosen,
        restart_losses=[{**r['final'], 'aborted': r['aborted']} for r in restarts],
        traces=traces,
        latent=restarts[chosen]['latent'],
        seed=inversion_config.seed,
        config_digest=config.digest(inversion_config.to_dict()),
    )


def gmi_invert(prior, target, label, aux=None, inversion_config=None, verbose=False):
    """
    Generative model inversion.

    Minimizes L_prior(z) + lambda_id * L_id(z) over z from N(0, I), keeping
    the restart whose best candidate has the lowest final identity loss.
    With lambda_id = 0 the identity term is left out and restarts are ranked
    by prior loss, which makes the result identical to pii_inpaint.

    Args:
        prior (PriorCheckpoint): Trained generator and critics
        target (ClassifierModel): Network under attack
        label (int): Original label id to reconstruct
        aux (AuxKnowledge): Side information matching the prior's mode
        inversion_config (InversionConfig): Optimization settings

    Returns:
        AttackResult

    Raises:
        AuxModeMismatchError: aux mode differs from the generator's
        AttackFailedError: Every restart produced a non-finite loss
    """
    inversion_config = inversion_config or InversionConfig()
    target.class_index(int(label))
    return _latent_search(prior, target, label, aux, inversion_config, 'gmi', verbose)


def pii_inpaint(prior, aux=None, inversion_config=None, label=None, verbose=False):
    """
    Prior-only recovery: the GMI loop without the identity term.

    Returns:
        AttackResult: identity losses recorded as None
    """
    inversion_config = inversion_config or InversionConfig()
    return _latent_search(prior, None, -1 if label is None else label, aux,
                          inversion_config, 'pii', verbose)


def emi_init(target_shape, aux):
    """EMI start: the auxiliary image when there is one, otherwise mid-gray."""
    if aux is not None and aux.mode != 'none':
        if tuple(aux.image.shape) != tuple(target_shape):
            raise ShapeMismatchError(
                f"Auxiliary image shape {aux.image.shape} != target input {tuple(target_shape)}"
            )
        return torch.as_tensor(aux.image, dtype=torch.float32).clone()
    return torch.full(tuple(target_shape), config.EMI_INIT_VALUE, dtype=torch.float32)


def emi_invert(target, label, aux=None, inversion_config=None, verbose=False):
    """
    Pixel-space inversion with the identity loss only.

    Pixels start from the auxiliary image (or mid-gray), are clamped to
    [0, 1] after each step, and in corrupted mode only hidden pixels move.
    Restart 0 starts exactly at the initialization; later restarts add
    seeded jitter.

    Returns:
        AttackResult: prior losses recorded as None
    """
    inversion_config = inversion_config or InversionConfig()
    target.class_index(int(label))
    aux_mode = aux.mode if aux is not None else 'none'
    init = emi_init(target.input_shape, aux)

    movable = None
    if aux_mode == 'corrupted':
        movable = torch.as_tensor(aux.mask, dtype=init.dtype).expand_as(init)

    restarts, traces = [], []
    _eval_mode(target.net)
    for r in tqdm(range(inversion_config.restarts), desc=f"EMI label {label}", disable=not verbose):
        start = init.clone()
        if r > 0:
            noise = torch.randn(start.shape, generator=_restart_generator(inversion_config.seed, r))
            jitter = config.EMI_RESTART_JITTER * noise
            if movable is not None:
                jitter = jitter * movable
            start = (start + jitter).clamp(0.0, 1.0)

        x = start.unsqueeze(0).requires_grad_(True)
        optimizer = _make_optimizer([x], inversion_config)
        trace, aborted = [], False

        for it in range(inversion_config.iterations):
            loss = identity_loss(target, x, label, reduction='sum')
            if not _finite(loss):
                aborted = True
                break
            x.grad, = torch.autograd.grad(loss, [x])
            if movable is not None:
                x.grad.mul_(movable)
            optimizer.step()
            with torch.no_grad():
                x.clamp_(0.0, 1.0)
                if movable is not None:
                    x.copy_(torch.where(movable == 1, x, init))
            if inversion_config.check_pixel_range:
                assert float(x.min()) >= 0.0 and float(x.max()) <= 1.0, "EMI pixel left [0, 1]"
            trace.append({'iteration': it, 'total': float(loss), 'prior': None,
                          'identity': float(loss)})

        with torch.no_grad():
            final = identity_loss(target, x, label, reduction='sum')
        aborted = aborted or not _finite(final)
        restarts.append({
            'aborted': aborted,
            'final': {'prior': None, 'identity': float(final)},
            'image': x.detach()[0].numpy().copy(),
        })
        traces.append(trace)

    chosen = _select_restart(restarts, 'identity')
    return AttackResult(
        attack='emi',
        label=int(label),
        aux_mode=aux_mode,
        image=restarts[chosen]['image'],
        chosen_restart=chosen,
        restart_losses=[{**r['final'], 'aborted': r['aborted']} for r in restarts],
        traces=traces,
        seed=inversion_config.seed,
        config_digest=config.digest(inversion_config.to_dict()),
    )


def image_to_uint8(image):
    """CxHxW [0, 1] float -> HxW or HxWx3 (BGR) uint8 for cv2.imwrite."""
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[0] == 1:
        return pixels[0]
    return cv2.cvtColor(np.transpose(pixels, (1, 2, 0)), cv2.COLOR_RGB2BGR)


def save_attack_result(result, output_dir):
    """
    Write an attack result directory: recon.png, one trace CSV per restart
    and metadata.json.

    Returns:
        str: The directory path
    """
    os.makedirs(output_dir, exist_ok=True)
    cv2.imwrite(os.path.join(output_dir, 'recon.png'), image_to_uint8(result.image))

    for r, trace in enumerate(result.traces):
        with open(os.path.join(output_dir, f'restart_{r}.csv'), 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=TRACE_FIELDS)
            writer.writeheader()
            for row in trace:
                writer.writerow({k: ('' if row[k] is None else row[k]) for k in TRACE_FIELDS})

    metadata = {
        'attack': result.attack,
        'label': result.label,
        'aux_mode': result.aux_mode,
        'chosen_restart': result.chosen_restart,
        'restart_losses': result.restart_losses,
        'seed': result.seed,
        'config_digest': result.config_digest,
    }
    with open(os.path.join(output_dir, 'metadata.json'), 'w') as f:
        json.dump(metadata, f, indent=2)

    return output_dir
