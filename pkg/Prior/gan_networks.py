"""
GAN Prior Networks Module
Generator (latent encoder, optional auxiliary encoder, decoder) and the
global / local critics used to distill a prior from public images.
"""

import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import AuxModeMismatchError, ParameterError, ShapeMismatchError

# Per image edge: latent base grid, deconv widths, auxiliary encoder rows
# (kernel, dilation, stride, outputs), decoder widths, global critic widths
_LAYOUTS = {
    64: {
        'lower_base': (512, 4),
        'lower_deconvs': (256, 128),
        'upper': ((5, 1, 1, 32), (3, 1, 2, 64), (3, 1, 1, 128), (3, 1, 2, 128),
                  (3, 1, 1, 128), (3, 1, 1, 128), (3, 2, 1, 128), (3, 4, 1, 128),
                  (3, 8, 1, 128), (3, 16, 1, 128)),
        'decoder_deconvs': (128, 64),
        'decoder_convs': (32,),
        'global_widths': (64, 128, 256, 512),
    },
    28: {
        'lower_base': (128, 7),
        'lower_deconvs': (64,),
        'upper': ((5, 1, 1, 16), (3, 1, 2, 32), (3, 1, 1, 32), (3, 2, 1, 32), (3, 4, 1, 32)),
        'decoder_deconvs': (32,),
        'decoder_convs': (16,),
        'global_widths': (64, 128, 256),
    },
}

LOCAL_WIDTHS = (64, 128, 256)


def _deconv(c_in, c_out):
    """5x5 transposed conv that doubles the spatial size."""
    return [nn.ConvTranspose2d(c_in, c_out, 5, stride=2, padding=2, output_padding=1),
            nn.BatchNorm2d(c_out), nn.ReLU()]


def _conv(c_in, c_out, kernel, dilation=1, stride=1):
    padding = dilation * (kernel - 1) // 2
    return [nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=padding, dilation=dilation),
            nn.BatchNorm2d(c_out), nn.ReLU()]


def to_signed(images):
    """[0, 1] -> [-1, 1]"""
    return images * 2.0 - 1.0


def composite(raw, aux_image, aux_mask):
    """
    Keep visible auxiliary pixels, take generated pixels where the mask is 1.

    Args:
        raw (torch.Tensor): NxCxHxW generated images
        aux_image (torch.Tensor): NxCxHxW (or 1xCxHxW) corrupted images
        aux_mask (torch.Tensor): Nx1xHxW (or 1x1xHxW) binary mask, 1 = hidden
    """
    return torch.where(aux_mask == 1, raw, aux_image.expand_as(raw))


class PriorGenerator(nn.Module):
    """
    Shared generator interface.

    forward(z, aux_image, aux_mask) returns the raw generated image in [0, 1];
    generate() additionally composites visible pixels for corrupted mode.
    """

    data_shape = None
    latent_dim = None
    aux_mode = 'none'

    def _check_aux(self, z, aux_image, aux_mask):
        if self.aux_mode == 'none':
            return None, None
        if aux_image is None or (self.aux_mode == 'corrupted' and aux_mask is None):
            raise AuxModeMismatchError(
                f"Generator with aux mode '{self.aux_mode}' needs an auxiliary payload"
            )
        if tuple(aux_image.shape[1:]) != tuple(self.data_shape):
            raise ShapeMismatchError(
                f"Auxiliary image shape {tuple(aux_image.shape[1:])} != data shape {self.data_shape}"
            )
        n = z.shape[0]
        aux_image = aux_image.expand(n, *aux_image.shape[1:]) if aux_image.shape[0] == 1 else aux_image
        if aux_mask is not None and aux_mask.shape[0] == 1:
            aux_mask = aux_mask.expand(n, *aux_mask.shape[1:])
        return aux_image, aux_mask

    def generate(self, z, aux_image=None, aux_mask=None):
        raw = self(z, aux_image, aux_mask)
        if self.aux_mode == 'corrupted':
            return composite(raw, aux_image, aux_mask)
        return raw

    def describe(self):
        raise NotImplementedError


class Generator(PriorGenerator):
    """
    Convolutional generator.

    The lower encoder maps z to a feature grid; with auxiliary knowledge an
    upper encoder (strided then dilated convolutions) maps the corrupted
    image + mask, or the blurred image, to a grid of the same size. The
    decoder upsamples the concatenation back to the data shape.
    """

    def __init__(self, data_shape, latent_dim, aux_mode='none'):
        super().__init__()
        self.data_shape = tuple(int(d) for d in data_shape)
        self.latent_dim = int(latent_dim)
        self.aux_mode = aux_mode
        channels, size = self.data_shape[0], self.data_shape[1]
        layout = _LAYOUTS[size]

        base_c, base_size = layout['lower_base']
        self.lower_linear = nn.Sequential(
            nn.Linear(self.latent_dim, base_c * base_size * base_size),
            nn.BatchNorm1d(base_c * base_size * base_size),
            nn.ReLU(),
        )
        self._base = (base_c, base_size, base_size)

        layers, c_in = [], base_c
        for width in layout['lower_deconvs']:
            layers += _deconv(c_in, width)
            c_in = width
        self.lower = nn.Sequential(*layers)
        decoder_in = c_in

        self.upper = None
        if aux_mode != 'none':
            layers = []
            c_in = channels + 1 if aux_mode == 'corrupted' else channels
            for kernel, dilation, stride, width in layout['upper']:
                layers += _conv(c_in, width, kernel, dilation, stride)
                c_in = width
            self.upper = nn.Sequential(*layers)
            decoder_in += c_in

        layers, c_in = [], decoder_in
        for width in layout['decoder_deconvs']:
            layers += _deconv(c_in, width)
            c_in = width
        for width in layout['decoder_convs']:
            layers += _conv(c_in, width, 3)
            c_in = width
        layers += [nn.Conv2d(c_in, channels, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*layers)

    def forward(self, z, aux_image=None, aux_mask=None):
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ShapeMismatchError(f"Latent batch must be Nx{self.latent_dim}, got {tuple(z.shape)}")
        aux_image, aux_mask = self._check_aux(z, aux_image, aux_mask)

        h = self.lower(self.lower_linear(z).view(-1, *self._base))
        if self.upper is not None:
            aux_input = to_signed(aux_image)
            if self.aux_mode == 'corrupted':
                aux_input = torch.cat([aux_input, aux_mask.to(aux_input.dtype)], dim=1)
            h = torch.cat([h, self.upper(aux_input)], dim=1)

        return (self.decoder(h) + 1.0) / 2.0

    def describe(self):
        return {'kind': 'conv', 'data_shape': self.data_shape,
                'latent_dim': self.latent_dim, 'aux_mode': self.aux_mode}


class MLPGenerator(PriorGenerator):
    """Small fully connected generator for low-dimensional toy data (no aux)."""

    def __init__(self, data_shape, latent_dim, hidden_dim=16):
        super().__init__()
        self.data_shape = tuple(int(d) for d in data_shape)
        self.latent_dim = int(latent_dim)
        self.hidden_dim = int(hidden_dim)
        self.net = nn.Sequential(
            nn.Linear(self.latent_dim, self.hidden_dim), nn.Tanh(),
            nn.Linear(self.hidden_dim, int(np.prod(self.data_shape))), nn.Sigmoid(),
        )

    def forward(self, z, aux_image=None, aux_mask=None):
        return self.net(z).view(-1, *self.data_shape)

    def describe(self):
        return {'kind': 'mlp', 'data_shape': self.data_shape,
                'latent_dim': self.latent_dim, 'hidden_dim': self.hidden_dim}


class ConvCritic(nn.Module):
    """
    5x5 stride-2 convolutions down to a grid of at most 4x4, then a 1x1
    stride-4 convolution to one unbounded score per image.
    """

    def __init__(self, input_shape, widths):
        super().__init__()
        self.input_shape = tuple(int(d) for d in input_shape)
        self.widths = tuple(widths)
        layers, c_in = [], self.input_shape[0]
        for width in self.widths:
            layers += [nn.Conv2d(c_in, width, 5, stride=2, padding=2), nn.LeakyReLU(0.2)]
            c_in = width
        layers.append(nn.Conv2d(c_in, 1, 1, stride=4))
        self.net = nn.Sequential(*layers)

    def forward(self, images):
        if tuple(images.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(
                f"Critic expects {self.input_shape}, got {tuple(images.shape[1:])}"
            )
        return self.net(to_signed(images)).mean(dim=(1, 2, 3))

    def describe(self):
        return {'kind': 'conv', 'input_shape': self.input_shape, 'widths': self.widths}


class MLPCritic(nn.Module):
    """Fully connected critic for toy data."""

    def __init__(self, input_shape, hidden_dim=16):
        super().__init__()
        self.input_shape = tuple(int(d) for d in input_shape)
        self.hidden_dim = int(hidden_dim)
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(int(np.prod(self.input_shape)), self.hidden_dim), nn.LeakyReLU(0.2),
            nn.Linear(self.hidden_dim, 1),
        )

    def forward(self, images):
        return self.net(images).squeeze(1)

    def describe(self):
        return {'kind': 'mlp', 'input_shape': self.input_shape, 'hidden_dim': self.hidden_dim}


class DiscriminatorSet(nn.Module):
    """
    Global critic plus an optional local critic on boundary patches.
    The two scores stay separate.
    """

    def __init__(self, global_d, local_d=None):
        super().__init__()
        self.global_d = global_d
        self.local_d = local_d

    @property
    def patch_size(self):
        if self.local_d is None:
            return None
        return self.local_d.input_shape[-1]


def local_patch_size(data_shape):
    """Local critic patch edge for an image shape."""
    return max(1, int(round(data_shape[-1] * config.LOCAL_PATCH_FRACTION)))


def build_prior_networks(data_shape, latent_dim=config.LATENT_DIM, aux_mode='none', seed=0):
    """
    Build an untrained generator and its critics.

    Args:
        data_shape (tuple): (C, H, W); one of config.SUPPORTED_PRIOR_SHAPES
        latent_dim (int): Dimension of z (> 0)
        aux_mode (str): 'none', 'corrupted' or 'blurred'
        seed (int): Initialization seed

    Returns:
        tuple: (Generator, DiscriminatorSet); the set has a local critic
        only for corrupted mode

    Raises:
        ParameterError: Bad latent_dim, aux mode or unsupported data shape
    """
    if latent_dim <= 0:
        raise ParameterError(f"latent_dim must be positive, got {latent_dim}")
    if aux_mode not in config.AUX_MODES:
        raise ParameterError(f"Unknown auxiliary mode '{aux_mode}', expected one of {config.AUX_MODES}")
    data_shape = tuple(int(d) for d in data_shape)
    if data_shape not in config.SUPPORTED_PRIOR_SHAPES:
        raise ParameterError(
            f"Unsupported data shape {data_shape}, expected one of {config.SUPPORTED_PRIOR_SHAPES}"
        )

    torch.manual_seed(seed)
    generator = Generator(data_shape, latent_dim, aux_mode)
    global_d = ConvCritic(data_shape, _LAYOUTS[data_shape[1]]['global_widths'])

    local_d = None
    if aux_mode == 'corrupted':
        p = local_patch_size(data_shape)
        local_d = ConvCritic((data_shape[0], p, p), LOCAL_WIDTHS)

    return generator, DiscriminatorSet(global_d, local_d)


def build_toy_networks(data_shape, latent_dim, hidden_dim=16, seed=0):
    """MLP generator and critic for low-dimensional data."""
    if latent_dim <= 0:
        raise ParameterError(f"latent_dim must be positive, got {latent_dim}")
    torch.manual_seed(seed)
    return (MLPGenerator(data_shape, latent_dim, hidden_dim),
            DiscriminatorSet(MLPCritic(data_shape, hidden_dim)))


def networks_from_description(generator_desc, global_desc, local_desc=None):
    """Rebuild untrained networks from describe() payloads."""
    if generator_desc['kind'] == 'mlp':
        generator = MLPGenerator(generator_desc['data_shape'], generator_desc['latent_dim'],
                                 generator_desc['hidden_dim'])
    else:
        generator = Generator(generator_desc['data_shape'], generator_desc['latent_dim'],
                              generator_desc['aux_mode'])

    def critic(desc):
        if desc is None:
            return None
        if desc['kind'] == 'mlp':
            return MLPCritic(desc['input_shape'], desc['hidden_dim'])
        return ConvCritic(desc['input_shape'], desc['widths'])

    return generator, DiscriminatorSet(critic(global_desc), critic(local_desc))
