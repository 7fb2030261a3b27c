"""
Auxiliary Knowledge Module
Synthesizes the attacker's side information: occlusion masks, corrupted images and blurred images.
"""

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import ParameterError, ShapeMismatchError

MASK_KINDS = ('center', 'face_t')

# Geometry keys that are offsets (may be 0) rather than sizes
_OFFSET_KEYS = ('band_top', 'strip_top')


@dataclass
class MaskSpec:
    """Occlusion pattern: kind plus geometry fractions (see config)."""
    kind: str = 'center'
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ParameterError(f"Unknown mask kind '{self.kind}', expected one of {MASK_KINDS}")
        merged = config.default_mask_geometry(self.kind)
        merged.update(self.geometry)
        self.geometry = merged

        for key, value in self.geometry.items():
            if key in _OFFSET_KEYS:
                valid = 0.0 <= value < 1.0
            else:
                valid = 0.0 < value <= 1.0
            if not valid:
                raise ParameterError(f"Mask fraction '{key}'={value} out of range")

        g = self.geometry
        if self.kind == 'face_t':
            if g['band_top'] + g['band_height'] > 1.0 + 1e-9:
                raise ParameterError("Eye band extends past the image bottom")
            if g['strip_top'] + g['strip_height'] > 1.0 + 1e-9:
                raise ParameterError("Vertical strip extends past the image bottom")


@dataclass
class AuxKnowledge:
    """
    Attacker side information.

    mode 'none' carries nothing, 'corrupted' carries image + binary mask
    (1 = hidden), 'blurred' carries image.
    """
    mode: str = 'none'
    image: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in config.AUX_MODES:
            raise ParameterError(f"Unknown auxiliary mode: {self.mode}")
        if self.mode != 'none' and self.image is None:
            raise ParameterError(f"Auxiliary mode '{self.mode}' requires an image")
        if self.mode == 'corrupted' and self.mask is None:
            raise ParameterError("Corrupted auxiliary knowledge requires a mask")


def _span(start_fraction, size_fraction, n):
    """Pixel interval [start, end) for fractional start/size, clipped to n."""
    start = int(round(start_fraction * n))
    end = min(n, start + int(round(size_fraction * n)))
    return start, end


def render_mask(spec, height, width):
    """
    Render a binary occlusion mask.

    Args:
        spec (MaskSpec): Mask kind and geometry
        height (int): Image height
        width (int): Image width

    Returns:
        np.ndarray: uint8 HxW array, 1 = hidden pixel
    """
    if height <= 0 or width <= 0:
        raise ParameterError(f"Mask size must be positive, got {height}x{width}")

    mask = np.zeros((height, width), dtype=np.uint8)
    g = spec.geometry

    if spec.kind == 'center':
        box_h = int(round(g['height'] * height))
        box_w = int(round(g['width'] * width))
        top = (height - box_h) // 2
        left = (width - box_w) // 2
        mask[top:top + box_h, left:left + box_w] = 1
    else:
        band_top, band_bottom = _span(g['band_top'], g['band_height'], height)
        mask[band_top:band_bottom, :] = 1

        strip_w = int(round(g['strip_width'] * width))
        strip_left = (width - strip_w) // 2
        strip_top, strip_bottom = _span(g['strip_top'], g['strip_height'], height)
        mask[strip_top:strip_bottom, strip_left:strip_left + strip_w] = 1

    return mask


def save_mask_png(mask, output_path):
    """Export a mask for inspection (hidden pixels white)."""
    os.makedirs(os.path.dirname(output_path) or '.', exist_ok=True)
    cv2.imwrite(output_path, mask.astype(np.uint8) * 255)
    return output_path


def apply_corruption(sample, mask):
    """
    Zero out the hidden pixels of a sample.

    Args:
        sample (ImageSample): Source sample (left unmodified)
        mask (np.ndarray): Binary HxW mask, 1 = hidden

    Returns:
        AuxKnowledge: mode 'corrupted'

    Raises:
        ShapeMismatchError: If mask and image spatial shapes differ
    """
    image = sample.image
    if mask.shape != image.shape[1:]:
        raise ShapeMismatchError(
            f"Mask shape {mask.shape} does not match image spatial shape {image.shape[1:]}"
        )

    binary = (mask != 0).astype(np.uint8)
    corrupted = np.where(binary[np.newaxis, :, :] == 1, np.float32(0.0), image).astype(np.float32)
    return AuxKnowledge(mode='corrupted', image=corrupted, mask=binary)


def gaussian_kernel(kernel_sigma, kernel_size):
    """Normalized 1-D Gaussian kernel (float64, column vector)."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if kernel_sigma <= 0:
        raise ParameterError(f"kernel_sigma must be positive, got {kernel_sigma}")
    return cv2.getGaussianKernel(int(kernel_size), float(kernel_sigma), ktype=cv2.CV_64F)


def blur_image(image, kernel_sigma=config.BLUR_SIGMA, kernel_size=config.BLUR_KERNEL_SIZE):
    """
    Gaussian blur of a CxHxW array with reflect padding.

    Returns:
        np.ndarray: float32 blurred image clipped to [0, 1]
    """
    kernel = gaussian_kernel(kernel_sigma, kernel_size)
    channels = [
        cv2.sepFilter2D(channel.astype(np.float64), cv2.CV_64F, kernel, kernel,
                        borderType=cv2.BORDER_REFLECT)
        for channel in image
    ]
    return np.clip(np.stack(channels), 0.0, 1.0).astype(np.float32)


def apply_blur(sample, kernel_sigma=config.BLUR_SIGMA, kernel_size=config.BLUR_KERNEL_SIZE):
    """
    Blur a sample with a normalized Gaussian kernel.

    Args:
        sample (ImageSample): Source sample
        kernel_sigma (float): Gaussian standard deviation (> 0)
        kernel_size (int): Odd kernel edge length

    Returns:
        AuxKnowledge: mode 'blurred'
    """
    return AuxKnowledge(mode='blurred', image=blur_image(sample.image, kernel_sigma, kernel_size))


def make_aux(sample, mode, mask=None, kernel_sigma=config.BLUR_SIGMA,
             kernel_size=config.BLUR_KERNEL_SIZE):
    """Build the auxiliary knowledge of the requested mode for one sample."""
    if mode == 'none':
        return AuxKnowledge(mode='none')
    elif mode == 'corrupted':
        return apply_corruption(sample, mask)
    elif mode == 'blurred':
        return apply_blur(sample, kernel_sigma, kernel_size)
    raise ParameterError(f"Unknown auxiliary mode: {mode}")
