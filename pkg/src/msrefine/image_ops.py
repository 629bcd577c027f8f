"""Anti-aliased resampling, image pyramids and binary mask morphology.

Blur and resize are linear along each spatial axis, so both are expressed as
``rows @ X @ cols.T`` with explicit 1-D operator matrices (see
``tensor.separable_linear``). This keeps them graph-aware with an exact
adjoint as their backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ParameterError


def default_sigma(factor):
    """Blur sigma used before downscaling by ``factor``."""
    return factor / 2.0


def gaussian_kernel(sigma):
    """Normalized, symmetric 1-D Gaussian of length ``2*ceil(3*sigma) + 1``."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = math.ceil(3 * sigma)
    k = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(k * k) / (2.0 * sigma * sigma))
    w /= w.sum()
    # enforce exact symmetry after normalization
    return 0.5 * (w + w[::-1])


@lru_cache(maxsize=64)
def _blur_matrix(n, sigma):
    """n x n operator: 1-D Gaussian filter with replicate-edge padding."""
    kern = gaussian_kernel(sigma)
    r = len(kern) // 2
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for t in range(-r, r + 1):
        cols = np.clip(rows + t, 0, n - 1)
        np.add.at(mat, (rows, cols), kern[t + r])
    mat.flags.writeable = False
    return mat


@lru_cache(maxsize=64)
def _resize_matrix(n_out, n_in):
    """n_out x n_in bilinear operator with half-pixel centers and edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    mat.flags.writeable = False
    return mat


def gaussian_blur(image, sigma):
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    image = T.as_tensor(image)
    H, W = image.shape[-2:]
    return T.separable_linear(image, _blur_matrix(H, float(sigma)), _blur_matrix(W, float(sigma)),
                              op="gaussian_blur")


def bilinear_resize(image, out_h, out_w):
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be positive, got {(out_h, out_w)}")
    image = T.as_tensor(image)
    H, W = image.shape[-2:]
    return T.separable_linear(image, _resize_matrix(out_h, H), _resize_matrix(out_w, W),
                              op="bilinear_resize")


def downscaled_size(h, w, factor):
    return max(1, round(h / factor)), max(1, round(w / factor))


def downscale(image, factor=2.0, sigma_policy=default_sigma, size=None):
    """Gaussian blur followed by bilinear resize to ``round(H/factor) x round(W/factor)``.

    ``size`` overrides the target size (used when the caller's geometry is
    fixed by an existing pyramid level).
    """
    if not factor > 1:
        raise ParameterError(f"downscale factor must exceed 1, got {factor}")
    image = T.as_tensor(image)
    H, W = image.shape[-2:]
    out_h, out_w = size or downscaled_size(H, W, factor)
    return bilinear_resize(gaussian_blur(image, sigma_policy(factor)), out_h, out_w)


# ------------------------------------------------------------------- masks


def _footprint_matrix(n_out, n_in):
    """Boolean n_out x n_in: source index j lies in the footprint of target i."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.floor(edges[:-1] + 1e-9).astype(int)
    hi = np.ceil(edges[1:] - 1e-9).astype(int)
    j = np.arange(n_in)
    return (j[None, :] >= lo[:, None]) & (j[None, :] < np.maximum(hi, lo + 1)[:, None])


def downscale_mask(mask, out_h, out_w):
    """Any-hit downsampling: a target pixel is a hole if any source pixel under it is."""
    m = np.asarray(mask)
    H, W = m.shape
    if out_h > H or out_w > W:
        raise ParameterError(f"downscale_mask target {(out_h, out_w)} exceeds source {(H, W)}")
    fr = _footprint_matrix(out_h, H).astype(np.int64)
    fc = _footprint_matrix(out_w, W).astype(np.int64)
    hits = fr @ (m > 0).astype(np.int64) @ fc.T
    return (hits > 0).astype(np.uint8)


def disk(radius):
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return (x * x + y * y) <= r * r


def erode_mask(mask, radius):
    """Binary erosion with a Euclidean disk; out-of-bounds counts as known (0)."""
    if radius < 0:
        raise ParameterError(f"erosion radius must be >= 0, got {radius}")
    m = np.asarray(mask) > 0
    if radius == 0:
        return m.astype(np.uint8)
    out = ndimage.binary_erosion(m, structure=disk(radius), border_value=0)
    return out.astype(np.uint8)


# ----------------------------------------------------------------- pyramid


@dataclass
class ImagePyramid:
    """Levels ordered coarse to fine; the last level is the original input."""

    images: list
    masks: list
    factor: float

    def __len__(self):
        return len(self.images)

    @property
    def sizes(self):
        return [tuple(im.shape[-2:]) for im in self.images]


def pyramid_depth(h, w, smallest_scale, factor=2.0):
    """Number of levels: 1 + max k with max(h, w) / factor**k >= smallest_scale."""
    longest = max(h, w)
    n = 1
    while longest / factor ** n >= smallest_scale:
        n += 1
    return n


def build_pyramid(image, mask, smallest_scale, factor=2.0, sigma_policy=default_sigma):
    """Image/mask pyramid, coarsest first.

    Every coarse level is produced directly from the original (one blur with
    ``sigma_policy(factor**k)`` and one resize), so level sizes follow
    ``round(H / factor**k)`` exactly.
    """
    if not factor > 1:
        raise ParameterError(f"pyramid factor must exceed 1, got {factor}")
    data = T._array(image)
    m = (np.asarray(mask) > 0).astype(np.uint8)
    H, W = data.shape[-2:]
    n = pyramid_depth(H, W, smallest_scale, factor)
    images, masks = [], []
    with T.no_grad():
        for k in range(n - 1, 0, -1):
            f = factor ** k
            size = downscaled_size(H, W, f)
            images.append(downscale(data, f, sigma_policy, size=size).data)
            masks.append(downscale_mask(m, *size))
    images.append(np.array(data, copy=True))
    masks.append(m)
    return ImagePyramid(images, masks, factor)
