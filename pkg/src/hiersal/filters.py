"""Gaussian kernel construction and plain-numpy blurring.

Kernel side length is the smallest odd integer >= 6 sigma (at least 1);
kernels are normalized to sum exactly to 1 in float64 before casting.
"""

import math

import numpy as np

from . import kernels


def kernel_side(sigma):
    side = max(1, math.ceil(6.0 * sigma))
    return side if side % 2 == 1 else side + 1


def radius_sq_grid(side):
    off = np.arange(side, dtype=np.float64) - side // 2
    return off[:, None] ** 2 + off[None, :] ** 2


def gaussian_kernel2d(sigma, dtype=np.float64):
    side = kernel_side(sigma)
    w = np.exp(-radius_sq_grid(side) / (2.0 * sigma * sigma))
    return (w / w.sum()).astype(dtype)


def blur2d(arr, sigma):
    """Same-size Gaussian blur of a 2D map (zero padding at the borders)."""
    k = gaussian_kernel2d(sigma, dtype=arr.dtype)
    side = k.shape[0]
    out = kernels.conv2d_forward(arr[None, None], k[None, None], (1, 1),
                                 (side // 2, side // 2))
    return out[0, 0]
