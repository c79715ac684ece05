"""Kernel backend selection.

The compiled extension is preferred when built; the numpy implementation
is the fallback. ``HIERSAL_KERNELS=py`` forces the numpy backend,
``HIERSAL_KERNELS=c`` demands the compiled one (import error if missing).
Bilinear upsampling is numpy in both cases (memory-bound, already
vectorized).
"""

import os

from . import pykernels
from .pykernels import upsample2x_backward, upsample2x_forward

_choice = os.environ.get("HIERSAL_KERNELS", "").lower()

backend = "numpy"
_impl = pykernels
if _choice not in ("py", "numpy", "python"):
    try:
        from . import _ckernels

        _impl = _ckernels
        backend = "compiled"
    except ImportError:
        if _choice in ("c", "compiled", "ext"):
            raise ImportError(
                "HIERSAL_KERNELS=c requested but the compiled extension is "
                "not built; reinstall the package with a C compiler available"
            )

conv3d_forward = _impl.conv3d_forward
conv3d_backward_input = _impl.conv3d_backward_input
conv3d_backward_kernel = _impl.conv3d_backward_kernel
conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel
maxpool3d_forward = _impl.maxpool3d_forward
maxpool3d_backward = _impl.maxpool3d_backward
