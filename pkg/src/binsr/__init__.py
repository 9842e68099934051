"""Binarized super-resolution toolkit.

Modules:
    tensor    dense NCHW tensors and reverse-mode autodiff ops
    quantize  sign binarization, surrogate gradients, bit packing, XNOR conv
    backend   compiled-vs-fallback kernel selection
    graph     static layer graphs and information-flow analysis
    models    block/tail/network builders
    imaging   PNG I/O, bicubic resampling, PSNR/SSIM
    training  Adam loop, checkpoints, evaluation
    cli       command-line entry point
"""

import os

# BLAS must be single-threaded before numpy loads it: reduction order is part
# of the determinism contract (same-seed runs compare loss logs bitwise).
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

__version__ = "0.1.0"
