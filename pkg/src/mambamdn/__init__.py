"""Reference-guided multi-contrast MRI reconstruction with selective state-space blocks.

The package bundles a small reverse-mode autodiff engine, centred k-space
tools, a numba-backed selective scan, the reconstruction network, synthetic
paired-contrast phantoms, image-quality metrics and the ``mdn`` CLI.
"""

__version__ = "0.1.0"

from .autodiff import ConfigError, ContractError, ShapeError, Tensor, no_grad  # noqa: E402
from .config import VARIANTS, ModelConfig  # noqa: E402
from .kspace import ComplexImage, KSpaceGrid, SamplingMask, fft2, ifft2, kcm, make_mask  # noqa: E402
from .metrics import MetricReport, psnr, rmse, ssim  # noqa: E402
from .network import MambaMdnModel  # noqa: E402

__all__ = [
    "ComplexImage",
    "ConfigError",
    "ContractError",
    "KSpaceGrid",
    "MambaMdnModel",
    "MetricReport",
    "ModelConfig",
    "SamplingMask",
    "ShapeError",
    "Tensor",
    "VARIANTS",
    "fft2",
    "ifft2",
    "kcm",
    "make_mask",
    "no_grad",
    "psnr",
    "rmse",
    "ssim",
]
