"""Single-coil Cartesian k-space: FFTs, line masks, KCM and data consistency.

K-space grids are stored centred (DC at ``(h // 2, w // 2)``) and the FFT is
orthonormal, so the forward transform is unitary and its adjoint is the
inverse transform.  Masks select phase-encode rows (axis 0) and are constant
along the frequency-encode axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigError, ContractError, ShapeError, Tensor

__all__ = [
    "ComplexImage",
    "KSpaceGrid",
    "SamplingMask",
    "fft2",
    "ifft2",
    "fft2c",
    "ifft2c",
    "make_mask",
    "full_mask",
    "empty_mask",
    "apply_mask",
    "zero_fill",
    "kcm",
    "dc_layer",
    "data_consistency",
    "add_noise",
    "write_mask",
    "read_mask",
    "write_complex",
    "read_complex",
]


def _checked(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.complex128)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("complex grid contains non-finite values")
    return arr


@dataclass(frozen=True)
class ComplexImage:
    """Image-domain slice held as a complex128 array."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _checked(self.data))

    @classmethod
    def from_planes(cls, re, im=None) -> ComplexImage:
        re = np.asarray(re, dtype=np.float64)
        im = np.zeros_like(re) if im is None else np.asarray(im, dtype=np.float64)
        return cls(re + 1j * im)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def re(self) -> np.ndarray:
        return self.data.real

    @property
    def im(self) -> np.ndarray:
        return self.data.imag

    def planes(self) -> np.ndarray:
        """Stack as ``[2, h, w]`` real/imaginary channels."""
        return np.stack([self.data.real, self.data.imag])

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)


@dataclass(frozen=True)
class KSpaceGrid:
    data: np.ndarray
    centered: bool = True

    def __post_init__(self):
        object.__setattr__(self, "data", _checked(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def re(self) -> np.ndarray:
        return self.data.real

    @property
    def im(self) -> np.ndarray:
        return self.data.imag


@dataclass(frozen=True)
class SamplingMask:
    """Binary phase-encode line selection.

    ``lines[i]`` says whether row ``i`` of the centred k-space grid was acquired.
    """

    height: int
    width: int
    lines: np.ndarray
    acceleration: float = 1.0
    center_fraction: float = 0.0
    seed: int = 0
    center_rows: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        lines = np.asarray(self.lines, dtype=bool)
        if lines.shape != (self.height,):
            raise ShapeError(f"mask lines {lines.shape} do not match height {self.height}")
        object.__setattr__(self, "lines", lines)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def grid(self) -> np.ndarray:
        """Float 0/1 array of shape ``(height, width)``."""
        return np.repeat(self.lines[:, None], self.width, axis=1).astype(np.float64)

    @property
    def kept_fraction(self) -> float:
        return float(self.lines.mean())


# ----------------------------------------------------------------------------
# Fourier operators


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centred orthonormal 2-D DFT over the last two axes."""
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes)


def ifft2c(k: np.ndarray) -> np.ndarray:
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=axes), norm="ortho"), axes=axes)


def fft2(img: ComplexImage) -> KSpaceGrid:
    return KSpaceGrid(fft2c(img.data))


def ifft2(k: KSpaceGrid) -> ComplexImage:
    data = ifft2c(k.data) if k.centered else np.fft.ifft2(k.data, norm="ortho")
    return ComplexImage(data)


# ----------------------------------------------------------------------------
# masks


def _center_band(h: int, center_fraction: float) -> tuple[int, int]:
    n = int(round(center_fraction * h))
    start = h // 2 - n // 2
    return start, start + n


def make_mask(
    h: int,
    w: int,
    acceleration: float,
    center_fraction: float = 0.08,
    seed: int = 0,
    density: str = "uniform",
    tolerance: float = 0.05,
) -> SamplingMask:
    """Random phase-encode mask with a fully sampled central band.

    Rows outside the band are kept independently with a probability chosen so
    that the expected kept fraction is ``1 / acceleration``.  Draws whose kept
    fraction lands outside ``1/R +- tolerance`` are rejected and redrawn from
    the same generator, so the result is still a pure function of the seed.

    ``density="polynomial"`` grades the outer-row probability towards the
    centre instead of keeping it flat.
    """
    if h < 2 or w < 2:
        raise ConfigError(f"mask extents must be at least 2, got {h}x{w}")
    if acceleration < 1:
        raise ConfigError(f"acceleration must be >= 1, got {acceleration}")
    if center_fraction * h < 1 and acceleration > 1:
        raise ConfigError(f"center_fraction {center_fraction} keeps no rows at height {h}")
    target = 1.0 / acceleration
    if center_fraction > target:
        raise ConfigError(
            f"center_fraction {center_fraction} exceeds the 1/R budget {target:.4f}"
        )
    start, stop = _center_band(h, center_fraction)
    n_center = stop - start
    n_outer = h - n_center
    outer = np.ones(h, dtype=bool)
    outer[start:stop] = False

    if acceleration == 1 or n_outer == 0:
        probs = np.ones(h)
    else:
        budget = target * h - n_center
        if density == "uniform":
            probs = np.full(h, budget / n_outer)
        elif density == "polynomial":
            dist = np.abs(np.arange(h) - h // 2) / (h / 2)
            weight = (1.0 - np.clip(dist, 0.0, 1.0)) ** 2 + 1e-3
            weight[~outer] = 0.0
            probs = weight * budget / weight.sum()
            # redistribute any excess over 1 so the expectation is preserved
            for _ in range(10):
                excess = np.clip(probs - 1.0, 0.0, None).sum()
                probs = np.minimum(probs, 1.0)
                free = outer & (probs < 1.0)
                if excess <= 0 or not free.any():
                    break
                probs[free] += excess * weight[free] / weight[free].sum()
        else:
            raise ConfigError(f"unknown density profile {density!r}")

    rng = np.random.default_rng(seed)
    for _ in range(10_000):
        lines = rng.random(h) < probs
        lines[start:stop] = True
        if abs(lines.mean() - target) <= tolerance:
            break
    else:
        raise ConfigError("could not draw a mask within tolerance; relax it or enlarge h")
    return SamplingMask(h, w, lines, acceleration, center_fraction, seed, (start, stop))


def full_mask(h: int, w: int) -> SamplingMask:
    return SamplingMask(h, w, np.ones(h, dtype=bool), 1.0, 1.0, 0, (0, h))


def empty_mask(h: int, w: int) -> SamplingMask:
    return SamplingMask(h, w, np.zeros(h, dtype=bool), np.inf, 0.0, 0, (h // 2, h // 2))


def _check_mask(k: KSpaceGrid, m: SamplingMask) -> None:
    if k.shape != m.shape:
        raise ShapeError(f"k-space {k.shape} and mask {m.shape} differ")


def apply_mask(k: KSpaceGrid, m: SamplingMask) -> KSpaceGrid:
    _check_mask(k, m)
    out = np.where(m.lines[:, None], k.data, 0.0)
    return KSpaceGrid(out, k.centered)


def zero_fill(k_us: KSpaceGrid) -> ComplexImage:
    return ifft2(k_us)


def kcm(
    k_tar_us: KSpaceGrid, k_ref_fs: KSpaceGrid, m: SamplingMask
) -> tuple[KSpaceGrid, ComplexImage]:
    """Fill the unacquired target rows with the reference rows.

    Returns the mixed k-space and its inverse transform.
    """
    _check_mask(k_tar_us, m)
    _check_mask(k_ref_fs, m)
    if np.any(k_tar_us.data[~m.lines] != 0):
        raise ContractError("kcm: target k-space has energy on unacquired rows")
    mixed = np.where(m.lines[:, None], k_tar_us.data, k_ref_fs.data)
    k_mix = KSpaceGrid(mixed)
    return k_mix, ifft2(k_mix)


def dc_layer(x_hat: ComplexImage, k_tar_us: KSpaceGrid, m: SamplingMask) -> ComplexImage:
    """Hard data consistency: acquired rows replaced by the measurements."""
    _check_mask(k_tar_us, m)
    if x_hat.shape != m.shape:
        raise ShapeError(f"image {x_hat.shape} and mask {m.shape} differ")
    k = fft2c(x_hat.data)
    k = np.where(m.lines[:, None], k_tar_us.data, k)
    return ComplexImage(ifft2c(k))


def _planes_to_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


def _complex_to_planes(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-3)


def data_consistency(x: Tensor, k_us: np.ndarray, lines: np.ndarray) -> Tensor:
    """Differentiable hard DC on ``x[..., 2, h, w]`` (real/imag planes).

    ``k_us`` is the centred measured k-space (complex, broadcastable to the
    batch) and ``lines`` the acquired-row flags, either ``[h]`` or ``[..., h]``.
    The measured branch is constant, so the gradient is ``ifft((1-M) fft(g))``.
    """
    if x.shape[-3] != 2:
        raise ShapeError(f"data_consistency expects 2 planes on axis -3, got {x.shape}")
    keep = np.asarray(lines, dtype=bool)[..., :, None]
    k = fft2c(_planes_to_complex(x.data))
    k = np.where(keep, k_us, k)
    out = _complex_to_planes(ifft2c(k))

    def backward(g):
        kg = fft2c(_planes_to_complex(g))
        kg = np.where(keep, 0.0, kg)
        return (_complex_to_planes(ifft2c(kg)),)

    return Tensor._from_op(out, (x,), backward, "data_consistency")


def add_noise(k: KSpaceGrid, sigma: float, seed: int) -> KSpaceGrid:
    """Add i.i.d. complex Gaussian noise with variance ``sigma**2`` per real component."""
    if sigma < 0:
        raise ConfigError("noise sigma must be non-negative")
    if sigma == 0:
        return KSpaceGrid(k.data.copy(), k.centered)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, k.shape) + 1j * rng.normal(0.0, sigma, k.shape)
    return KSpaceGrid(k.data + noise, k.centered)


# ----------------------------------------------------------------------------
# file formats


def write_mask(m: SamplingMask, path: str | Path) -> None:
    header = f"{m.height} {m.width} {m.acceleration:g} {m.center_fraction:g} {m.seed}\n"
    body = "".join("1" if v else "0" for v in m.lines) + "\n"
    Path(path).write_text(header + body)


def read_mask(path: str | Path) -> SamplingMask:
    text = Path(path).read_text().split()
    h, w = int(text[0]), int(text[1])
    accel, cf, seed = float(text[2]), float(text[3]), int(text[4])
    bits = "".join(text[5:])
    if len(bits) != h or set(bits) - {"0", "1"}:
        raise ContractError(f"{path}: mask body must be {h} characters of 0/1")
    lines = np.array([c == "1" for c in bits])
    return SamplingMask(h, w, lines, accel, cf, seed, _center_band(h, cf))


_CPLX = b"CPLX"


def write_complex(data: np.ndarray, path: str | Path) -> None:
    """Write a complex grid as ``CPLX``, ``<u4 h``, ``<u4 w``, interleaved ``<f8`` re/im."""
    z = np.asarray(data, dtype=np.complex128)
    h, w = z.shape
    inter = np.empty((h, w, 2), dtype="<f8")
    inter[..., 0] = z.real
    inter[..., 1] = z.imag
    Path(path).write_bytes(_CPLX + struct.pack("<II", h, w) + inter.tobytes())


def read_complex(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _CPLX:
        raise ContractError(f"{path}: not a CPLX file")
    h, w = struct.unpack_from("<II", blob, 4)
    inter = np.frombuffer(blob, dtype="<f8", count=2 * h * w, offset=12).reshape(h, w, 2)
    return inter[..., 0] + 1j * inter[..., 1]
