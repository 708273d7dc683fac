"""Fourier encoding, k-t undersampling masks, and the undersampled forward model.

The encoding operator applies a centered, orthonormal 2D DFT to each
temporal frame and keeps only the k-space lines selected by a sampling
mask (full readouts along kx, randomly chosen phase encodes along ky).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "ComplexImageSequence",
    "SamplingMask",
    "KSpaceData",
    "NoiseModel",
    "fft2c",
    "ifft2c",
    "fft2_per_frame",
    "ifft2_per_frame",
    "generate_mask",
    "forward_model",
    "zero_filled_recon",
    "acs_line_indices",
]

DEFAULT_ACS_LINES = 6
DEFAULT_ACCELERATION = 4.0
# The variable-density std is not pinned anywhere authoritative; ny/6 keeps
# most of the density inside the central third of k-space.
GAUSSIAN_STD_FRACTION = 1.0 / 6.0


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D FFT over the last two axes."""
    shifted = np.fft.ifftshift(x, axes=(-2, -1))
    k = np.fft.fft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(k, axes=(-2, -1))


def ifft2c(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    shifted = np.fft.ifftshift(k, axes=(-2, -1))
    x = np.fft.ifft2(shifted, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(x, axes=(-2, -1))


@dataclass
class ComplexImageSequence:
    """Complex dynamic image, stored as (nt, ny, nx) with t slowest."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"expected 3-d (nt, ny, nx) array, got shape {arr.shape}")
        if not np.iscomplexobj(arr):
            arr = arr.astype(np.complex64)
        if not np.all(np.isfinite(arr.real)) or not np.all(np.isfinite(arr.imag)):
            raise ValueError("image sequence contains non-finite entries")
        self.data = arr

    @property
    def nt(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def to_channels(self) -> np.ndarray:
        """Two-channel real view [2, nt, ny, nx]; channel 0 real, 1 imaginary."""
        return np.stack([self.data.real, self.data.imag]).astype(
            np.float32 if self.data.dtype == np.complex64 else np.float64
        )

    @classmethod
    def from_channels(cls, ch: np.ndarray) -> "ComplexImageSequence":
        if ch.ndim != 4 or ch.shape[0] != 2:
            raise ValueError(f"expected [2, nt, ny, nx] channels, got {ch.shape}")
        ctype = np.complex64 if ch.dtype == np.float32 else np.complex128
        return cls((ch[0] + 1j * ch[1]).astype(ctype))

    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)


def acs_line_indices(ny: int, acs_lines: int) -> np.ndarray:
    """Always-sampled central ky lines; even counts take the extra line on
    the negative-frequency side of center.

    Centered offsets are {-(acs//2), ..., -(acs//2)+acs-1}: e.g. 6 ACS lines
    cover offsets -3..2, 5 lines cover -2..2.
    """
    lo = -(acs_lines // 2)
    return np.arange(lo, lo + acs_lines) + ny // 2


@dataclass
class SamplingMask:
    """Binary k-t mask over (t, ky) lines; readouts along kx are always full."""

    bits: np.ndarray  # (nt, ny) {0,1}
    nx: int
    acs_lines: int
    acceleration: float

    @property
    def nt(self) -> int:
        return self.bits.shape[0]

    @property
    def ny(self) -> int:
        return self.bits.shape[1]

    def as_volume(self) -> np.ndarray:
        """Expand line bits to a full (nt, ny, nx) {0,1} array."""
        return np.repeat(self.bits[:, :, None], self.nx, axis=2).astype(np.float32)

    def line_counts(self) -> np.ndarray:
        return self.bits.sum(axis=1)


@dataclass
class KSpaceData:
    """Undersampled measurements; exactly zero where the mask is zero."""

    data: np.ndarray  # (nt, ny, nx) complex
    mask: SamplingMask

    def __post_init__(self):
        vol = self.mask.as_volume()
        if self.data.shape != vol.shape:
            raise ValueError(
                f"k-space shape {self.data.shape} does not match mask {vol.shape}"
            )
        if np.any(self.data[vol == 0] != 0):
            raise ValueError("k-space has nonzero entries at unsampled positions")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def to_channels(self) -> np.ndarray:
        return np.stack([self.data.real, self.data.imag]).astype(
            np.float32 if self.data.dtype == np.complex64 else np.float64
        )


@dataclass
class NoiseModel:
    """Complex Gaussian noise: real and imaginary parts each N(0, sigma^2)."""

    sigma: float = 0.0


def fft2_per_frame(img: ComplexImageSequence) -> np.ndarray:
    return fft2c(img.data)


def ifft2_per_frame(k: np.ndarray) -> ComplexImageSequence:
    return ComplexImageSequence(ifft2c(np.asarray(k)))


def generate_mask(
    nx: int,
    ny: int,
    nt: int,
    acceleration: float = DEFAULT_ACCELERATION,
    acs_lines: int = DEFAULT_ACS_LINES,
    seed: int = 0,
    gaussian_std: Optional[float] = None,
) -> SamplingMask:
    """Gaussian variable-density random ky undersampling, independent per frame.

    Each frame samples the central ACS block plus lines drawn without
    replacement with probability proportional to a zero-mean Gaussian over
    the centered ky index, until ceil(ny / acceleration) lines are set.
    """
    if acceleration < 1:
        raise ValueError(f"acceleration must be >= 1, got {acceleration}")
    if acs_lines > ny:
        raise ValueError(f"acs_lines {acs_lines} exceeds ny {ny}")
    target = int(np.ceil(ny / acceleration))
    if target < acs_lines:
        raise ValueError(
            f"line budget ceil({ny}/{acceleration}) = {target} is below acs_lines {acs_lines}"
        )
    std = gaussian_std if gaussian_std is not None else ny * GAUSSIAN_STD_FRACTION
    rng = np.random.default_rng(seed)
    acs = acs_line_indices(ny, acs_lines)
    centered = np.arange(ny) - ny // 2
    density = np.exp(-0.5 * (centered / std) ** 2)
    bits = np.zeros((nt, ny), dtype=np.uint8)
    bits[:, acs] = 1
    candidates = np.setdiff1d(np.arange(ny), acs)
    extra = target - acs_lines
    for t in range(nt):
        if extra == 0:
            continue
        p = density[candidates]
        p = p / p.sum()
        chosen = rng.choice(candidates, size=extra, replace=False, p=p)
        bits[t, chosen] = 1
    return SamplingMask(bits=bits, nx=nx, acs_lines=acs_lines, acceleration=float(acceleration))


def forward_model(
    img: ComplexImageSequence,
    mask: SamplingMask,
    noise: NoiseModel = NoiseModel(),
    seed: int = 0,
) -> KSpaceData:
    """Encode, add complex Gaussian noise, and zero out unsampled lines."""
    vol = mask.as_volume()
    if img.shape != vol.shape:
        raise ValueError(f"image shape {img.shape} does not match mask {vol.shape}")
    k = fft2c(img.data)
    if noise.sigma > 0:
        rng = np.random.default_rng(seed)
        k = k + noise.sigma * (
            rng.standard_normal(k.shape) + 1j * rng.standard_normal(k.shape)
        )
    k = k * vol
    return KSpaceData(data=k, mask=mask)


def zero_filled_recon(k: KSpaceData) -> ComplexImageSequence:
    """Inverse FFT of zero-filled k-space: the aliased baseline image."""
    return ifft2_per_frame(k.data)
