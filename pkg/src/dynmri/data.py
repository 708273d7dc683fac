"""Synthetic dynamic phantoms, patch-shearing augmentation, evaluation
metrics, and the on-disk dataset format.

Phantoms are sums of pulsating, translating ellipses with per-ellipse
contrast and an optional smooth spatial phase map, normalized so the
magnitude peaks at 1. They stand in for scanner data in all experiments.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import convolve

from dynmri.kspace import (
    ComplexImageSequence,
    KSpaceData,
    NoiseModel,
    SamplingMask,
    forward_model,
    generate_mask,
)

__all__ = [
    "PhantomConfig",
    "PatchSpec",
    "generate_phantom",
    "shear_patches",
    "make_pairs",
    "metric_mse",
    "metric_psnr",
    "metric_ssim",
    "write_dataset",
    "read_dataset",
    "DATASET_MAGIC",
]

DATASET_MAGIC = b"DMRIDSv1"


@dataclass
class PhantomConfig:
    nx: int = 64
    ny: int = 64
    nt: int = 8
    num_ellipses: int = 5
    motion_amp: tuple = (0.03, 0.10)   # relative radial pulsation / translation
    motion_freq: tuple = (1.0, 3.0)    # cycles per sequence
    contrast: tuple = (0.3, 1.0)
    smooth_phase: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.nx < 16 or self.ny < 16:
            raise ValueError("spatial extents must be >= 16")
        if self.nt < 2:
            raise ValueError("nt must be >= 2")
        if self.num_ellipses < 0:
            raise ValueError("num_ellipses must be >= 0")


def generate_phantom(config: PhantomConfig) -> ComplexImageSequence:
    """Piecewise-constant dynamic phantom of deforming ellipses."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    ys, xs = np.mgrid[0:config.ny, 0:config.nx]
    u = (xs + 0.5) / config.nx - 0.5
    v = (ys + 0.5) / config.ny - 0.5
    mag = np.zeros((config.nt, config.ny, config.nx))

    for _ in range(config.num_ellipses):
        cx, cy = rng.uniform(-0.25, 0.25, size=2)
        ax_, ay_ = rng.uniform(0.08, 0.28, size=2)
        angle = rng.uniform(0, np.pi)
        contrast = rng.uniform(*config.contrast)
        amp = rng.uniform(*config.motion_amp)
        freq = rng.uniform(*config.motion_freq)
        phase0 = rng.uniform(0, 2 * np.pi)
        trans_dir = rng.uniform(0, 2 * np.pi)
        ca, sa = np.cos(angle), np.sin(angle)
        for t in range(config.nt):
            ph = 2 * np.pi * freq * t / config.nt + phase0
            scale = 1.0 + amp * np.sin(ph)
            dx = 0.5 * amp * np.cos(ph) * np.cos(trans_dir)
            dy = 0.5 * amp * np.cos(ph) * np.sin(trans_dir)
            ur = (u - cx - dx) * ca + (v - cy - dy) * sa
            vr = -(u - cx - dx) * sa + (v - cy - dy) * ca
            inside = (ur / (ax_ * scale)) ** 2 + (vr / (ay_ * scale)) ** 2 <= 1.0
            mag[t][inside] += contrast

    peak = mag.max()
    if peak > 0:
        mag /= peak

    if config.smooth_phase and config.num_ellipses > 0:
        coeffs = rng.uniform(-1.5, 1.5, size=4)
        phi = coeffs[0] + coeffs[1] * u + coeffs[2] * v + coeffs[3] * u * v
        data = mag * np.exp(1j * phi)[None]
    else:
        data = mag.astype(np.complex128)
    return ComplexImageSequence(data.astype(np.complex64))


@dataclass
class PatchSpec:
    extents: tuple = (117, 120, 6)   # (px, py, pt)
    strides: tuple = (7, 7, 5)       # (sx, sy, st)

    def validate(self) -> None:
        if any(e < 1 for e in self.extents) or any(s < 1 for s in self.strides):
            raise ValueError("patch extents and strides must be >= 1")


def shear_patches(
    volume: ComplexImageSequence, spec: PatchSpec
) -> list[ComplexImageSequence]:
    """All fully-contained patches at stride offsets along x, y and t."""
    spec.validate()
    px, py, pt = spec.extents
    sx, sy, st = spec.strides
    if px > volume.nx or py > volume.ny or pt > volume.nt:
        raise ValueError(
            f"patch extents {spec.extents} exceed volume "
            f"({volume.nx}, {volume.ny}, {volume.nt})"
        )
    nx_off = (volume.nx - px) // sx + 1
    ny_off = (volume.ny - py) // sy + 1
    nt_off = (volume.nt - pt) // st + 1
    patches = []
    for k in range(nt_off):
        for j in range(ny_off):
            for i in range(nx_off):
                sub = volume.data[
                    k * st:k * st + pt, j * sy:j * sy + py, i * sx:i * sx + px
                ]
                patches.append(ComplexImageSequence(sub.copy()))
    return patches


def make_pairs(
    sequences: Sequence[ComplexImageSequence],
    acceleration: float = 4.0,
    acs_lines: int = 6,
    sigma: float = 0.0,
    seed: int = 0,
) -> list[tuple]:
    """Build (K_u, mask, reference) triples with an independent mask per sample."""
    pairs = []
    for i, seq in enumerate(sequences):
        mask = generate_mask(
            seq.nx, seq.ny, seq.nt, acceleration, acs_lines, seed=seed + 7919 * i
        )
        ku = forward_model(seq, mask, NoiseModel(sigma), seed=seed + 104729 * i)
        pairs.append((ku, mask, seq))
    return pairs


# ---------------------------------------------------------------------------
# Metrics (computed on magnitude images)
# ---------------------------------------------------------------------------

def _magnitude(x) -> np.ndarray:
    if isinstance(x, ComplexImageSequence):
        return x.magnitude().astype(np.float64)
    arr = np.asarray(x)
    return np.abs(arr).astype(np.float64) if np.iscomplexobj(arr) else arr.astype(np.float64)


def metric_mse(rec, ref) -> float:
    """Unnormalized squared L2 error between magnitude images."""
    r, g = _magnitude(rec), _magnitude(ref)
    if r.shape != g.shape:
        raise ValueError(f"shapes differ: {r.shape} vs {g.shape}")
    return float(np.sum((g - r) ** 2))


def metric_psnr(rec, ref) -> float:
    """20 log10(max(Ref) sqrt(N) / ||Ref - Rec||_2); +inf on exact match."""
    r, g = _magnitude(rec), _magnitude(ref)
    if r.shape != g.shape:
        raise ValueError(f"shapes differ: {r.shape} vs {g.shape}")
    err = np.linalg.norm(g - r)
    if err == 0:
        return float("inf")
    return float(20 * np.log10(g.max() * np.sqrt(g.size) / err))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def metric_ssim(
    rec, ref, k1: float = 0.01, k2: float = 0.03, win_size: int = 11, sigma: float = 1.5
) -> float:
    """Mean structural similarity over frames, Gaussian-weighted local
    statistics, dynamic range = max of the reference magnitude."""
    r, g = _magnitude(rec), _magnitude(ref)
    if r.shape != g.shape:
        raise ValueError(f"shapes differ: {r.shape} vs {g.shape}")
    if r.ndim == 2:
        r, g = r[None], g[None]
    dynamic_range = g.max()
    if dynamic_range == 0:
        dynamic_range = 1.0
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    win = _gaussian_window(win_size, sigma)
    vals = []
    for t in range(r.shape[0]):
        x, y = r[t], g[t]
        mu_x = convolve(x, win, mode="nearest")
        mu_y = convolve(y, win, mode="nearest")
        xx = convolve(x * x, win, mode="nearest") - mu_x ** 2
        yy = convolve(y * y, win, mode="nearest") - mu_y ** 2
        xy = convolve(x * y, win, mode="nearest") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Dataset file format "DMRI v1"
# ---------------------------------------------------------------------------
# 8-byte magic "DMRIDSv1"; little-endian u32 nx, ny, nt, count; `count`
# records of nx*ny*nt complex samples as interleaved float32 (re, im) with
# x fastest, then y, then t; trailing little-endian u32 CRC-32 of the
# record payload.

def write_dataset(path, sequences: Sequence[ComplexImageSequence]) -> None:
    if not sequences:
        raise ValueError("refusing to write an empty dataset")
    nx, ny, nt = sequences[0].nx, sequences[0].ny, sequences[0].nt
    for s in sequences:
        if (s.nx, s.ny, s.nt) != (nx, ny, nt):
            raise ValueError("all sequences in a dataset must share one geometry")
    payload = bytearray()
    for s in sequences:
        arr = np.empty((nt, ny, nx, 2), dtype="<f4")
        arr[..., 0] = s.data.real
        arr[..., 1] = s.data.imag
        payload += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", nx, ny, nt, len(sequences)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF))


def read_dataset(path) -> list[ComplexImageSequence]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != DATASET_MAGIC:
            raise ValueError(f"bad dataset magic {magic!r}")
        nx, ny, nt, count = struct.unpack("<IIII", fh.read(16))
        record_bytes = nx * ny * nt * 8
        payload = fh.read(record_bytes * count)
        if len(payload) != record_bytes * count:
            raise ValueError("truncated dataset payload")
        (crc,) = struct.unpack("<I", fh.read(4))
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ValueError("dataset CRC mismatch")
    out = []
    for i in range(count):
        arr = np.frombuffer(
            payload, dtype="<f4", count=nx * ny * nt * 2, offset=i * record_bytes
        ).reshape(nt, ny, nx, 2)
        out.append(ComplexImageSequence((arr[..., 0] + 1j * arr[..., 1]).astype(np.complex64)))
    return out
