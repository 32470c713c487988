"""Per-patch 2D DFT, amplitude/phase split and recomposition.

The transform pair is the conventional one: forward unnormalized,
inverse scaled by 1/(H'W'). Transforms run over two axes (the last two by
default) so a whole (M, ph, pw, C) patch stack goes through one call with
axes=(1, 2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import SpectralError
from .imagecore import PatchGrid

Axes = Tuple[int, int]
LAST2: Axes = (-2, -1)
PATCH_AXES: Axes = (1, 2)


def _check(x: np.ndarray, axes: Axes) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2:
        raise SpectralError(f"need at least a 2D array, got shape {x.shape}")
    if x.shape[axes[0]] == 0 or x.shape[axes[1]] == 0:
        raise SpectralError("empty matrix")
    return x


def dft2(x: np.ndarray, axes: Axes = LAST2) -> np.ndarray:
    x = _check(x, axes)
    return np.fft.fft2(x.astype(np.float64, copy=False), axes=axes)


def idft2(spec: np.ndarray, axes: Axes = LAST2) -> np.ndarray:
    spec = _check(spec, axes)
    return np.fft.ifft2(spec, axes=axes).real


def _dft_matrix(n: int, sign: float) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


def dft2_direct(x: np.ndarray) -> np.ndarray:
    """Direct DFT of a single 2D matrix via the DFT matrices (no FFT)."""
    x = _check(x, LAST2)
    if x.ndim != 2:
        raise SpectralError("dft2_direct takes a single 2D matrix")
    h, w = x.shape
    return _dft_matrix(h, -1.0) @ x.astype(np.complex128) @ _dft_matrix(w, -1.0)


def idft2_direct(spec: np.ndarray) -> np.ndarray:
    spec = _check(spec, LAST2)
    if spec.ndim != 2:
        raise SpectralError("idft2_direct takes a single 2D matrix")
    h, w = spec.shape
    return (_dft_matrix(h, 1.0) @ spec @ _dft_matrix(w, 1.0)).real / (h * w)


def amplitude(spec: np.ndarray) -> np.ndarray:
    return np.abs(spec)


def phase(spec: np.ndarray) -> np.ndarray:
    """atan2(Im, Re) folded into (-pi, pi]; zero-magnitude bins get phase 0."""
    p = np.angle(spec)
    p = np.where(p <= -np.pi, np.pi, p)
    return np.where(np.abs(spec) == 0.0, 0.0, p)


def recompose(amp: np.ndarray, pha: np.ndarray, axes: Axes = LAST2) -> np.ndarray:
    """Real part of idft2(amp * exp(i*phase)). Unclamped."""
    amp = np.asarray(amp, dtype=np.float64)
    pha = np.asarray(pha, dtype=np.float64)
    if amp.shape != pha.shape:
        raise SpectralError(f"amplitude shape {amp.shape} != phase shape {pha.shape}")
    if np.any(amp < 0):
        raise SpectralError("negative amplitude")
    return idft2(amp * np.exp(1j * pha), axes=axes)


@dataclass(frozen=True)
class PatchSpectrum:
    """Spectra of every patch and channel of a PatchGrid, shape (M, ph, pw, C)."""

    coeffs: np.ndarray

    @property
    def amplitude(self) -> np.ndarray:
        return amplitude(self.coeffs)

    @property
    def phase(self) -> np.ndarray:
        return phase(self.coeffs)

    @property
    def height(self) -> int:
        return int(self.coeffs.shape[1])

    @property
    def width(self) -> int:
        return int(self.coeffs.shape[2])

    @property
    def channels(self) -> int:
        return int(self.coeffs.shape[3])


def patch_spectrum(pg: PatchGrid) -> PatchSpectrum:
    return PatchSpectrum(dft2(pg.patches, axes=PATCH_AXES))


def recompose_patches(pg: PatchGrid, amp: np.ndarray, pha: np.ndarray) -> PatchGrid:
    return pg.with_patches(recompose(amp, pha, axes=PATCH_AXES))
