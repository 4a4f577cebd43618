"""Dense 3D cross-correlation and executable operator property checks.

Convolution here means cross-correlation with the kernel as stored: kernel
orientation is part of its geometric meaning, so there is no flip. Output has
the input's shape, with zero padding (empty space) outside the grid and the
window anchored at the floor-center of each kernel axis.

The slow path ('direct') is the reference; the default path evaluates the
same sums through a circular FFT buffer sized so no wraparound touches the
output, and ``GridSpectrum`` lets callers reuse one grid transform across
many kernels and across the adjoint that training needs.
"""

from __future__ import annotations

import numpy as np
import scipy.fft
from scipy import signal

from .kernels import KernelTensor


def _weights(kernel: KernelTensor | np.ndarray) -> np.ndarray:
    w = kernel.weights if isinstance(kernel, KernelTensor) else np.asarray(kernel)
    if w.ndim != 3:
        raise ValueError("kernel must be a 3-d array")
    return np.asarray(w, dtype=np.float64)


def _anchor(kernel_shape: tuple[int, ...]) -> tuple[int, ...]:
    return tuple((k - 1) // 2 for k in kernel_shape)


class GridSpectrum:
    """One grid's FFT, reusable for correlations with any same-plan kernel.

    The buffer is sized to at least grid + kernel - 1 per axis, which keeps
    circular wraparound away from both the response (grid-shaped lags) and
    the kernel-weight adjoint (kernel-shaped lags).
    """

    def __init__(self, grid: np.ndarray, kernel_shape: tuple[int, int, int]):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3:
            raise ValueError("grid must be a 3-d array")
        if any(k > g for k, g in zip(kernel_shape, grid.shape)):
            raise ValueError(f"kernel {kernel_shape} larger than grid {grid.shape}")
        self.grid_shape = grid.shape
        self.kernel_shape = tuple(int(k) for k in kernel_shape)
        self.buffer_shape = tuple(
            scipy.fft.next_fast_len(n + k - 1) for n, k in zip(grid.shape, kernel_shape)
        )
        self.spectrum = scipy.fft.rfftn(grid, self.buffer_shape)

    def _lags(self, other: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
        buf = scipy.fft.irfftn(self.spectrum * np.conj(scipy.fft.rfftn(other, self.buffer_shape)),
                               self.buffer_shape)
        rolled = np.roll(buf, _anchor(self.kernel_shape), axis=(0, 1, 2))
        return rolled[: out_shape[0], : out_shape[1], : out_shape[2]]

    def correlate(self, kernel: KernelTensor | np.ndarray) -> np.ndarray:
        """Same-shape response, identical sums to the direct path."""
        w = _weights(kernel)
        if w.shape != self.kernel_shape:
            raise ValueError(f"kernel shape {w.shape} does not match plan {self.kernel_shape}")
        return self._lags(w, self.grid_shape)

    def adjoint(self, upstream: np.ndarray) -> np.ndarray:
        """X[d] = sum_v upstream[v] * grid[v + d - anchor] over kernel offsets.

        This is d(sum upstream * correlate(K)) / dK, the window training uses
        to push response gradients onto kernel weights.
        """
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.grid_shape:
            raise ValueError(f"upstream shape {upstream.shape} != grid shape {self.grid_shape}")
        return self._lags(upstream, self.kernel_shape)


def conv3d(grid: np.ndarray, kernel: KernelTensor | np.ndarray, method: str = "auto") -> np.ndarray:
    """Same-shape cross-correlation of a voxel grid with a kernel.

    method 'direct' is the reference path; 'auto' (shared-spectrum FFT) and
    'fft' must agree with it to within 1e-8 and exist only for speed.
    """
    weights = _weights(kernel)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError("conv3d expects a 3-d grid")
    if any(k > g for k, g in zip(weights.shape, grid.shape)):
        raise ValueError(f"kernel {weights.shape} larger than grid {grid.shape}")
    if method == "auto":
        return GridSpectrum(grid, weights.shape).correlate(weights)
    if method in ("direct", "fft"):
        pads = [((k - 1) // 2, k // 2) for k in weights.shape]
        return signal.correlate(np.pad(grid, pads), weights, mode="valid", method=method)
    raise ValueError(f"unknown conv3d method {method!r}")


def gradient_window(grid: np.ndarray, upstream: np.ndarray,
                    kernel_shape: tuple[int, int, int]) -> np.ndarray:
    """One-off adjoint; see GridSpectrum.adjoint for the reused form."""
    return GridSpectrum(grid, kernel_shape).adjoint(upstream)


def translate_grid(grid: np.ndarray, offset: tuple[int, int, int]) -> np.ndarray:
    """Shift contents by whole voxels, filling vacated voxels with zero."""
    grid = np.asarray(grid)
    out = np.zeros_like(grid)
    src = []
    dst = []
    for n, d in zip(grid.shape, offset):
        if abs(d) >= n:
            raise ValueError(f"offset {offset} out of range for shape {grid.shape}")
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    out[tuple(dst)] = grid[tuple(src)]
    return out


def check_equivariance(
    kernel: KernelTensor | np.ndarray,
    grid: np.ndarray,
    offset: tuple[int, int, int],
    method: str = "auto",
) -> float:
    """Max |conv(translate(grid)) - translate(conv(grid))| over the interior.

    Translation equivariance is exact away from the zero-padding boundary, so
    the comparison excludes a margin of kernel extent + |offset| per axis.
    """
    weights = _weights(kernel)
    a = conv3d(translate_grid(grid, offset), weights, method=method)
    b = translate_grid(conv3d(grid, weights, method=method), offset)
    interior = []
    for n, k, d in zip(grid.shape, weights.shape, offset):
        margin = k + abs(d)
        if n - 2 * margin < 1:
            raise ValueError(
                f"no interior region for shape {grid.shape}, kernel {weights.shape}, offset {offset}"
            )
        interior.append(slice(margin, n - margin))
    region = tuple(interior)
    return float(np.abs(a[region] - b[region]).max())


def check_nonexpansivity(
    kernel: KernelTensor | np.ndarray,
    grid_a: np.ndarray,
    grid_b: np.ndarray,
    method: str = "auto",
) -> tuple[float, float]:
    """(sup |conv(a) - conv(b)|, sup |a - b|); callers assert lhs <= rhs + tol."""
    grid_a = np.asarray(grid_a, dtype=np.float64)
    grid_b = np.asarray(grid_b, dtype=np.float64)
    if grid_a.shape != grid_b.shape:
        raise ValueError(f"grid shapes differ: {grid_a.shape} vs {grid_b.shape}")
    lhs = float(np.abs(conv3d(grid_a, kernel, method=method)
                       - conv3d(grid_b, kernel, method=method)).max())
    rhs = float(np.abs(grid_a - grid_b).max())
    return lhs, rhs
