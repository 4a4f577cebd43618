"""Parametric geometric kernels and their shape-parameter derivatives.

Three kernel families encode the signature shapes used to pick out power-line
support towers in voxelized scenes:

* cylinder  g(x) = exp(-(|xy - c_xy|^2 - r^2)^2 / (2 sigma^2)),
  a Gaussian of the squared horizontal distance, peaking on the shell d = r;
* arrow     cylinder of radius r below height h, switching to radius
  r_c * tan(beta * pi) at and above h (the attachment region for lines);
* negative sphere  g(x) = exp(-(|x - c|^2 - r^2)^2 / (2 sigma^2)) - omega,
  a spherical shell minus a constant penalty, suppressing blob-like masses.

Kernels are discretized on a (k_z, k_y, k_x) voxel lattice in kernel-local
voxel units. Cylinder and arrow kernels are normalized to zero sum and all
kernels have their L1 norm capped at 1, which makes every convolution with
them non-expansive in the sup norm. Each trainable parameter has an analytic
derivative tensor propagated through both normalization steps, so gradient
descent moves the shape parameters rather than free kernel weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

Kind = Literal["cylinder", "arrow", "negsphere"]

KINDS: tuple[Kind, ...] = ("cylinder", "arrow", "negsphere")

# Trainable parameters per kind, in flattening order. The arrow height h is
# structural and stays fixed after construction.
TRAINABLE: dict[str, tuple[str, ...]] = {
    "cylinder": ("r", "sigma"),
    "arrow": ("r", "sigma", "r_c", "beta"),
    "negsphere": ("r", "sigma", "omega"),
}


class DegenerateKernelError(ValueError):
    """Normalization wiped the kernel out (constant raw weights)."""


class ParameterRangeError(ValueError):
    """A shape parameter left its valid range."""


@dataclass
class CylinderParams:
    r: float
    sigma: float

    def validate(self) -> None:
        if not (self.r > 0 and self.sigma > 0):
            raise ParameterRangeError(f"cylinder needs r > 0 and sigma > 0, got {self}")


@dataclass
class ArrowParams:
    r: float
    sigma: float
    h: float        # cone base height in voxel slices, fixed
    r_c: float
    beta: float     # cone inclination in [0, 0.5)

    def validate(self) -> None:
        if not (self.r > 0 and self.sigma > 0 and self.r_c > 0):
            raise ParameterRangeError(f"arrow needs r, sigma, r_c > 0, got {self}")
        if not (0 <= self.beta < 0.5):
            raise ParameterRangeError(f"arrow beta must be in [0, 0.5), got {self.beta}")
        if not np.isfinite(np.tan(self.beta * np.pi)):
            raise ParameterRangeError(f"arrow beta={self.beta} overflows tan(beta*pi)")


@dataclass
class NegSphereParams:
    r: float
    sigma: float
    omega: float    # constant penalty in (0, 1]

    def validate(self) -> None:
        if not (self.r > 0 and self.sigma > 0):
            raise ParameterRangeError(f"negsphere needs r > 0 and sigma > 0, got {self}")
        if not (0 < self.omega <= 1):
            raise ParameterRangeError(f"negsphere omega must be in (0, 1], got {self.omega}")


Params = CylinderParams | ArrowParams | NegSphereParams


def _check_evaluable(kind: str, params: Params) -> None:
    """Reject only true singularities.

    Training keeps nonnegativity soft (hinge penalty, no projection), so
    parameters may transiently leave their nominal ranges; the kernel
    formulas stay well defined except where they genuinely blow up.
    """
    if params.sigma == 0.0 or not np.isfinite(params.sigma):
        raise ParameterRangeError(f"{kind} sigma={params.sigma} is not evaluable")
    if kind == "arrow":
        with np.errstate(over="ignore"):
            cone_r = params.r_c * np.tan(params.beta * np.pi)
            cone_r2 = cone_r * cone_r
            sec2 = 1.0 / np.cos(params.beta * np.pi) ** 2
        if not np.isfinite(cone_r2) or not np.isfinite(sec2):
            raise ParameterRangeError(
                f"arrow beta={params.beta}, r_c={params.r_c} overflow the cone radius")


@dataclass
class KernelTensor:
    kind: str
    weights: np.ndarray  # (k_z, k_y, k_x)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.weights.shape  # type: ignore[return-value]

    def l1(self) -> float:
        return float(np.abs(self.weights).sum())


def _shell_gaussian(d2: np.ndarray, r2: float, sigma: float) -> np.ndarray:
    u = d2 - r2
    return np.exp(-(u * u) / (2.0 * sigma * sigma))


def eval_cylinder(xyz: np.ndarray, params: CylinderParams, center: np.ndarray) -> np.ndarray:
    """Cylinder value at points xyz (..., 3); depends only on horizontal distance."""
    _check_evaluable("cylinder", params)
    xyz = np.asarray(xyz, dtype=np.float64)
    d2 = (xyz[..., 0] - center[0]) ** 2 + (xyz[..., 1] - center[1]) ** 2
    return _shell_gaussian(d2, params.r**2, params.sigma)


def eval_arrow(xyz: np.ndarray, params: ArrowParams, center: np.ndarray) -> np.ndarray:
    """Arrow value: cylinder branch below z = h, cone branch at and above it."""
    _check_evaluable("arrow", params)
    xyz = np.asarray(xyz, dtype=np.float64)
    d2 = (xyz[..., 0] - center[0]) ** 2 + (xyz[..., 1] - center[1]) ** 2
    upper = xyz[..., 2] >= params.h
    cone_r = params.r_c * np.tan(params.beta * np.pi)
    low = _shell_gaussian(d2, params.r**2, params.sigma)
    high = _shell_gaussian(d2, cone_r**2, params.sigma)
    return np.where(upper, high, low)


def eval_negsphere(xyz: np.ndarray, params: NegSphereParams, center: np.ndarray) -> np.ndarray:
    """Spherical-shell Gaussian minus the constant penalty omega."""
    _check_evaluable("negsphere", params)
    xyz = np.asarray(xyz, dtype=np.float64)
    rho2 = ((xyz - np.asarray(center)) ** 2).sum(axis=-1)
    return _shell_gaussian(rho2, params.r**2, params.sigma) - params.omega


def _local_coords(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Voxel-center coordinates (..., 3) as xyz plus the horizontal center.

    The vertical coordinate runs 0..k_z-1 from the bottom slice; the kernel
    center sits at the horizontal middle of the footprint.
    """
    kz, ky, kx = shape
    zz, yy, xx = np.meshgrid(
        np.arange(kz, dtype=np.float64),
        np.arange(ky, dtype=np.float64),
        np.arange(kx, dtype=np.float64),
        indexing="ij",
    )
    xyz = np.stack([xx, yy, zz], axis=-1)
    center = np.array([(kx - 1) / 2.0, (ky - 1) / 2.0, (kz - 1) / 2.0])
    return xyz, center


def discretize(kind: str, params: Params, shape: tuple[int, int, int]) -> KernelTensor:
    """Sample the continuous kernel at every voxel center of the given shape."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"invalid kernel shape {shape}")
    xyz, center = _local_coords(shape)
    if kind == "cylinder":
        w = eval_cylinder(xyz, params, center)
    elif kind == "arrow":
        if not 0 < params.h < shape[0]:
            raise ValueError(f"arrow height h={params.h} must lie inside kernel depth {shape[0]}")
        w = eval_arrow(xyz, params, center)
    elif kind == "negsphere":
        # the sphere is the only kernel centered vertically as well
        w = eval_negsphere(xyz, params, center)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return KernelTensor(kind, w)


def normalize(kernel: KernelTensor) -> KernelTensor:
    """Zero-sum (cylinder/arrow only) then cap the L1 norm at 1."""
    w = kernel.weights
    if kernel.kind in ("cylinder", "arrow"):
        w = w - w.mean()
        if np.abs(w).max() == 0.0:
            raise DegenerateKernelError(
                f"{kernel.kind} kernel is constant; zero-sum normalization leaves nothing"
            )
    l1 = np.abs(w).sum()
    if l1 > 1.0:
        w = w / l1
    return KernelTensor(kernel.kind, w)


def _raw_gradients(kind: str, params: Params, shape: tuple[int, int, int]) -> dict[str, np.ndarray]:
    """d(raw kernel)/d(parameter) at every voxel center, per trainable parameter."""
    xyz, center = _local_coords(shape)
    sig2 = params.sigma**2

    if kind == "cylinder":
        d2 = (xyz[..., 0] - center[0]) ** 2 + (xyz[..., 1] - center[1]) ** 2
        u = d2 - params.r**2
        g = np.exp(-(u * u) / (2.0 * sig2))
        return {
            "r": 2.0 * params.r * u * g / sig2,
            "sigma": g * u * u / params.sigma**3,
        }

    if kind == "arrow":
        d2 = (xyz[..., 0] - center[0]) ** 2 + (xyz[..., 1] - center[1]) ** 2
        upper = xyz[..., 2] >= params.h
        tan_b = np.tan(params.beta * np.pi)
        cone_r = params.r_c * tan_b
        u_low = d2 - params.r**2
        u_high = d2 - cone_r**2
        g_low = np.exp(-(u_low * u_low) / (2.0 * sig2))
        g_high = np.exp(-(u_high * u_high) / (2.0 * sig2))
        u = np.where(upper, u_high, u_low)
        g = np.where(upper, g_high, g_low)
        sec2 = 1.0 / np.cos(params.beta * np.pi) ** 2
        return {
            "r": np.where(upper, 0.0, 2.0 * params.r * u_low * g_low / sig2),
            "sigma": g * u * u / params.sigma**3,
            "r_c": np.where(upper, 2.0 * cone_r * tan_b * u_high * g_high / sig2, 0.0),
            "beta": np.where(
                upper, 2.0 * cone_r * params.r_c * np.pi * sec2 * u_high * g_high / sig2, 0.0
            ),
        }

    if kind == "negsphere":
        rho2 = ((xyz - center) ** 2).sum(axis=-1)
        v = rho2 - params.r**2
        e = np.exp(-(v * v) / (2.0 * sig2))
        return {
            "r": 2.0 * params.r * v * e / sig2,
            "sigma": e * v * v / params.sigma**3,
            "omega": np.full(shape, -1.0),
        }

    raise ValueError(f"unknown kernel kind {kind!r}")


def kernel_param_gradients(
    kind: str, params: Params, shape: tuple[int, int, int]
) -> tuple[KernelTensor, dict[str, np.ndarray]]:
    """Normalized kernel plus d(normalized weights)/d(parameter) tensors.

    The chain rule runs through mean subtraction and the L1 cap. On the cap
    boundary (L1 exactly 1) the capped branch's subgradient is used; the sign
    of a zero weight contributes 0 to the L1 derivative.
    """
    _check_evaluable(kind, params)
    raw = discretize(kind, params, shape)
    grads = _raw_gradients(kind, params, shape)

    w = raw.weights
    if kind in ("cylinder", "arrow"):
        w = w - w.mean()
        if np.abs(w).max() == 0.0:
            raise DegenerateKernelError(f"{kind} kernel is constant under these parameters")
        grads = {p: d - d.mean() for p, d in grads.items()}

    l1 = np.abs(w).sum()
    if l1 >= 1.0:
        sign = np.sign(w)
        out = {}
        for p, d in grads.items():
            dl1 = (sign * d).sum()
            out[p] = d / l1 - w * (dl1 / (l1 * l1))
        return KernelTensor(kind, w / l1), out
    return KernelTensor(kind, w), grads


def build_kernel(kind: str, params: Params, shape: tuple[int, int, int]) -> KernelTensor:
    """Discretize and normalize in one step."""
    return normalize(discretize(kind, params, shape))


def save_kernel(kernel: KernelTensor, path: str) -> None:
    """Debug dump: header `k_z k_y k_x kind`, then weights in z-major order."""
    kz, ky, kx = kernel.shape
    with open(path, "w") as fh:
        fh.write(f"{kz} {ky} {kx} {kernel.kind}\n")
        for v in kernel.weights.reshape(-1):
            fh.write(f"{v:.9g}\n")


def load_kernel(path: str) -> KernelTensor:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4:
            raise ValueError(f"{path}: bad kernel header {header!r}")
        kz, ky, kx = (int(v) for v in header[:3])
        kind = header[3]
        values = np.array([float(line) for line in fh if line.strip()])
    if values.size != kz * ky * kx:
        raise ValueError(f"{path}: expected {kz * ky * kx} weights, found {values.size}")
    return KernelTensor(kind, values.reshape(kz, ky, kx))
