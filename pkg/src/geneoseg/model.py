"""The geometric observer model: kernels mixed convexly, squashed, thresholded.

The production model mixes one cylinder, one arrow and one negative-sphere
response with convex weights; the last weight is derived from the free ones
(lambda_ns = 1 - lambda_cy - lambda_ar), so the whole model has exactly 11
trainable scalars: 2 + 4 + 3 shape parameters and 2 free mixing weights.

An ``ObserverParams`` may also hold any other multiset of operators (used by
the ablation experiments); checkpoints and the parameter report require the
standard 3-operator layout.
"""

from __future__ import annotations

import functools
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import kernels as kern
from .conv import GridSpectrum, conv3d
from .kernels import (
    ArrowParams,
    CylinderParams,
    KernelTensor,
    NegSphereParams,
    Params,
    TRAINABLE,
)

CHECKPOINT_VERSION = 1
STANDARD_KINDS = ("cylinder", "arrow", "negsphere")


class CheckpointError(ValueError):
    """A checkpoint file is missing, malformed or violates invariants."""


@dataclass
class Operator:
    kind: str
    params: Params


@dataclass
class ObserverParams:
    operators: list[Operator]
    lambda_free: np.ndarray                      # (K-1,) free mixing weights
    kernel_shape: tuple[int, int, int] = (9, 9, 9)
    tau: float = 0.5

    def __post_init__(self) -> None:
        self.lambda_free = np.asarray(self.lambda_free, dtype=np.float64).reshape(-1)
        self.kernel_shape = tuple(int(s) for s in self.kernel_shape)
        if len(self.operators) < 1:
            raise ValueError("need at least one operator")
        if len(self.lambda_free) != len(self.operators) - 1:
            raise ValueError(
                f"{len(self.operators)} operators need {len(self.operators) - 1} free weights, "
                f"got {len(self.lambda_free)}"
            )

    @classmethod
    def standard(
        cls,
        cylinder: CylinderParams,
        arrow: ArrowParams,
        negsphere: NegSphereParams,
        lambda_cy: float,
        lambda_ar: float,
        kernel_shape: tuple[int, int, int] = (9, 9, 9),
        tau: float = 0.5,
    ) -> "ObserverParams":
        return cls(
            operators=[
                Operator("cylinder", cylinder),
                Operator("arrow", arrow),
                Operator("negsphere", negsphere),
            ],
            lambda_free=np.array([lambda_cy, lambda_ar]),
            kernel_shape=kernel_shape,
            tau=tau,
        )

    @property
    def is_standard(self) -> bool:
        return tuple(op.kind for op in self.operators) == STANDARD_KINDS

    def _std(self) -> None:
        if not self.is_standard:
            raise ValueError("operation requires the standard cylinder/arrow/negsphere layout")

    @property
    def cylinder(self) -> CylinderParams:
        self._std()
        return self.operators[0].params  # type: ignore[return-value]

    @property
    def arrow(self) -> ArrowParams:
        self._std()
        return self.operators[1].params  # type: ignore[return-value]

    @property
    def negsphere(self) -> NegSphereParams:
        self._std()
        return self.operators[2].params  # type: ignore[return-value]

    @property
    def lambdas(self) -> np.ndarray:
        """Full mixing vector; the last weight is 1 - sum of the free ones."""
        return np.append(self.lambda_free, 1.0 - self.lambda_free.sum())

    @property
    def lambda_cy(self) -> float:
        self._std()
        return float(self.lambda_free[0])

    @property
    def lambda_ar(self) -> float:
        self._std()
        return float(self.lambda_free[1])

    @property
    def lambda_ns(self) -> float:
        self._std()
        return float(1.0 - self.lambda_free.sum())


def trainable_names(params: ObserverParams) -> list[str]:
    """Flat names of the trainable scalars, in vector order."""
    names = []
    counts: dict[str, int] = {}
    multi = {k: sum(op.kind == k for op in params.operators) for k in kern.KINDS}
    for op in params.operators:
        i = counts.get(op.kind, 0)
        counts[op.kind] = i + 1
        prefix = op.kind if multi[op.kind] == 1 else f"{op.kind}{i}"
        names.extend(f"{prefix}.{p}" for p in TRAINABLE[op.kind])
    if params.is_standard:
        names.extend(["lambda_cy", "lambda_ar"])
    else:
        names.extend(f"lambda{i}" for i in range(len(params.lambda_free)))
    return names


def get_trainable(params: ObserverParams) -> np.ndarray:
    values = []
    for op in params.operators:
        values.extend(getattr(op.params, p) for p in TRAINABLE[op.kind])
    values.extend(params.lambda_free)
    return np.array(values, dtype=np.float64)


def set_trainable(params: ObserverParams, values: np.ndarray) -> ObserverParams:
    """New ObserverParams with the trainable vector replaced."""
    values = np.asarray(values, dtype=np.float64)
    expected = len(get_trainable(params))
    if values.shape != (expected,):
        raise ValueError(f"expected {expected} trainable values, got shape {values.shape}")
    ops = []
    pos = 0
    for op in params.operators:
        fields = TRAINABLE[op.kind]
        updates = {p: float(values[pos + j]) for j, p in enumerate(fields)}
        pos += len(fields)
        ops.append(Operator(op.kind, replace(op.params, **updates)))
    lam = values[pos:]
    return ObserverParams(ops, lam, params.kernel_shape, params.tau)


@functools.lru_cache(maxsize=256)
def _cached_kernel(kind: str, values: tuple[float, ...], shape: tuple[int, int, int]) -> KernelTensor:
    return kern.build_kernel(kind, _params_from_values(kind, values), shape)


@functools.lru_cache(maxsize=64)
def _cached_gradients(kind: str, values: tuple[float, ...], shape: tuple[int, int, int]):
    return kern.kernel_param_gradients(kind, _params_from_values(kind, values), shape)


def _params_from_values(kind: str, values: tuple[float, ...]) -> Params:
    if kind == "cylinder":
        return CylinderParams(*values)
    if kind == "arrow":
        return ArrowParams(*values)
    if kind == "negsphere":
        return NegSphereParams(*values)
    raise ValueError(f"unknown kernel kind {kind!r}")


def _op_signature(op: Operator) -> tuple[float, ...]:
    names = {"cylinder": ("r", "sigma"), "arrow": ("r", "sigma", "h", "r_c", "beta"),
             "negsphere": ("r", "sigma", "omega")}[op.kind]
    return tuple(float(getattr(op.params, n)) for n in names)


def build_kernels(params: ObserverParams) -> list[KernelTensor]:
    """Normalized kernel per operator, memoized on (kind, values, shape)."""
    return [_cached_kernel(op.kind, _op_signature(op), params.kernel_shape) for op in params.operators]


def build_kernel_gradients(params: ObserverParams):
    """[(normalized kernel, {param: d kernel/d param}), ...] per operator."""
    return [_cached_gradients(op.kind, _op_signature(op), params.kernel_shape) for op in params.operators]


def operator_responses(grid: np.ndarray, params: ObserverParams, method: str = "auto") -> list[np.ndarray]:
    """Unweighted per-operator responses, for post-hoc attribution."""
    ks = build_kernels(params)
    if method == "auto":
        spectrum = GridSpectrum(np.asarray(grid, dtype=np.float64), params.kernel_shape)
        return [spectrum.correlate(k) for k in ks]
    return [conv3d(grid, k, method=method) for k in ks]


def observer(grid: np.ndarray, params: ObserverParams, method: str = "auto") -> np.ndarray:
    """Convex combination of the operator responses."""
    responses = operator_responses(grid, params, method=method)
    lam = params.lambdas
    out = lam[0] * responses[0]
    for w, resp in zip(lam[1:], responses[1:]):
        out += w * resp
    return out


def forward(grid: np.ndarray, params: ObserverParams, method: str = "auto") -> np.ndarray:
    """Per-voxel probability: tanh of the observer, clamped at zero."""
    return np.maximum(np.tanh(observer(grid, params, method=method)), 0.0)


def predict(grid: np.ndarray, params: ObserverParams, tau: float | None = None, method: str = "auto") -> np.ndarray:
    """Binary mask: probability >= tau."""
    t = params.tau if tau is None else tau
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {t}")
    return (forward(grid, params, method=method) >= t).astype(np.uint8)


def rediscretize(params: ObserverParams, new_shape: tuple[int, int, int]) -> ObserverParams:
    """Same trainable values on a new kernel lattice.

    Arrow heights scale proportionally with kernel depth (rounded, clamped to
    [1, k_z - 1]) so the cylinder/cone split fraction is preserved.
    """
    new_shape = tuple(int(s) for s in new_shape)
    if len(new_shape) != 3 or any(s < 1 for s in new_shape):
        raise ValueError(f"invalid kernel shape {new_shape}")
    old_kz = params.kernel_shape[0]
    ops = []
    for op in params.operators:
        if op.kind == "arrow":
            h = round(op.params.h * new_shape[0] / old_kz)
            h = min(max(h, 1), new_shape[0] - 1)
            if not 0 < h < new_shape[0]:
                raise ValueError(f"kernel depth {new_shape[0]} too small for an arrow kernel")
            ops.append(Operator("arrow", replace(op.params, h=float(h))))
        else:
            ops.append(Operator(op.kind, replace(op.params)))
    return ObserverParams(ops, params.lambda_free.copy(), new_shape, params.tau)


def save_checkpoint(params: ObserverParams, path: str | os.PathLike) -> None:
    """Write the standard model as JSON with every parameter under its name."""
    params._std()
    values = get_trainable(params)
    assert len(values) == 11, f"standard model must have 11 trainable scalars, found {len(values)}"
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kernel_shape": list(params.kernel_shape),
        "tau": params.tau,
        "cylinder": {"r": params.cylinder.r, "sigma": params.cylinder.sigma},
        "arrow": {
            "r": params.arrow.r,
            "sigma": params.arrow.sigma,
            "h": params.arrow.h,
            "r_c": params.arrow.r_c,
            "beta": params.arrow.beta,
        },
        "negsphere": {
            "r": params.negsphere.r,
            "sigma": params.negsphere.sigma,
            "omega": params.negsphere.omega,
        },
        "lambda": {
            "lambda_cy": params.lambda_cy,
            "lambda_ar": params.lambda_ar,
            "lambda_ns": params.lambda_ns,
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _require(doc: dict, section: str, field_name: str) -> float:
    if field_name not in doc:
        raise CheckpointError(f"checkpoint missing field {section}.{field_name}" if section else
                              f"checkpoint missing field {field_name}")
    return doc[field_name]


def load_checkpoint(path: str | os.PathLike) -> ObserverParams:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc

    version = _require(doc, "", "format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format_version {version} unsupported (expected {CHECKPOINT_VERSION})")
    shape = tuple(int(v) for v in _require(doc, "", "kernel_shape"))
    tau = float(_require(doc, "", "tau"))
    if not 0.0 <= tau <= 1.0 or not math.isfinite(tau):
        raise CheckpointError(f"{path}: tau={tau} outside [0, 1]")

    cyl_doc = _require(doc, "", "cylinder")
    arr_doc = _require(doc, "", "arrow")
    ns_doc = _require(doc, "", "negsphere")
    lam_doc = _require(doc, "", "lambda")

    cyl = CylinderParams(
        r=float(_require(cyl_doc, "cylinder", "r")),
        sigma=float(_require(cyl_doc, "cylinder", "sigma")),
    )
    arr = ArrowParams(
        r=float(_require(arr_doc, "arrow", "r")),
        sigma=float(_require(arr_doc, "arrow", "sigma")),
        h=float(_require(arr_doc, "arrow", "h")),
        r_c=float(_require(arr_doc, "arrow", "r_c")),
        beta=float(_require(arr_doc, "arrow", "beta")),
    )
    ns = NegSphereParams(
        r=float(_require(ns_doc, "negsphere", "r")),
        sigma=float(_require(ns_doc, "negsphere", "sigma")),
        omega=float(_require(ns_doc, "negsphere", "omega")),
    )
    lam_cy = float(_require(lam_doc, "lambda", "lambda_cy"))
    lam_ar = float(_require(lam_doc, "lambda", "lambda_ar"))
    # lambda_ns is informational in the file; the loaded value is derived.

    try:
        cyl.validate()
        arr.validate()
        ns.validate()
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc

    params = ObserverParams.standard(cyl, arr, ns, lam_cy, lam_ar, kernel_shape=shape, tau=tau)
    assert len(get_trainable(params)) == 11
    return params


def inspect(params: ObserverParams) -> str:
    """Human-readable parameter report with weights shown as percentages."""
    lam = params.lambdas
    lines = [
        f"{len(get_trainable(params))} trainable parameters"
        f" | kernel {params.kernel_shape[0]}x{params.kernel_shape[1]}x{params.kernel_shape[2]}"
        f" | tau = {params.tau:.4f}",
        "",
    ]
    counts: dict[str, int] = {}
    multi = {k: sum(op.kind == k for op in params.operators) for k in kern.KINDS}
    for op, weight in zip(params.operators, lam):
        i = counts.get(op.kind, 0)
        counts[op.kind] = i + 1
        name = op.kind if multi[op.kind] == 1 else f"{op.kind}{i}"
        lines.append(f"{name}: holds {100.0 * weight:.2f}% of the output")
        for p in TRAINABLE[op.kind]:
            lines.append(f"  {p:<6} = {getattr(op.params, p): .6f}   [trainable]")
        if op.kind == "arrow":
            lines.append(f"  {'h':<6} = {op.params.h: .6f}   [fixed, not trainable]")
    lines.append("mixing weights")
    if params.is_standard:
        lines.append(f"  lambda_cy = {lam[0]: .6f}   [trainable]")
        lines.append(f"  lambda_ar = {lam[1]: .6f}   [trainable]")
        lines.append(f"  lambda_ns = {lam[2]: .6f}   [derived: 1 - lambda_cy - lambda_ar]")
    else:
        for i, w in enumerate(lam[:-1]):
            lines.append(f"  lambda{i} = {w: .6f}   [trainable]")
        lines.append(f"  lambda{len(lam) - 1} = {lam[-1]: .6f}   [derived]")
    return "\n".join(lines)
