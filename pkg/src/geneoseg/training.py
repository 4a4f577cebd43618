"""Losses, gradients, optimizer and the training loop for the observer model.

The segmentation loss is a density-weighted squared error: background voxels
weigh ``epsilon`` and target voxels ``epsilon + alpha``, which counteracts the
roughly 1:200 class imbalance of tower voxels. Non-negativity of the trainable
parameters (including the derived mixing weight) is kept soft through a hinge
penalty instead of projection. An optional Tversky term with separate
false-positive/false-negative prices can be mixed in.

Gradients are assembled analytically: loss -> probability -> tanh/relu ->
response -> (adjoint of the convolution) -> kernel weight tensors -> shape
parameters, with the mixing weights handled directly through the responses.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import model as mdl
from .conv import GridSpectrum, conv3d
from .kernels import TRAINABLE, ArrowParams, CylinderParams, NegSphereParams
from .model import ObserverParams, get_trainable, set_trainable, trainable_names
from .pointcloud import devoxelize


class NumericalError(RuntimeError):
    """A loss or gradient stopped being finite."""


@dataclass
class LossConfig:
    alpha: float = 5.0            # weighting emphasis on target voxels
    epsilon: float = 0.1          # weight floor
    rho_l: float = 5.0            # negativity penalty scale, mixing weights
    rho_t: float = 5.0            # negativity penalty scale, shape parameters
    tversky_enabled: bool = False
    tversky_alpha: float = 0.5    # false-positive price
    tversky_beta: float = 0.5     # false-negative price
    tversky_delta: float = 1.0    # smoothing
    tversky_mix: float = 1.0

    def validate(self) -> None:
        if self.alpha < 0 or self.epsilon <= 0:
            raise ValueError("alpha must be nonnegative and epsilon positive")
        if self.rho_l < 0 or self.rho_t < 0:
            raise ValueError("penalty scales must be nonnegative")
        if self.tversky_alpha <= 0 or self.tversky_beta <= 0 or self.tversky_delta <= 0:
            raise ValueError("tversky alpha, beta, delta must be positive")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-3
    decay: float = 0.9            # RMSProp squared-gradient decay
    stabilizer: float = 1e-8
    kernel_shape: tuple[int, int, int] = (9, 9, 9)
    loss: LossConfig = field(default_factory=LossConfig)
    threshold_criterion: str = "iou"


@dataclass
class RmsPropState:
    learning_rate: float
    decay: float
    stabilizer: float
    acc: np.ndarray               # per-parameter squared-gradient average

    @classmethod
    def fresh(cls, n: int, learning_rate: float = 1e-3, decay: float = 0.9,
              stabilizer: float = 1e-8) -> "RmsPropState":
        return cls(learning_rate, decay, stabilizer, np.zeros(n))


@dataclass
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    iou: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int = 0) -> "Metrics":
        return cls(
            tp=tp, fp=fp, fn=fn, tn=tn,
            precision=_ratio(tp, tp + fp),
            recall=_ratio(tp, tp + fn),
            iou=_ratio(tp, tp + fp + fn),
        )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0   # 0/0 -> 0: empty scenes do not inflate scores


def weight_map(labels: np.ndarray, alpha: float, epsilon: float) -> np.ndarray:
    """Per-voxel loss weights: epsilon on background, epsilon + alpha on target.

    alpha = 0 degenerates to uniform weights (weighting disabled).
    """
    if alpha < 0 or epsilon <= 0:
        raise ValueError("alpha must be nonnegative and epsilon positive")
    return epsilon + alpha * np.asarray(labels, dtype=np.float64)


def seg_loss(prob: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    prob = np.asarray(prob, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if prob.shape != labels.shape or prob.shape != np.shape(weights):
        raise ValueError("prob, labels and weights must share a shape")
    return float(np.mean(weights * (prob - labels) ** 2))


def tversky_loss(prob: np.ndarray, labels: np.ndarray, config: LossConfig) -> float:
    prob = np.asarray(prob, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if prob.shape != labels.shape:
        raise ValueError("prob and labels must share a shape")
    overlap = float((labels * prob).sum())
    fp = float(((1.0 - labels) * prob).sum())
    fn = float((labels * (1.0 - prob)).sum())
    num = overlap + config.tversky_delta
    den = overlap + config.tversky_alpha * fp + config.tversky_beta * fn + config.tversky_delta
    return 1.0 - num / den


def _hinge(x: float) -> float:
    return max(0.0, -x)


def negativity_penalty(params: ObserverParams, rho_l: float, rho_t: float) -> float:
    """rho_l * sum hinge(lambda_i) + rho_t * sum hinge(shape params).

    The mixing sum runs over the full weight vector including the derived
    last weight, so driving the free weights past a sum of 1 is penalized.
    """
    lam_term = sum(_hinge(v) for v in params.lambdas)
    shape_term = 0.0
    for op in params.operators:
        for f in vars(op.params).values():
            shape_term += _hinge(f)
    return rho_l * lam_term + rho_t * shape_term


def total_loss(prob: np.ndarray, labels: np.ndarray, params: ObserverParams, config: LossConfig) -> float:
    w = weight_map(labels, config.alpha, config.epsilon)
    loss = seg_loss(prob, labels, w) + negativity_penalty(params, config.rho_l, config.rho_t)
    if config.tversky_enabled:
        loss += config.tversky_mix * tversky_loss(prob, labels, config)
    return loss


def backward(
    grid: np.ndarray,
    labels: np.ndarray,
    params: ObserverParams,
    config: LossConfig,
    spectrum: GridSpectrum | None = None,
) -> tuple[float, np.ndarray]:
    """Total loss and its gradient over the trainable vector.

    ReLU and hinge subgradients at exactly 0 are taken as 0; tanh' = 1 - tanh^2.
    Pass a precomputed ``spectrum`` of the grid to amortize its FFT.
    """
    grid = np.asarray(grid, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if spectrum is None:
        spectrum = GridSpectrum(grid, params.kernel_shape)
    kgrads = mdl.build_kernel_gradients(params)
    responses = [spectrum.correlate(k) for k, _ in kgrads]
    lam = params.lambdas

    h_field = lam[0] * responses[0]
    for w_i, resp in zip(lam[1:], responses[1:]):
        h_field = h_field + w_i * resp
    t = np.tanh(h_field)
    prob = np.maximum(t, 0.0)

    loss = total_loss(prob, y, params, config)

    n_vox = prob.size
    w = weight_map(y, config.alpha, config.epsilon)
    dl_dprob = 2.0 * w * (prob - y) / n_vox
    if config.tversky_enabled:
        overlap = float((y * prob).sum())
        fp = float(((1.0 - y) * prob).sum())
        fn = float((y * (1.0 - prob)).sum())
        num = overlap + config.tversky_delta
        den = overlap + config.tversky_alpha * fp + config.tversky_beta * fn + config.tversky_delta
        dden = y + config.tversky_alpha * (1.0 - y) - config.tversky_beta * y
        dl_dprob += config.tversky_mix * (num * dden - y * den) / (den * den)

    upstream = dl_dprob * (h_field > 0.0) * (1.0 - t * t)
    window = spectrum.adjoint(upstream)

    grads = []
    for (kernel, kgrad), op, lam_i in zip(kgrads, params.operators, lam):
        for p in TRAINABLE[op.kind]:
            g = lam_i * float((kgrad[p] * window).sum())
            if getattr(op.params, p) < 0.0:
                g -= config.rho_t
            grads.append(g)
    last = responses[-1]
    lam_last = lam[-1]
    for j, resp in enumerate(responses[:-1]):
        g = float((upstream * (resp - last)).sum())
        if lam[j] < 0.0:
            g -= config.rho_l
        if lam_last < 0.0:
            g += config.rho_l
        grads.append(g)
    return loss, np.array(grads)


def optimizer_step(
    params: ObserverParams, grads: np.ndarray, state: RmsPropState
) -> tuple[ObserverParams, RmsPropState]:
    grads = np.asarray(grads, dtype=np.float64)
    if not np.isfinite(grads).all():
        bad = trainable_names(params)[int(np.flatnonzero(~np.isfinite(grads))[0])]
        raise NumericalError(f"non-finite gradient for parameter {bad}")
    acc = state.decay * state.acc + (1.0 - state.decay) * grads * grads
    values = get_trainable(params) - state.learning_rate * grads / (np.sqrt(acc) + state.stabilizer)
    new_state = RmsPropState(state.learning_rate, state.decay, state.stabilizer, acc)
    return set_trainable(params, values), new_state


def init_operator(rng: np.random.Generator, kind: str, kernel_shape: tuple[int, int, int]) -> mdl.Operator:
    """Random positive parameters on ranges suited to the kernel footprint."""
    k_z = kernel_shape[0]
    k_xy = min(kernel_shape[1], kernel_shape[2])
    if kind == "cylinder":
        return mdl.Operator(kind, CylinderParams(
            r=rng.uniform(0.5, k_xy / 2), sigma=rng.uniform(1.0, 10.0)))
    if kind == "arrow":
        return mdl.Operator(kind, ArrowParams(
            r=rng.uniform(0.5, k_xy / 2), sigma=rng.uniform(1.0, 10.0),
            h=float(round(0.7 * k_z)), r_c=rng.uniform(0.5, k_xy / 2),
            beta=rng.uniform(0.05, 0.4)))
    if kind == "negsphere":
        return mdl.Operator(kind, NegSphereParams(
            r=rng.uniform(0.5, k_xy / 2), sigma=rng.uniform(1.0, 10.0),
            omega=rng.uniform(0.1, 0.9)))
    raise ValueError(f"unknown kernel kind {kind!r}")


def init_from_kinds(
    rng: np.random.Generator, kinds: Sequence[str], kernel_shape: tuple[int, int, int]
) -> ObserverParams:
    """Random model over an explicit operator multiset.

    Free mixing weights are drawn uniformly from [0, 2/(K-1)] so their
    expected sum is 1; a single-operator model has no free weight at all.
    """
    ops = [init_operator(rng, kind, kernel_shape) for kind in kinds]
    k = len(kinds)
    lam = rng.uniform(0.0, 2.0 / (k - 1), size=k - 1) if k > 1 else np.zeros(0)
    return ObserverParams(ops, lam, tuple(kernel_shape))


def init_params(seed: int, n_operators: int = 3, kernel_shape: tuple[int, int, int] = (9, 9, 9)) -> ObserverParams:
    """Deterministic random initialization; n_operators = 3 is the production model."""
    if n_operators < 2:
        raise ValueError("n_operators must be >= 2")
    rng = np.random.default_rng(seed)
    kinds = [mdl.STANDARD_KINDS[i % 3] for i in range(n_operators)]
    return init_from_kinds(rng, kinds, kernel_shape)


def _unpack(scene) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scene, tuple):
        return np.asarray(scene[0]), np.asarray(scene[1])
    return np.asarray(scene.grid.values), np.asarray(scene.labels.values)


@dataclass
class _Prepared:
    occ: np.ndarray
    lab: np.ndarray
    spectrum: GridSpectrum


def _prepare(scene, kernel_shape: tuple[int, int, int]) -> "_Prepared":
    occ, lab = _unpack(scene)
    occ = np.asarray(occ, dtype=np.float64)
    return _Prepared(occ, np.asarray(lab, dtype=np.float64), GridSpectrum(occ, kernel_shape))


def _forward_prepared(prep: _Prepared, params: ObserverParams) -> np.ndarray:
    kernels = mdl.build_kernels(params)
    lam = params.lambdas
    h_field = lam[0] * prep.spectrum.correlate(kernels[0])
    for w_i, k in zip(lam[1:], kernels[1:]):
        h_field += w_i * prep.spectrum.correlate(k)
    return np.maximum(np.tanh(h_field), 0.0)


THRESHOLD_GRID = np.arange(101) / 100.0


def _threshold_counts(probs_labels: Iterable[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, ...]:
    """tp/fp/fn/tn per candidate threshold, micro-aggregated over scenes."""
    pos_hist = np.zeros(102, dtype=np.int64)
    neg_hist = np.zeros(102, dtype=np.int64)
    for prob, labels in probs_labels:
        idx = np.searchsorted(THRESHOLD_GRID, prob.ravel(), side="right")
        y = np.asarray(labels).ravel().astype(bool)
        pos_hist += np.bincount(idx[y], minlength=102)
        neg_hist += np.bincount(idx[~y], minlength=102)
    # predicted positive at threshold j iff prob >= grid[j] iff idx > j
    tp = np.cumsum(pos_hist[::-1])[::-1][1:]
    fp = np.cumsum(neg_hist[::-1])[::-1][1:]
    fn = pos_hist.sum() - tp
    tn = neg_hist.sum() - fp
    return tp, fp, fn, tn


def _criterion_curve(tp, fp, fn, criterion: str, beta: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        if criterion == "iou":
            return np.where(tp + fp + fn > 0, tp / np.maximum(tp + fp + fn, 1), 0.0)
        if criterion == "precision":
            return precision
        if criterion == "f_beta":
            b2 = beta * beta
            den = b2 * precision + recall
            return np.where(den > 0, (1 + b2) * precision * recall / np.where(den > 0, den, 1), 0.0)
    raise ValueError(f"unknown threshold criterion {criterion!r}")


def _best_threshold(curve: np.ndarray) -> float:
    best = len(curve) - 1 - int(np.argmax(curve[::-1]))  # ties toward larger tau
    return float(THRESHOLD_GRID[best])


def tune_threshold(params: ObserverParams, scenes: Iterable, criterion: str = "iou",
                   beta: float = 1.0) -> float:
    """Best tau on a 101-point grid, ties broken toward the larger value."""
    pairs = ((mdl.forward(occ, params), lab) for occ, lab in map(_unpack, scenes))
    tp, fp, fn, _ = _threshold_counts(pairs)
    if tp[0] + fp[0] + fn[0] == 0:
        raise ValueError("cannot tune the threshold on an empty set")
    return _best_threshold(_criterion_curve(tp, fp, fn, criterion, beta))


def evaluate(params: ObserverParams, scenes: Iterable, level: str = "voxel") -> Metrics:
    """Micro-averaged metrics over a scene iterable, at voxel or point level."""
    if level not in ("voxel", "point"):
        raise ValueError(f"unknown evaluation level {level!r}")
    tp = fp = fn = tn = 0
    n_scenes = 0
    for scene in scenes:
        n_scenes += 1
        occ, lab = _unpack(scene)
        mask = mdl.predict(occ, params)
        if level == "point":
            pred = devoxelize(mask, scene.vmap).astype(bool)
            truth = np.asarray(scene.point_truth).astype(bool)
        else:
            pred = mask.astype(bool).ravel()
            truth = lab.astype(bool).ravel()
        tp += int(np.sum(pred & truth))
        fp += int(np.sum(pred & ~truth))
        fn += int(np.sum(~pred & truth))
        tn += int(np.sum(~pred & ~truth))
    if n_scenes == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return Metrics.from_counts(tp, fp, fn, tn)


def train(
    train_scenes: Sequence,
    val_scenes: Sequence,
    config: TrainConfig,
    seed: int,
    init: ObserverParams | None = None,
) -> tuple[ObserverParams, list[dict]]:
    """Mini-batch training; returns the best-validation-IoU parameters.

    Each epoch shuffles the training set, averages gradients over batches of
    ``batch_size``, and evaluates the validation split with a freshly tuned
    threshold. Fixed seed means a bit-identical trajectory.
    """
    config.loss.validate()
    if not len(train_scenes) or not len(val_scenes):
        raise ValueError("training and validation splits must be non-empty")
    params = init if init is not None else init_params(seed, 3, config.kernel_shape)
    if config.epochs == 0:
        return params, []

    shuffle_rng = np.random.default_rng([seed, 0xBA7C4])
    state = RmsPropState.fresh(len(get_trainable(params)), config.learning_rate,
                               config.decay, config.stabilizer)
    cached = [_prepare(s, config.kernel_shape) for s in train_scenes]
    cached_val = [_prepare(s, config.kernel_shape) for s in val_scenes]

    history: list[dict] = []
    best = (-1.0, params, params.tau)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(cached))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grad_sum = None
            for i in batch:
                prep = cached[i]
                loss, grad = backward(prep.occ, prep.lab, params, config.loss,
                                      spectrum=prep.spectrum)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, scene {i}")
                epoch_losses.append(loss)
                grad_sum = grad if grad_sum is None else grad_sum + grad
            params, state = optimizer_step(params, grad_sum / len(batch), state)

        val_probs = [(_forward_prepared(prep, params), prep.lab) for prep in cached_val]
        val_loss = float(np.mean([total_loss(p, l, params, config.loss) for p, l in val_probs]))
        tp, fp, fn, tn = _threshold_counts(val_probs)
        tau = _best_threshold(_criterion_curve(tp, fp, fn, config.threshold_criterion, 1.0))
        j = int(round(tau * 100))
        metrics = Metrics.from_counts(int(tp[j]), int(fp[j]), int(fn[j]), int(tn[j]))
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "val_precision": metrics.precision,
            "val_recall": metrics.recall,
            "val_iou": metrics.iou,
            "wall_seconds": time.perf_counter() - t0,
        })
        if metrics.iou >= best[0]:
            best = (metrics.iou, params, tau)

    _, best_params, best_tau = best
    final = ObserverParams(best_params.operators, best_params.lambda_free,
                           best_params.kernel_shape, best_tau)
    return final, history


def write_history(history: list[dict], path: str) -> None:
    cols = ["epoch", "train_loss", "val_loss", "val_precision", "val_recall", "val_iou", "wall_seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(history)


def finite_difference_gradient(
    grid: np.ndarray, labels: np.ndarray, params: ObserverParams, config: LossConfig,
    step: float = 1e-4,
) -> np.ndarray:
    """Central finite differences of the total loss over the trainable vector."""
    base = get_trainable(params)
    out = np.zeros_like(base)
    for i in range(len(base)):
        hi = base.copy()
        hi[i] += step
        lo = base.copy()
        lo[i] -= step
        p_hi = set_trainable(params, hi)
        p_lo = set_trainable(params, lo)
        l_hi = total_loss(mdl.forward(grid, p_hi), labels, p_hi, config)
        l_lo = total_loss(mdl.forward(grid, p_lo), labels, p_lo, config)
        out[i] = (l_hi - l_lo) / (2.0 * step)
    return out


def _fd_safe(grid: np.ndarray, params: ObserverParams, step: float) -> bool:
    """Whether central differences of size ``step`` stay clear of every kink.

    The loss is piecewise smooth: relu at observer value 0, hinge penalties
    at parameter value 0, and the L1 normalization cap. A random draw can
    land so close to a kink that the finite difference straddles it; the
    analytic subgradient is still well defined there, but the comparison is
    not, so such configurations are redrawn.
    """
    margin = 2.0 * step
    values = np.append(get_trainable(params), params.lambdas[-1])
    if np.any(np.abs(values) <= margin):
        return False
    kgrads = mdl.build_kernel_gradients(params)
    responses = [conv3d(grid, k) for k, _ in kgrads]
    lam = params.lambdas
    h_field = sum(w * r for w, r in zip(lam, responses))

    rate = np.zeros_like(h_field)   # per-voxel bound on |dH/d theta|, any theta
    for (kernel, kgrad), op, lam_i in zip(kgrads, params.operators, lam):
        for p in TRAINABLE[op.kind]:
            rate = np.maximum(rate, np.abs(lam_i) * np.abs(conv3d(grid, kgrad[p])))
    for resp in responses[:-1]:
        rate = np.maximum(rate, np.abs(resp - responses[-1]))
    crossing = (h_field != 0.0) & (np.abs(h_field) <= margin * rate)
    return not crossing.any()


def run_gradcheck(
    seed: int = 0,
    n_trials: int = 20,
    grid_shape: tuple[int, int, int] = (16, 16, 16),
    step: float = 1e-4,
    rel_tol: float = 1e-3,
    abs_tol: float = 1e-7,
    corrupt: str | None = None,
) -> dict:
    """Analytic vs finite-difference gradients over random configurations.

    Draws that would run a finite difference across a relu or hinge kink are
    redrawn (see ``_fd_safe``); the subgradient convention is untestable by
    central differences. ``corrupt`` names a parameter whose analytic
    gradient is deliberately poisoned, for verifying that the check fails
    when it should.
    """
    worst = {"rel": 0.0, "abs": 0.0, "name": "", "trial": -1}
    failures = []
    for trial in range(n_trials):
        rng = np.random.default_rng([seed, trial])
        occ = (rng.random(grid_shape) < 0.06).astype(np.float64)
        yc, xc = rng.integers(2, grid_shape[1] - 2), rng.integers(2, grid_shape[2] - 2)
        occ[:, yc, xc] = 1.0
        labels = ((occ > 0) & (rng.random(grid_shape) < 0.5)).astype(np.float64)
        config = LossConfig(tversky_enabled=bool(trial % 2))
        for _attempt in range(50):
            params = init_params(int(rng.integers(1 << 31)), 3, (9, 9, 9))
            if _fd_safe(occ, params, step):
                break

        _, grads = backward(occ, labels, params, config)
        names = trainable_names(params)
        if corrupt is not None:
            if corrupt not in names:
                raise ValueError(f"unknown parameter {corrupt!r}; expected one of {names}")
            grads = grads.copy()
            grads[names.index(corrupt)] = grads[names.index(corrupt)] * 1.5 + 1.0
        fd = finite_difference_gradient(occ, labels, params, config, step=step)

        for name, g, f in zip(names, grads, fd):
            if abs(f) < abs_tol:
                err = abs(g - f)
                ok = err <= abs_tol
                if err > worst["abs"] and not ok:
                    worst = {"rel": 0.0, "abs": err, "name": name, "trial": trial}
            else:
                err = abs(g - f) / abs(f)
                ok = err <= rel_tol
                if err > worst["rel"]:
                    worst = {"rel": err, "abs": abs(g - f), "name": name, "trial": trial}
            if not ok:
                failures.append((trial, name, err))
    return {"passed": not failures, "failures": failures, "worst": worst, "n_trials": n_trials}
