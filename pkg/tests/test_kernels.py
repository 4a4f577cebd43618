import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geneoseg import kernels as K

CENTER = np.array([4.0, 4.0, 4.0])


def rand_params(rng, kind):
    if kind == "cylinder":
        return K.CylinderParams(r=rng.uniform(0.5, 4.5), sigma=rng.uniform(1.0, 10.0))
    if kind == "arrow":
        return K.ArrowParams(r=rng.uniform(0.5, 4.5), sigma=rng.uniform(1.0, 10.0),
                             h=float(rng.integers(2, 8)), r_c=rng.uniform(0.5, 4.5),
                             beta=rng.uniform(0.05, 0.4))
    return K.NegSphereParams(r=rng.uniform(0.5, 4.5), sigma=rng.uniform(1.0, 10.0),
                             omega=rng.uniform(0.1, 0.9))


# ------------------------------------------------------------------- formulas

def test_cylinder_peak_on_radius():
    p = K.CylinderParams(r=2.0, sigma=1.5)
    x = CENTER + np.array([2.0, 0.0, 3.0])  # horizontal distance exactly r
    assert K.eval_cylinder(x, p, CENTER) == pytest.approx(1.0)


def test_cylinder_gaussian_tail():
    p = K.CylinderParams(r=1.0, sigma=0.5)
    x = CENTER + np.array([6.0, 0.0, 0.0])  # (36-1)^2 >> 2 sigma^2
    assert K.eval_cylinder(x, p, CENTER) < 1e-6


def test_cylinder_rotation_invariance():
    # value depends only on horizontal distance: rotate about the vertical axis
    rng = np.random.default_rng(0)
    p = K.CylinderParams(r=1.7, sigma=2.0)
    base = np.array([1.3, -0.4, 2.0])
    ref = K.eval_cylinder(CENTER + base, p, CENTER)
    for theta in rng.uniform(0, 2 * np.pi, 100):
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([c * base[0] - s * base[1], s * base[0] + c * base[1], base[2]])
        assert K.eval_cylinder(CENTER + rot, p, CENTER) == pytest.approx(ref, abs=1e-12)


def test_arrow_branches():
    p = K.ArrowParams(r=1.5, sigma=1.0, h=4.0, r_c=2.0, beta=0.25)
    below = CENTER.copy(); below[2] = 3.0; below[0] += 1.5
    assert K.eval_arrow(below, p, CENTER) == pytest.approx(1.0)
    cone_r = 2.0 * math.tan(0.25 * math.pi)
    above = CENTER.copy(); above[2] = 4.0; above[0] += cone_r
    assert K.eval_arrow(above, p, CENTER) == pytest.approx(1.0)


def test_arrow_beta_zero_is_vertical_spike():
    p = K.ArrowParams(r=1.5, sigma=1.0, h=4.0, r_c=2.0, beta=0.0)
    on_axis = CENTER.copy(); on_axis[2] = 5.0
    off_axis = on_axis.copy(); off_axis[0] += 1.0
    assert K.eval_arrow(on_axis, p, CENTER) == pytest.approx(1.0)
    assert K.eval_arrow(off_axis, p, CENTER) < 1.0


def test_negsphere_extremes():
    p = K.NegSphereParams(r=2.0, sigma=1.0, omega=0.3)
    on_shell = CENTER + np.array([0.0, 0.0, 2.0])
    assert K.eval_negsphere(on_shell, p, CENTER) == pytest.approx(1.0 - 0.3)
    far = CENTER + np.array([50.0, 0.0, 0.0])
    assert K.eval_negsphere(far, p, CENTER) == pytest.approx(-0.3)


def test_negsphere_full_rotation_invariance():
    rng = np.random.default_rng(1)
    p = K.NegSphereParams(r=1.5, sigma=2.0, omega=0.5)
    base = np.array([0.9, -1.1, 0.7])
    ref = K.eval_negsphere(CENTER + base, p, CENTER)
    for _ in range(100):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        assert K.eval_negsphere(CENTER + rot @ base, p, CENTER) == pytest.approx(ref, abs=1e-12)


# --------------------------------------------------------------- discretize

def test_cylinder_slices_identical():
    k = K.discretize("cylinder", K.CylinderParams(2.0, 3.0), (9, 9, 9))
    for z in range(1, 9):
        assert np.array_equal(k.weights[z], k.weights[0])


def test_arrow_slice_split_at_h():
    pa = K.ArrowParams(r=2.0, sigma=3.0, h=6.0, r_c=1.0, beta=0.2)
    ka = K.discretize("arrow", pa, (9, 9, 9))
    kc = K.discretize("cylinder", K.CylinderParams(2.0, 3.0), (9, 9, 9))
    assert np.array_equal(ka.weights[:6], kc.weights[:6])
    assert not np.array_equal(ka.weights[6], kc.weights[6])
    for z in range(7, 9):
        assert np.array_equal(ka.weights[z], ka.weights[6])


def test_negsphere_matches_bruteforce_loop():
    p = K.NegSphereParams(r=2.0, sigma=2.5, omega=0.4)
    shape = (5, 7, 6)
    k = K.discretize("negsphere", p, shape)
    cz, cy, cx = (shape[0] - 1) / 2, (shape[1] - 1) / 2, (shape[2] - 1) / 2
    for i in range(shape[0]):
        for j in range(shape[1]):
            for l in range(shape[2]):
                rho2 = (i - cz) ** 2 + (j - cy) ** 2 + (l - cx) ** 2
                want = math.exp(-((rho2 - p.r**2) ** 2) / (2 * p.sigma**2)) - p.omega
                assert k.weights[i, j, l] == pytest.approx(want, abs=1e-14)


def test_cylinder_quarter_turn_symmetry():
    k = K.discretize("cylinder", K.CylinderParams(1.5, 2.0), (3, 7, 7))
    assert np.allclose(k.weights, np.rot90(k.weights, axes=(1, 2)))


def test_arrow_h_out_of_range():
    with pytest.raises(ValueError, match="h="):
        K.discretize("arrow", K.ArrowParams(1, 1, 9.0, 1, 0.2), (9, 9, 9))


# ---------------------------------------------------------------- normalize

@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["cylinder", "arrow"]), st.integers(0, 2**32 - 1))
def test_zero_sum_and_l1_cap(kind, seed):
    rng = np.random.default_rng(seed)
    k = K.normalize(K.discretize(kind, rand_params(rng, kind), (9, 9, 9)))
    assert abs(k.weights.sum()) <= 1e-9
    assert k.l1() <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_negsphere_normalization_preserves_sign(seed):
    rng = np.random.default_rng(seed)
    raw = K.discretize("negsphere", rand_params(rng, "negsphere"), (9, 9, 9))
    norm = K.normalize(raw)
    factor = max(1.0, np.abs(raw.weights).sum())
    assert norm.weights.sum() == pytest.approx(raw.weights.sum() / factor, rel=1e-12)
    assert norm.l1() <= 1 + 1e-12


def test_degenerate_constant_kernel():
    # a single-voxel cylinder kernel is constant: zero-sum wipes it out
    with pytest.raises(K.DegenerateKernelError):
        K.normalize(K.discretize("cylinder", K.CylinderParams(1.0, 1.0), (1, 1, 1)))


# ---------------------------------------------------------------- gradients

def fd_kernel_gradient(kind, params, shape, name, step=1e-6):
    hi = K.normalize(K.discretize(kind, replace(params, **{name: getattr(params, name) + step}), shape))
    lo = K.normalize(K.discretize(kind, replace(params, **{name: getattr(params, name) - step}), shape))
    return (hi.weights - lo.weights) / (2 * step)


@pytest.mark.parametrize("kind", ["cylinder", "arrow", "negsphere"])
def test_gradients_match_finite_differences_100_draws(kind):
    rng = np.random.default_rng(42)
    for _ in range(100):
        params = rand_params(rng, kind)
        _, grads = K.kernel_param_gradients(kind, params, (9, 9, 9))
        for name, g in grads.items():
            fd = fd_kernel_gradient(kind, params, (9, 9, 9), name)
            big = np.abs(fd) >= 1e-8
            if big.any():
                rel = np.abs(g - fd)[big] / np.abs(fd)[big]
                assert rel.max() <= 1e-4, f"{kind}.{name} rel {rel.max():.2e}"
            if (~big).any():
                assert np.abs(g - fd)[~big].max() <= 1e-8, f"{kind}.{name}"


def test_cylinder_radius_gradient_at_shell_voxel():
    # raw derivative vanishes where the voxel sits exactly on the radius; the
    # normalized derivative there is driven by the mean shift (plus the small
    # L1-cap correction)
    p = K.CylinderParams(r=2.0, sigma=3.0)
    shape = (9, 9, 9)
    raw = K.discretize("cylinder", p, shape)
    raw_dr = K._raw_gradients("cylinder", p, shape)["r"]
    assert raw_dr[0, 4, 6] == pytest.approx(0.0, abs=1e-15)  # (y,x)=(4,6): d == r
    centered = raw.weights - raw.weights.mean()
    l1 = np.abs(centered).sum()
    dl1 = (np.sign(centered) * (raw_dr - raw_dr.mean())).sum()
    want = -raw_dr.mean() / l1 - centered[0, 4, 6] * dl1 / l1**2
    _, grads = K.kernel_param_gradients("cylinder", p, shape)
    assert grads["r"][0, 4, 6] == pytest.approx(want, rel=1e-12)


def test_negsphere_omega_gradient_uncapped_is_minus_one():
    # a 1-voxel kernel keeps L1 below the cap, so d/d omega passes through
    p = K.NegSphereParams(r=1.0, sigma=1.0, omega=0.5)
    _, grads = K.kernel_param_gradients("negsphere", p, (1, 1, 1))
    assert grads["omega"][0, 0, 0] == pytest.approx(-1.0)


def test_cone_radius_overflow_rejected():
    # tan(beta*pi) itself never overflows in float64; the squared cone radius does
    p = K.ArrowParams(r=1, sigma=1, h=4, r_c=1e200, beta=0.4)
    with pytest.raises(K.ParameterRangeError, match="cone radius"):
        K.kernel_param_gradients("arrow", p, (9, 9, 9))


# -------------------------------------------------------------------- io

def test_kvol_roundtrip(tmp_path):
    k = K.build_kernel("arrow", K.ArrowParams(2.0, 3.0, 6.0, 1.5, 0.2), (9, 5, 5))
    path = tmp_path / "k.kvol"
    K.save_kernel(k, str(path))
    back = K.load_kernel(str(path))
    assert back.kind == "arrow"
    assert back.shape == (9, 5, 5)
    assert np.allclose(back.weights, k.weights, rtol=1e-8)


def test_validate_ranges():
    with pytest.raises(K.ParameterRangeError):
        K.CylinderParams(-1.0, 1.0).validate()
    with pytest.raises(K.ParameterRangeError):
        K.ArrowParams(1, 1, 4, 1, 0.6).validate()
    with pytest.raises(K.ParameterRangeError):
        K.NegSphereParams(1, 1, 0.0).validate()
