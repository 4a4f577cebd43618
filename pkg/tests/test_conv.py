import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geneoseg import kernels as K
from geneoseg.conv import (
    GridSpectrum,
    check_equivariance,
    check_nonexpansivity,
    conv3d,
    gradient_window,
    translate_grid,
)


def naive_conv(grid, kernel):
    """Six nested loops, straight from the definition."""
    out = np.zeros(grid.shape)
    anchor = [(k - 1) // 2 for k in kernel.shape]
    for vz in range(grid.shape[0]):
        for vy in range(grid.shape[1]):
            for vx in range(grid.shape[2]):
                acc = 0.0
                for dz in range(kernel.shape[0]):
                    for dy in range(kernel.shape[1]):
                        for dx in range(kernel.shape[2]):
                            z = vz + dz - anchor[0]
                            y = vy + dy - anchor[1]
                            x = vx + dx - anchor[2]
                            if 0 <= z < grid.shape[0] and 0 <= y < grid.shape[1] \
                                    and 0 <= x < grid.shape[2]:
                                acc += kernel[dz, dy, dx] * grid[z, y, x]
                out[vz, vy, vx] = acc
    return out


def normalized_kernels(seed=0, shape=(9, 9, 9)):
    rng = np.random.default_rng(seed)
    h = float(round(0.7 * shape[0]))
    return [
        K.build_kernel("cylinder", K.CylinderParams(rng.uniform(0.5, 4), rng.uniform(1, 8)), shape),
        K.build_kernel("arrow", K.ArrowParams(rng.uniform(0.5, 4), rng.uniform(1, 8), h,
                                              rng.uniform(0.5, 4), rng.uniform(0.05, 0.4)), shape),
        K.build_kernel("negsphere", K.NegSphereParams(rng.uniform(0.5, 4), rng.uniform(1, 8),
                                                      rng.uniform(0.1, 0.9)), shape),
    ]


# -------------------------------------------------------------------- conv3d

def test_zero_grid_zero_response():
    k = normalized_kernels()[0]
    assert not conv3d(np.zeros((12, 12, 12)), k).any()


def test_impulse_response_reflects_kernel():
    rng = np.random.default_rng(1)
    kernel = rng.normal(size=(5, 5, 5))
    grid = np.zeros((15, 15, 15))
    grid[7, 7, 7] = 1.0
    resp = conv3d(grid, kernel, method="direct")
    window = resp[5:10, 5:10, 5:10]
    assert np.allclose(window, np.flip(kernel), atol=1e-14)
    # impulse completeness: every weight appears exactly once, nothing else fires
    outside = resp.copy()
    outside[5:10, 5:10, 5:10] = 0.0
    assert not outside.any()
    assert np.allclose(np.sort(window.ravel()), np.sort(kernel.ravel()), atol=1e-14)


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(2)
    grid = rng.random((16, 16, 16))
    kernel = rng.normal(size=(5, 5, 5))
    want = naive_conv(grid, kernel)
    for method in ("direct", "fft", "auto"):
        assert np.abs(conv3d(grid, kernel, method=method) - want).max() <= 1e-10


def test_conv_even_kernel_floor_center():
    rng = np.random.default_rng(3)
    grid = rng.random((9, 8, 10))
    kernel = rng.normal(size=(2, 4, 3))
    want = naive_conv(grid, kernel)
    for method in ("direct", "auto"):
        assert np.abs(conv3d(grid, kernel, method=method) - want).max() <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fast_paths_match_direct(seed):
    rng = np.random.default_rng(seed)
    gs = tuple(rng.integers(5, 14, 3))
    ks = tuple(rng.integers(1, 5, 3))
    grid = rng.normal(size=gs)
    kernel = rng.normal(size=ks)
    ref = conv3d(grid, kernel, method="direct")
    assert np.abs(conv3d(grid, kernel, method="auto") - ref).max() <= 1e-8
    assert np.abs(conv3d(grid, kernel, method="fft") - ref).max() <= 1e-8


def test_conv_linearity():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(10, 10, 10))
    b = rng.normal(size=(10, 10, 10))
    k = rng.normal(size=(3, 3, 3))
    lhs = conv3d(a + b, k)
    rhs = conv3d(a, k) + conv3d(b, k)
    assert np.abs(lhs - rhs).max() <= 1e-10


def test_kernel_larger_than_grid():
    with pytest.raises(ValueError, match="larger"):
        conv3d(np.zeros((4, 4, 4)), np.zeros((5, 5, 5)))


def test_response_bounded_by_l1_on_binary_grids():
    rng = np.random.default_rng(5)
    grid = (rng.random((20, 20, 20)) < 0.3).astype(float)
    for k in normalized_kernels(6):
        resp = conv3d(grid, k)
        assert np.abs(resp).max() <= k.l1() + 1e-12


# ----------------------------------------------------------- gradient window

def test_gradient_window_matches_loops():
    rng = np.random.default_rng(7)
    grid = rng.random((7, 8, 6))
    upstream = rng.normal(size=(7, 8, 6))
    ks = (3, 2, 4)
    anchor = [(k - 1) // 2 for k in ks]
    want = np.zeros(ks)
    for dz in range(ks[0]):
        for dy in range(ks[1]):
            for dx in range(ks[2]):
                acc = 0.0
                for vz in range(7):
                    for vy in range(8):
                        for vx in range(6):
                            z, y, x = vz + dz - anchor[0], vy + dy - anchor[1], vx + dx - anchor[2]
                            if 0 <= z < 7 and 0 <= y < 8 and 0 <= x < 6:
                                acc += upstream[vz, vy, vx] * grid[z, y, x]
                want[dz, dy, dx] = acc
    got = gradient_window(grid, upstream, ks)
    assert np.abs(got - want).max() <= 1e-10


def test_gradient_window_is_conv_adjoint():
    # <upstream, conv(grid, K)> == <adjoint(grid, upstream), K> for any K
    rng = np.random.default_rng(8)
    grid = rng.random((11, 12, 10))
    upstream = rng.normal(size=(11, 12, 10))
    window = gradient_window(grid, upstream, (5, 3, 3))
    for _ in range(5):
        k = rng.normal(size=(5, 3, 3))
        lhs = float((upstream * conv3d(grid, k)).sum())
        rhs = float((window * k).sum())
        assert lhs == pytest.approx(rhs, rel=1e-10)


# ---------------------------------------------------------------- translate

def test_translate_identity():
    rng = np.random.default_rng(9)
    g = rng.random((5, 6, 7))
    assert np.array_equal(translate_grid(g, (0, 0, 0)), g)


def test_translate_inverse_on_interior():
    rng = np.random.default_rng(10)
    g = rng.random((10, 10, 10))
    back = translate_grid(translate_grid(g, (2, -1, 3)), (-2, 1, -3))
    inner = (slice(2, 8), slice(1, 9), slice(3, 7))
    assert np.array_equal(back[inner], g[inner])


def test_translate_conserves_interior_occupancy():
    rng = np.random.default_rng(11)
    g = np.zeros((12, 12, 12))
    g[4:8, 4:8, 4:8] = (rng.random((4, 4, 4)) < 0.5)
    n = g.sum()
    assert translate_grid(g, (3, -2, 1)).sum() == n


def test_translate_out_of_range():
    with pytest.raises(ValueError, match="offset"):
        translate_grid(np.zeros((4, 4, 4)), (4, 0, 0))


# ------------------------------------------------------------ GENEO checks

def test_equivariance_zero_offset_is_exact():
    rng = np.random.default_rng(12)
    grid = (rng.random((30, 30, 30)) < 0.2).astype(float)
    k = normalized_kernels(13)[0]
    assert check_equivariance(k, grid, (0, 0, 0)) == 0.0


def test_equivariance_randomized():
    rng = np.random.default_rng(14)
    kernels = normalized_kernels(15)
    for _ in range(25):
        grid = (rng.random((32, 32, 32)) < rng.uniform(0.05, 0.4)).astype(float)
        offset = tuple(int(v) for v in rng.integers(-4, 5, 3))
        for k in kernels:
            assert check_equivariance(k, grid, offset) <= 1e-9


def test_equivariance_no_interior_errors():
    k = normalized_kernels(16)[0]
    with pytest.raises(ValueError, match="interior"):
        check_equivariance(k, np.zeros((12, 12, 12)), (1, 0, 0))


def test_nonexpansivity_equal_grids():
    g = (np.random.default_rng(17).random((20, 20, 20)) < 0.3).astype(float)
    lhs, rhs = check_nonexpansivity(normalized_kernels(18)[0], g, g)
    assert lhs == 0.0 and rhs == 0.0


def test_nonexpansivity_single_voxel_difference():
    rng = np.random.default_rng(19)
    a = (rng.random((20, 20, 20)) < 0.3).astype(float)
    b = a.copy()
    b[10, 10, 10] = 1.0 - b[10, 10, 10]
    for k in normalized_kernels(20):
        lhs, rhs = check_nonexpansivity(k, a, b)
        assert rhs == 1.0
        assert lhs <= np.abs(k.weights).max() + 1e-12
        assert lhs <= rhs + 1e-9


def test_nonexpansivity_randomized():
    rng = np.random.default_rng(21)
    kernels = normalized_kernels(22)
    for _ in range(25):
        a = (rng.random((16, 16, 16)) < 0.3).astype(float)
        b = (rng.random((16, 16, 16)) < 0.3).astype(float)
        for k in kernels:
            lhs, rhs = check_nonexpansivity(k, a, b)
            assert lhs <= rhs + 1e-9


def test_nonexpansivity_shape_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        check_nonexpansivity(normalized_kernels()[0], np.zeros((10, 10, 10)), np.zeros((10, 10, 9)))


def test_spectrum_reuse_matches_oneoff():
    rng = np.random.default_rng(23)
    grid = rng.random((14, 13, 12))
    spec = GridSpectrum(grid, (5, 5, 5))
    for k in normalized_kernels(24, (5, 5, 5)):
        assert np.allclose(spec.correlate(k), conv3d(grid, k, method="direct"), atol=1e-10)
