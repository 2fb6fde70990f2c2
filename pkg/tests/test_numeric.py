import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from repfusion import _kernels
from repfusion.numeric import (NumericalError, RngStream, as_matrix, central_diff, log_softmax, singular_values,
                               softmax, standard_normal, svd)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def _check_svd(m, res, tol=1e-8):
    k = min(m.shape)
    assert res.sigma.shape == (k,)
    assert np.all(res.sigma >= 0)
    assert np.all(np.diff(res.sigma) <= 1e-12 * max(1.0, res.sigma[0]))
    assert np.allclose(res.u.T @ res.u, np.eye(k), atol=tol)
    assert np.allclose(res.v.T @ res.v, np.eye(k), atol=tol)
    err = np.linalg.norm(m - res.reconstruct())
    assert err <= tol * max(1.0, np.linalg.norm(m))


# --- RngStream ------------------------------------------------------------

def test_same_seed_same_stream():
    a = standard_normal(RngStream(7, 3), 4, 5)
    b = standard_normal(RngStream(7, 3), 4, 5)
    assert np.array_equal(a, b)


def test_stream_replays_across_processes():
    code = "from repfusion.numeric import RngStream, standard_normal; print(repr(standard_normal(RngStream(99, 4), 1, 3).tolist()))"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert eval(out) == standard_normal(RngStream(99, 4), 1, 3).tolist()


def test_normal_moments():
    z = standard_normal(RngStream(1), 100_000, 1).ravel()
    assert abs(z.mean()) < 4 / math.sqrt(1e5)
    assert abs(z.var() - 1.0) < 0.05


def test_stream_ids_independent():
    a = standard_normal(RngStream(5, 0), 10_000, 1).ravel()
    b = standard_normal(RngStream(5, 1), 10_000, 1).ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_spawn_is_stable_and_distinct():
    r = RngStream(3)
    assert r.spawn("x").stream_id == RngStream(3).spawn("x").stream_id
    assert r.spawn("x").stream_id != r.spawn("y").stream_id


def test_counter_advances():
    r = RngStream(0)
    c0 = r.counter
    r.uniform(size=10)
    assert r.counter > c0


def test_bad_seed_rejected():
    with pytest.raises(ValueError):
        RngStream(-1)


# --- SVD ------------------------------------------------------------------

def test_svd_identity():
    assert np.allclose(svd(np.eye(3)).sigma, [1, 1, 1])


def test_svd_diagonal():
    assert np.allclose(svd(np.diag([3.0, 2.0, 1.0])).sigma, [3, 2, 1])


def test_svd_matches_eigen_oracle(rng):
    m = rng.standard_normal((5, 3))
    lam = np.sort(np.linalg.eigvalsh(m.T @ m))[::-1]
    assert np.allclose(svd(m).sigma ** 2, lam, atol=1e-12)


@pytest.mark.parametrize("shape", [(1, 1), (1, 6), (6, 1), (7, 3), (3, 7), (32, 32)])
def test_svd_shapes(rng, shape):
    m = rng.standard_normal(shape)
    _check_svd(m, svd(m))


def test_svd_rank_deficient(rng):
    m = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
    res = svd(m)
    _check_svd(m, res)
    assert np.all(res.sigma[2:] < 1e-12)


def test_svd_zero_matrix():
    res = svd(np.zeros((4, 3)))
    _check_svd(np.zeros((4, 3)), res)
    assert np.all(res.sigma == 0)


def test_svd_many_random(rng):
    for _ in range(1000):
        r, c = rng.integers(1, 33, size=2)
        m = rng.standard_normal((r, c)) * 10.0 ** rng.uniform(-3, 3)
        _check_svd(m, svd(m))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8), elements=finite))
def test_svd_property(m):
    _check_svd(m, svd(m))


def test_svd_rejects_nonfinite():
    with pytest.raises(NumericalError):
        svd(np.array([[1.0, np.nan]]))
    with pytest.raises(ValueError):
        svd(np.zeros((0, 3)))


def test_singular_values_helper(rng):
    m = rng.standard_normal((4, 6))
    assert np.allclose(singular_values(m), np.linalg.svd(m, compute_uv=False))


def test_as_matrix_promotes_vectors():
    assert as_matrix([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ValueError):
        as_matrix(np.zeros((2, 2, 2)))


# --- both kernel paths ----------------------------------------------------

@pytest.mark.skipif(not _kernels._HAVE_NUMBA, reason="numba not installed")
def test_jacobi_paths_agree(rng):
    nb, npy = _kernels.KERNELS["jacobi_svd"]
    for _ in range(20):
        m = rng.standard_normal((9, 5))
        _, s1, _ = nb(m.copy())
        _, s2, _ = npy(m.copy())
        assert np.allclose(np.sort(s1), np.sort(s2), atol=1e-12)


def test_numpy_fallback_selected_by_env():
    env = dict(os.environ, REPFUSION_NO_NUMBA="1")
    code = ("from repfusion import _kernels; import numpy as np; "
            "from repfusion.numeric import svd; "
            "m = np.random.default_rng(0).standard_normal((6, 4)); "
            "print(_kernels.USE_NUMBA, np.allclose(svd(m).sigma, np.linalg.svd(m, compute_uv=False)))")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.split() == ["False", "True"]


# --- central differences ---------------------------------------------------

def test_central_diff_quadratic():
    g = central_diff(lambda th: float(th @ th), np.array([1.0, 2.0]), 1e-5)
    assert np.allclose(g, [2, 4], atol=1e-6)


def test_central_diff_constant():
    assert np.all(central_diff(lambda th: 3.0, np.zeros(4)) == 0)


def test_central_diff_sine():
    g = central_diff(lambda th: math.sin(th[0]), np.array([0.3]))
    assert abs(g[0] - 0.9553364891) < 1e-6


def test_central_diff_rejects_nonfinite():
    with pytest.raises(NumericalError):
        central_diff(lambda th: float("nan"), np.zeros(2))
    with pytest.raises(ValueError):
        central_diff(lambda th: 0.0, np.zeros(2), h=0.0)


# --- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(softmax(np.zeros(4)), 0.25)


def test_softmax_limit():
    p = softmax(np.array([0.0, 800.0]))
    assert p[1] == pytest.approx(1.0) and p[0] < 1e-300


def test_softmax_direct_oracle():
    import mpmath

    mpmath.mp.dps = 40
    e = [mpmath.e ** k for k in (1, 2, 3)]
    ref = [float(v / sum(e)) for v in e]
    assert np.allclose(softmax(np.array([1.0, 2.0, 3.0])), ref, rtol=0, atol=1e-15)


def test_softmax_rejects():
    with pytest.raises(ValueError):
        softmax(np.array([]))
    with pytest.raises(NumericalError):
        softmax(np.array([0.0, np.inf]))


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(x, c):
    p = softmax(x)
    assert np.all(p > 0)
    assert abs(p.sum() - 1) < 1e-12
    assert np.allclose(softmax(x + c), p, atol=1e-12, rtol=0)


def test_log_softmax_consistent(rng):
    x = rng.standard_normal((3, 5))
    assert np.allclose(np.exp(log_softmax(x, axis=1)), softmax(x, axis=1))
