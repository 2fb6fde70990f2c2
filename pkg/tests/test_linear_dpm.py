import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repfusion.diffusion import linear_beta_schedule
from repfusion.linear_dpm import (LinearModel, analytic_loss, analytic_loss_grad, composite_spectrum, descend, mc_loss,
                                  optimal_composite, random_psd, tradeoff_curve, write_tradeoff_csv)
from repfusion.numeric import RngStream, central_diff


def test_model_shapes():
    m = LinearModel.random(6, 3, RngStream(0))
    assert m.composite.shape == (6, 6)
    assert np.allclose(m.composite, m.W_D @ m.W_E + m.W_S)
    with pytest.raises(ValueError):
        LinearModel(np.zeros((6, 6)), np.zeros((6, 6)), np.zeros((6, 6)))


def test_mc_zero_map_is_dimension():
    S = random_psd(5, RngStream(1))
    est, se = mc_loss(np.zeros((5, 5)), S, 0.3, 20000, RngStream(2))
    assert abs(est - 5) < 3 * se


def test_mc_regulariser_root():
    ab = 0.4
    est, se = mc_loss(np.eye(4) / math.sqrt(1 - ab), np.zeros((4, 4)), ab, 1000, RngStream(0))
    assert est == pytest.approx(0.0, abs=1e-20)


def test_mc_matches_analytic_on_factored_model():
    m = LinearModel.random(6, 3, RngStream(3))
    S = random_psd(6, RngStream(4))
    est, se = mc_loss(m, S, 0.5, 50000, RngStream(5))
    assert abs(est - analytic_loss(m, S, 0.5)[0]) < 3 * se


def test_decomposition_over_many_configurations():
    # 50 fixed configurations: each must land within 3 standard errors
    misses = 0
    for i in range(50):
        r = RngStream(100 + i)
        L = 2 + i % 6
        P = 0.5 * r.gen.standard_normal((L, L))
        S = random_psd(L, r.spawn("S"))
        ab = float(r.uniform(0.05, 0.95))
        est, se = mc_loss(P, S, ab, 100_000, r.spawn("mc"))
        misses += abs(est - analytic_loss(P, S, ab)[0]) >= 3 * se
    assert misses == 0


def test_mc_rejections():
    with pytest.raises(ValueError):
        mc_loss(np.zeros((2, 2)), np.diag([1.0, -1.0]), 0.5, 1000, RngStream(0))
    with pytest.raises(ValueError):
        mc_loss(np.zeros((2, 2)), np.eye(2), 0.5, 50, RngStream(0))
    with pytest.raises(ValueError):
        mc_loss(np.zeros((2, 2)), np.eye(2), 1.0, 1000, RngStream(0))


def test_analytic_examples():
    assert analytic_loss(np.zeros((7, 7)), np.eye(7), 0.3)[0] == pytest.approx(7.0)
    ab = 0.3
    total, rep, reg = analytic_loss(np.eye(5) / math.sqrt(1 - ab), np.eye(5), ab)
    assert total == pytest.approx(ab * 5 / (1 - ab))
    assert reg == pytest.approx(0.0, abs=1e-24)
    with pytest.raises(ValueError):
        analytic_loss(np.zeros((3, 3)), np.eye(4), 0.5)


def test_trace_oracle_by_sums():
    # representation term written as an explicit sum over entries
    g = np.random.default_rng(0)
    P, S = g.standard_normal((4, 4)), random_psd(4, RngStream(7))
    ab = 0.6
    want = ab * sum(P[i, a] * S[a, b] * P[i, b] for i in range(4) for a in range(4) for b in range(4))
    assert analytic_loss(P, S, ab)[1] == pytest.approx(want, rel=1e-12)


def test_analytic_gradient():
    g = np.random.default_rng(1)
    P, S = g.standard_normal((4, 4)), random_psd(4, RngStream(8))
    num = central_diff(lambda v: analytic_loss(v.reshape(4, 4), S, 0.7)[0], P.ravel(), 1e-6).reshape(4, 4)
    assert np.allclose(num, analytic_loss_grad(P, S, 0.7), atol=1e-6)


def test_optimal_examples():
    ab = 0.35
    assert np.allclose(optimal_composite(np.zeros((3, 3)), ab), np.eye(3) / math.sqrt(1 - ab))
    assert np.allclose(optimal_composite(np.eye(3), 0.5), math.sqrt(0.5) * np.eye(3))
    assert math.sqrt(0.5) == pytest.approx(0.70711, abs=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_optimal_is_stationary(seed):
    S = random_psd(5, RngStream(seed))
    Pstar = optimal_composite(S, 0.6)
    num = central_diff(lambda v: analytic_loss(v.reshape(5, 5), S, 0.6)[0], Pstar.ravel(), 1e-5)
    assert np.max(np.abs(num)) < 1e-6


def test_gradient_descent_oracle():
    S = random_psd(4, RngStream(9), (0.5, 3.0))
    P = descend(S, 0.5, RngStream(10))
    assert np.linalg.norm(P - optimal_composite(S, 0.5)) < 1e-4


def test_global_optimality_against_random_maps():
    S = random_psd(4, RngStream(11))
    ab = 0.45
    best = analytic_loss(optimal_composite(S, ab), S, ab)[0]
    g = np.random.default_rng(12)
    for _ in range(1000):
        P = g.standard_normal((4, 4)) * g.uniform(0.01, 2.0)
        assert best <= analytic_loss(P, S, ab)[0] + 1e-12


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_loss_depends_only_on_composite(seed):
    r = RngStream(seed)
    m = LinearModel.random(5, 2, r)
    A = r.gen.standard_normal((2, 2)) + 3 * np.eye(2)
    # rescale the bottleneck and move the slack into the skip path
    m2 = LinearModel(np.linalg.solve(A, m.W_E), m.W_D @ A, m.W_S.copy())
    extra = r.gen.standard_normal((5, 5))
    m3 = LinearModel(m.W_E, m.W_D, m.W_S + extra)
    P3 = m.composite + extra
    S = random_psd(5, r.spawn("S"))
    assert analytic_loss(m, S, 0.5)[0] == pytest.approx(analytic_loss(m2, S, 0.5)[0], rel=1e-9)
    assert analytic_loss(m3, S, 0.5)[0] == pytest.approx(analytic_loss(P3, S, 0.5)[0], rel=1e-12)


class _Fixed:
    def __init__(self, ab):
        self.ab = ab

    def alpha_bar_step(self, t):
        return self.ab[t - 1]


def test_tradeoff_hand_example():
    row = tradeoff_curve(np.diag([4.0, 1.0]), _Fixed([0.5]), [1])[0]
    # reported in non-increasing order
    assert np.allclose(row.sigma, [math.sqrt(0.5), math.sqrt(0.5) / 2.5])
    assert np.allclose(row.sigma, [0.7071, 0.2828], atol=1e-4)
    assert row.kappa == pytest.approx(2.5)
    assert np.allclose(composite_spectrum(np.diag([4.0, 1.0]), 0.5), row.sigma)


@pytest.mark.parametrize("seed", range(5))
def test_tradeoff_matches_svd_of_optimum(seed):
    S = random_psd(5, RngStream(seed))
    sched = linear_beta_schedule(1000)
    for row in tradeoff_curve(S, sched, [1, 50, 300, 1000]):
        sig = composite_spectrum(S, row.alpha_bar)
        assert np.allclose(sig, row.sigma, rtol=1e-10)
        assert row.kappa == pytest.approx(sig[0] / sig[-1], rel=1e-10)


def test_tradeoff_limits():
    S = np.diag([5.0, 2.0, 0.5])
    lo, hi = tradeoff_curve(S, _Fixed([1e-9, 1 - 1e-9]), [1, 2])
    assert np.allclose(lo.sigma, 1.0, atol=1e-6) and lo.kappa == pytest.approx(1.0, abs=1e-6)
    assert hi.kappa == pytest.approx(10.0, rel=1e-6)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_kappa_non_increasing(seed, L):
    S = random_psd(L, RngStream(seed))
    k = [r.kappa for r in tradeoff_curve(S, linear_beta_schedule(200), range(1, 201))]
    assert np.all(np.diff(k) <= 1e-12)


def test_tradeoff_empty_grid():
    with pytest.raises(ValueError):
        tradeoff_curve(np.eye(2), linear_beta_schedule(10), [])


def test_tradeoff_csv(tmp_path):
    rows = tradeoff_curve(np.diag([3.0, 1.0]), linear_beta_schedule(10), [1, 5, 10])
    write_tradeoff_csv(rows, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,alpha_bar,sigma1,sigma2,kappa"
    assert float(lines[2].split(",")[-1]) == rows[1].kappa
