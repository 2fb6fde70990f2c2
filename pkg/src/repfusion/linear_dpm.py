"""Linear denoiser with a skip connection: loss decomposition and its optimum.

For ``eps_hat = P x_t`` with ``P = W_D W_E + W_S``, ``x_t = sqrt(ab) x0 + sqrt(1-ab) eps``,
``x0 ~ N(0, S)`` and ``eps ~ N(0, I)``::

    E||eps - P x_t||^2 = ab * tr(P S P^T) + ||I - sqrt(1-ab) P||_F^2

The first term rewards fitting the data covariance, the second pulls ``P``
towards ``I / sqrt(1-ab)``.  The minimiser is
``P* = sqrt(1-ab) * (ab S + (1-ab) I)^{-1}``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numeric import RngStream, as_matrix, svd


@dataclass
class LinearModel:
    W_E: np.ndarray  # (d, L)
    W_D: np.ndarray  # (L, d)
    W_S: np.ndarray  # (L, L)

    def __post_init__(self):
        self.W_E, self.W_D, self.W_S = (as_matrix(m, n) for m, n in
                                        ((self.W_E, "W_E"), (self.W_D, "W_D"), (self.W_S, "W_S")))
        d, L = self.W_E.shape
        if self.W_D.shape != (L, d) or self.W_S.shape != (L, L):
            raise ValueError("shapes must be W_E (d, L), W_D (L, d), W_S (L, L)")
        if not d < L:
            raise ValueError("bottleneck width d must be smaller than L")

    @property
    def composite(self) -> np.ndarray:
        return self.W_D @ self.W_E + self.W_S

    @classmethod
    def random(cls, L: int, d: int, rng: RngStream, scale: float = 0.3) -> "LinearModel":
        g = rng.gen
        return cls(scale * g.standard_normal((d, L)), scale * g.standard_normal((L, d)),
                   scale * g.standard_normal((L, L)))


def composite(model) -> np.ndarray:
    return model.composite if isinstance(model, LinearModel) else as_matrix(model, "P")


def check_covariance(sigma_xx) -> np.ndarray:
    S = as_matrix(sigma_xx, "sigma_xx")
    if S.shape[0] != S.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(S, S.T, atol=1e-10):
        raise ValueError("covariance must be symmetric")
    if np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -1e-10:
        raise ValueError("covariance must be positive semi-definite")
    return 0.5 * (S + S.T)


def _check_ab(alpha_bar: float) -> float:
    ab = float(alpha_bar)
    if not 0.0 < ab < 1.0:
        raise ValueError("alpha_bar must lie in (0, 1)")
    return ab


def analytic_loss(P, sigma_xx, alpha_bar: float):
    """Closed form ``(total, representation_term, regularization_term)``."""
    P = composite(P)
    S = check_covariance(sigma_xx)
    if P.shape != S.shape:
        raise ValueError(f"P {P.shape} and sigma_xx {S.shape} must both be L x L")
    ab = _check_ab(alpha_bar)
    rep = ab * float(np.trace(P @ S @ P.T))
    R = np.eye(P.shape[0]) - np.sqrt(1.0 - ab) * P
    reg = float(np.sum(R * R))
    return rep + reg, rep, reg


def analytic_loss_grad(P, sigma_xx, alpha_bar: float) -> np.ndarray:
    """Gradient of :func:`analytic_loss` with respect to ``P``."""
    P = composite(P)
    S = check_covariance(sigma_xx)
    ab = _check_ab(alpha_bar)
    c = np.sqrt(1.0 - ab)
    return 2.0 * ab * P @ S - 2.0 * c * (np.eye(P.shape[0]) - c * P)


def mc_loss(model, sigma_xx, alpha_bar: float, n_samples: int, rng: RngStream, chunk: int = 20000):
    """Monte-Carlo ``E||eps - P x_t||^2``; returns ``(estimate, standard_error)``."""
    P = composite(model)
    S = check_covariance(sigma_xx)
    ab = _check_ab(alpha_bar)
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    L = S.shape[0]
    lam, V = np.linalg.eigh(S)
    root = V * np.sqrt(np.clip(lam, 0.0, None))  # S = root @ root.T
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        x0 = rng.gen.standard_normal((m, L)) @ root.T
        eps = rng.gen.standard_normal((m, L))
        xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        r = eps - xt @ P.T
        per = np.einsum("ij,ij->i", r, r)
        total += per.sum()
        total_sq += (per * per).sum()
        done += m
    mean = total / n_samples
    var = (total_sq - n_samples * mean * mean) / (n_samples - 1)
    return float(mean), float(np.sqrt(max(var, 0.0) / n_samples))


def optimal_composite(sigma_xx, alpha_bar: float) -> np.ndarray:
    S = check_covariance(sigma_xx)
    ab = _check_ab(alpha_bar)
    A = ab * S + (1.0 - ab) * np.eye(S.shape[0])
    if np.linalg.cond(A) > 1e14:
        raise np.linalg.LinAlgError("stationarity system is singular")
    return np.sqrt(1.0 - ab) * np.linalg.inv(A)


def descend(sigma_xx, alpha_bar: float, rng: RngStream, lr: float = 0.05, steps: int = 5000,
            init_scale: float = 0.1) -> np.ndarray:
    """Plain gradient descent on :func:`analytic_loss` from a random start."""
    S = check_covariance(sigma_xx)
    ab = _check_ab(alpha_bar)
    c = np.sqrt(1.0 - ab)
    L = S.shape[0]
    P = init_scale * rng.gen.standard_normal((L, L))
    eye = np.eye(L)
    for _ in range(steps):
        P = P - lr * (2.0 * ab * P @ S - 2.0 * c * (eye - c * P))
    return P


@dataclass
class TradeoffRow:
    t: int
    alpha_bar: float
    sigma: np.ndarray
    kappa: float


def tradeoff_curve(sigma_xx, schedule, t_grid) -> list[TradeoffRow]:
    """Singular values and condition number of ``P*`` at each 1-based step in ``t_grid``.

    Uses ``sigma_i = sqrt(1-ab) / (ab * lam_i + 1 - ab)`` and
    ``kappa = (ab * lam_max + 1 - ab) / (ab * lam_min + 1 - ab)``.
    """
    S = check_covariance(sigma_xx)
    t_grid = list(t_grid)
    if not t_grid:
        raise ValueError("t_grid is empty")
    lam = np.clip(np.linalg.eigvalsh(S), 0.0, None)
    rows = []
    for t in t_grid:
        ab = float(schedule.alpha_bar_step(int(t)))
        denom = ab * lam + (1.0 - ab)
        sig = np.sort(np.sqrt(1.0 - ab) / denom)[::-1]
        kappa = float(denom.max() / denom.min())
        rows.append(TradeoffRow(int(t), ab, sig, kappa))
    return rows


def composite_spectrum(sigma_xx, alpha_bar: float) -> np.ndarray:
    """Singular values of ``optimal_composite`` computed through the SVD routine."""
    return svd(optimal_composite(sigma_xx, alpha_bar)).sigma


def write_tradeoff_csv(rows: list[TradeoffRow], path) -> None:
    L = rows[0].sigma.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "alpha_bar"] + [f"sigma{i + 1}" for i in range(L)] + ["kappa"])
        for r in rows:
            w.writerow([r.t, repr(r.alpha_bar)] + [repr(float(s)) for s in r.sigma] + [repr(r.kappa)])


def random_psd(L: int, rng: RngStream, lam_range=(0.5, 10.0)) -> np.ndarray:
    """Random covariance with distinct eigenvalues drawn from ``lam_range``."""
    Q, _ = np.linalg.qr(rng.gen.standard_normal((L, L)))
    lam = np.sort(rng.uniform(lam_range[0], lam_range[1], size=L))
    return (Q * lam) @ Q.T
