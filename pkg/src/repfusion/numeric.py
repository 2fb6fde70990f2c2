"""Dense linear algebra, seeded sampling and derivative checks.

Matrices are plain 2-D ``float64`` numpy arrays.  The only things that need a
dedicated type are the random stream (so sampling is splittable and replayable)
and the SVD result.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels


class NumericalError(ValueError):
    """Raised when an input or an intermediate value is not finite."""


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name}: empty matrix")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name}: contains non-finite entries")
    return a


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox4x64-10 counter-based generator: the 128-bit key is
    ``seed | stream_id << 64`` and the counter starts at zero, so any stream can
    be rebuilt from its two integers and streams with different ids never
    overlap.  ``counter`` reports how many 256-bit Philox blocks were consumed.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        seed = int(seed)
        stream_id = int(stream_id)
        if not (0 <= seed < 2**64 and 0 <= stream_id < 2**64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = seed
        self.stream_id = stream_id
        self._bitgen = np.random.Philox(key=seed | (stream_id << 64))
        self.gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        ctr = self._bitgen.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(ctr)))

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)

    def spawn(self, label: str) -> "RngStream":
        """Sub-stream whose id is a BLAKE2b hash of ``(stream_id, label)``."""
        h = hashlib.blake2b(f"{self.stream_id}/{label}".encode(), digest_size=8).digest()
        return RngStream(self.seed, int.from_bytes(h, "little"))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def standard_normal(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    return rng.gen.standard_normal((rows, cols))


@dataclass
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _complete_basis(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` not in ``keep`` with an orthonormal completion."""
    m, n = q.shape
    out = q.copy()
    basis = [out[:, j] for j in range(n) if keep[j]]
    e = 0
    for j in range(n):
        if keep[j]:
            continue
        while True:
            cand = np.zeros(m)
            cand[e % m] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            norm = np.linalg.norm(cand)
            if norm > 1e-6:
                cand /= norm
                break
        out[:, j] = cand
        basis.append(cand)
    return out


def svd(m) -> SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ v.T`` via one-sided Jacobi rotations.

    ``sigma`` has ``min(rows, cols)`` entries, sorted non-increasing.
    """
    a = as_matrix(m, "svd input")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    scale = np.max(np.abs(a))
    if scale == 0.0:
        k = a.shape[1]
        u = _complete_basis(np.zeros((a.shape[0], k)), np.zeros(k, dtype=bool))
        res = SvdResult(u, np.zeros(k), np.eye(k))
    else:
        u, sigma, v = _kernels.jacobi_svd(np.ascontiguousarray(a / scale))
        order = np.argsort(-sigma, kind="stable")
        u, sigma, v = u[:, order], sigma[order], v[:, order]
        keep = sigma > sigma[0] * 1e-13
        u = np.where(keep, u / np.where(keep, sigma, 1.0), 0.0)
        if not keep.all():
            u = _complete_basis(u, keep)
            sigma = np.where(keep, sigma, 0.0)
        res = SvdResult(u, sigma * scale, v)
    if transposed:
        res = SvdResult(res.v, res.sigma, res.u)
    return res


def singular_values(m) -> np.ndarray:
    return svd(m).sigma


def central_diff(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.asarray(theta, dtype=np.float64).ravel()
    g = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        probe[i] = theta[i] + h
        fp = float(f(probe))
        probe[i] = theta[i] - h
        fm = float(f(probe))
        probe[i] = theta[i]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value while differencing coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericalError("softmax: non-finite logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
