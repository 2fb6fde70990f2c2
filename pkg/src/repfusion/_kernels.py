"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a ``_nb`` variant decorated with ``@njit`` and a
pure-numpy ``_np`` variant.  The public names bound at the bottom of the module
point at one or the other depending on :data:`USE_NUMBA`.  Set the environment
variable ``REPFUSION_NO_NUMBA=1`` (before import) to force the numpy path.
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = _HAVE_NUMBA and os.environ.get("REPFUSION_NO_NUMBA", "0") not in ("1", "true", "yes")

_JACOBI_EPS = 1e-15
_MAX_SWEEPS = 80


# --------------------------------------------------------------------------
# one-sided (Hestenes) Jacobi SVD, m >= n
# --------------------------------------------------------------------------

@njit(cache=True)
def _jacobi_nb(a):
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    for _sweep in range(_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for r in range(m):
                    alpha += u[r, i] * u[r, i]
                    beta += u[r, j] * u[r, j]
                    gamma += u[r, i] * u[r, j]
                if gamma == 0.0 or abs(gamma) <= _JACOBI_EPS * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for r in range(m):
                    ui = u[r, i]
                    uj = u[r, j]
                    u[r, i] = c * ui - s * uj
                    u[r, j] = s * ui + c * uj
                for r in range(n):
                    vi = v[r, i]
                    vj = v[r, j]
                    v[r, i] = c * vi - s * vj
                    v[r, j] = s * vi + c * vj
        if not rotated:
            break
    sigma = np.empty(n)
    for j in range(n):
        acc = 0.0
        for r in range(m):
            acc += u[r, j] * u[r, j]
        sigma[j] = np.sqrt(acc)
    return u, sigma, v


def _jacobi_np(a):
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    for _sweep in range(_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui, uj = u[:, i], u[:, j]
                alpha = ui @ ui
                beta = uj @ uj
                gamma = ui @ uj
                if gamma == 0.0 or abs(gamma) <= _JACOBI_EPS * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = 1.0 if zeta == 0.0 else np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                u[:, [i, j]] = np.column_stack((c * ui - s * uj, s * ui + c * uj))
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            break
    sigma = np.sqrt(np.einsum("ij,ij->j", u, u))
    return u, sigma, v


# --------------------------------------------------------------------------
# pairwise euclidean distances
# --------------------------------------------------------------------------

@njit(cache=True)
def _pdist_nb(x):
    n, d = x.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                diff = x[i, k] - x[j, k]
                acc += diff * diff
            dist = np.sqrt(acc)
            out[i, j] = dist
            out[j, i] = dist
    return out


def _pdist_np(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


# --------------------------------------------------------------------------
# silhouette coefficient (per sample)
# --------------------------------------------------------------------------

@njit(cache=True)
def _silhouette_nb(x, labels, k):
    n, d = x.shape
    sums = np.zeros((n, k))
    counts = np.zeros(k)
    for i in range(n):
        counts[labels[i]] += 1.0
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for c in range(d):
                diff = x[i, c] - x[j, c]
                acc += diff * diff
            dist = np.sqrt(acc)
            sums[i, labels[j]] += dist
            sums[j, labels[i]] += dist
    s = np.zeros(n)
    for i in range(n):
        own = labels[i]
        if counts[own] < 2:
            continue
        a = sums[i, own] / (counts[own] - 1.0)
        b = np.inf
        for c in range(k):
            if c != own and counts[c] > 0:
                val = sums[i, c] / counts[c]
                if val < b:
                    b = val
        denom = max(a, b)
        if denom > 0.0:
            s[i] = (b - a) / denom
    return s


def _silhouette_np(x, labels, k):
    dist = _pdist_np(x)
    onehot = np.zeros((x.shape[0], k))
    onehot[np.arange(x.shape[0]), labels] = 1.0
    counts = onehot.sum(axis=0)
    sums = dist @ onehot
    own = labels
    own_count = counts[own]
    a = sums[np.arange(len(own)), own] / np.maximum(own_count - 1.0, 1.0)
    mean_other = sums / np.where(counts > 0, counts, np.inf)
    mean_other[np.arange(len(own)), own] = np.inf
    mean_other[:, counts == 0] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own_count < 2] = 0.0
    return s


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

if USE_NUMBA:
    jacobi_svd = _jacobi_nb
    pairwise_distances = _pdist_nb
    silhouette_samples = _silhouette_nb
else:
    jacobi_svd = _jacobi_np
    pairwise_distances = _pdist_np
    silhouette_samples = _silhouette_np

KERNELS = {
    "jacobi_svd": (_jacobi_nb, _jacobi_np),
    "pairwise_distances": (_pdist_nb, _pdist_np),
    "silhouette_samples": (_silhouette_nb, _silhouette_np),
}
