"""Seeded synthetic labelled datasets, zero-mean normalised."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autonet import ParamStore, load_params, save_params
from .numeric import RngStream


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    k: int
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X must be (n, d) with one label per row")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.k):
            raise ValueError("labels must lie in [0, k)")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.k)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.X[idx], self.y[idx], self.k, self.mean, self.std)


def normalize(X: np.ndarray, scale: bool = False):
    """Centre columns (and optionally divide by the overall std).

    Returns ``(X_normalised, mean, std)``.  Centring is idempotent up to
    rounding; the returned mean of an already centred matrix is ~0.
    """
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    # second pass removes the O(eps * |mean|) residue of the first
    residue = Xc.mean(axis=0)
    Xc -= residue
    mean = mean + residue
    std = np.ones(X.shape[1])
    if scale:
        s = float(np.sqrt(np.mean(Xc ** 2)))
        if s > 0:
            Xc = Xc / s
            std = np.full(X.shape[1], s)
    return Xc, mean, std


def gaussian_mixture(k: int = 4, d: int = 16, n: int = 2048, spread: float = 0.5,
                     rng: RngStream | None = None, radius: float = 1.0) -> LabeledDataset:
    """Class ``c`` drawn from ``N(mu_c, spread^2 I)`` with ``mu_c`` on a sphere of ``radius``.

    Classes get ``n // k`` samples each, the first ``n % k`` classes one more.
    """
    if k < 2 or d < 2 or n < k or spread < 0 or radius <= 0:
        raise ValueError("need k >= 2, d >= 2, n >= k, spread >= 0, radius > 0")
    rng = rng or RngStream(0)
    mu = rng.gen.standard_normal((k, d))
    mu *= radius / np.linalg.norm(mu, axis=1, keepdims=True)
    y = np.arange(n) % k
    y = y[rng.permutation(n)]
    X = mu[y] + spread * rng.gen.standard_normal((n, d))
    Xn, mean, std = normalize(X)
    return LabeledDataset(Xn, y, k, mean, std)


def nuisance_mixture(k: int = 4, d: int = 16, n: int = 2048, spread: float = 0.3, rng: RngStream | None = None,
                     radius: float = 1.0, class_dims: int = 4, nuisance_scale: float = 3.0) -> LabeledDataset:
    """Gaussian mixture in the first ``class_dims`` coordinates, label-free noise elsewhere.

    The remaining ``d - class_dims`` coordinates are ``N(0, nuisance_scale^2)``
    and carry no label information.  With ``nuisance_scale`` large, labels live
    in the low-variance directions, which a denoiser at high noise shrinks away.
    """
    if not 2 <= class_dims < d:
        raise ValueError("need 2 <= class_dims < d")
    if nuisance_scale <= 0:
        raise ValueError("nuisance_scale must be positive")
    rng = rng or RngStream(0)
    base = gaussian_mixture(k, class_dims, n, spread, rng.spawn("classes"), radius)
    noise = nuisance_scale * rng.spawn("nuisance").gen.standard_normal((n, d - class_dims))
    Xn, mean, std = normalize(np.hstack([base.X, noise]))
    return LabeledDataset(Xn, base.y, k, mean, std)


def bar_patterns(k: int) -> np.ndarray:
    """Fixed 8x8 binary patterns: rows 2,5 / cols 2,5 / both diagonals / border / centre block."""
    if not 2 <= k <= 8:
        raise ValueError("bars8x8 supports 2..8 classes")
    pats = np.zeros((8, 8, 8))
    pats[0, 2, :] = 1
    pats[1, :, 2] = 1
    pats[2, 5, :] = 1
    pats[3, :, 5] = 1
    pats[4, [1, 6], :] = 1
    pats[5, :, [1, 6]] = 1
    pats[6, 0, :] = 1
    pats[6, :, 0] = 1
    pats[7, 3:5, :] = 1
    return pats[:k].reshape(k, 64)


def bars8x8(k: int = 4, n: int = 1024, noise: float = 0.1, rng: RngStream | None = None) -> LabeledDataset:
    rng = rng or RngStream(0)
    pats = bar_patterns(k)
    y = np.arange(n) % k
    y = y[rng.permutation(n)]
    X = pats[y] + noise * rng.gen.standard_normal((n, 64))
    Xn, mean, std = normalize(X, scale=True)
    return LabeledDataset(Xn, y, k, mean, std)


def split(ds: LabeledDataset, train_fraction: float = 0.5, rng: RngStream | None = None):
    """Class-stratified split; each class contributes ``round(fraction * count)`` to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = rng or RngStream(0)
    train_idx, test_idx = [], []
    for c in range(ds.k):
        idx = np.flatnonzero(ds.y == c)
        if idx.size < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        idx = idx[rng.permutation(idx.size)]
        m = int(round(train_fraction * idx.size))
        m = min(max(m, 1), idx.size - 1)
        train_idx.append(idx[:m])
        test_idx.append(idx[m:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr), ds.subset(te)


# --------------------------------------------------------------------------
# IO
# --------------------------------------------------------------------------

def to_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.d)] + ["label"])
        for row, label in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def from_csv(path, k: int | None = None) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise ValueError(f"{path}: expected a header row ending in 'label'")
    body = rows[1:]
    X = np.array([[float(v) for v in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body])
    k = int(y.max()) + 1 if k is None else k
    return LabeledDataset(X, y, k, X.mean(axis=0), np.ones(X.shape[1]))


def save_dataset(ds: LabeledDataset, path) -> None:
    store = ParamStore({"X": ds.X, "y": ds.y.astype(np.float64)[:, None], "mean": ds.mean, "std": ds.std})
    save_params(path, store, meta={"kind": "dataset", "k": ds.k})


def load_dataset(path) -> LabeledDataset:
    store, meta = load_params(path)
    if meta.get("kind") != "dataset":
        raise ValueError(f"{path}: not a dataset file")
    return LabeledDataset(store["X"], store["y"][:, 0].astype(np.int64), int(meta["k"]),
                          store["mean"][0], store["std"][0])
