"""Per-timestep diagnostics of teacher features.

Features are taken the way the probing experiments take them: clean inputs are
fed with a timestep index and the mid-block activation is read out.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .numeric import NumericalError, svd


@dataclass
class FeatureBatch:
    z: np.ndarray
    t: int | None = None
    layer: str = "mid"

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ValueError("features must be (n, width)")
        if not np.all(np.isfinite(self.z)):
            raise NumericalError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def width(self) -> int:
        return self.z.shape[1]


def _as_batch(f) -> FeatureBatch:
    return f if isinstance(f, FeatureBatch) else FeatureBatch(f)


def extract_features(teacher, X, t: int) -> FeatureBatch:
    t = int(t)
    if not 0 <= t < teacher.T:
        raise ValueError(f"timestep index {t} outside [0, {teacher.T})")
    return FeatureBatch(teacher.features(X, np.full(len(X), t)), t, "mid")


def singular_spectrum(f) -> np.ndarray:
    """Singular values of the column-centred feature matrix, non-increasing."""
    z = _as_batch(f).z
    return svd(z - z.mean(axis=0)).sigma


def effective_rank_of_spectrum(sigma) -> float:
    """``exp`` of the Shannon entropy of the L1-normalised spectrum."""
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("singular values must be non-negative")
    total = s.sum()
    if total <= 0:
        raise ValueError("effective rank undefined for an all-zero spectrum")
    p = s[s > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def effective_rank(f) -> float:
    f = _as_batch(f)
    if f.n < 2:
        raise ValueError("need at least two samples")
    if not np.any(f.z):
        raise ValueError("effective rank undefined for all-zero features")
    sigma = singular_spectrum(f)
    if sigma[0] == 0:
        raise ValueError("features are constant across samples")
    return effective_rank_of_spectrum(sigma)


def attention_mass(teacher, X, t: int, n_samples: int = 128):
    """Average attention over the first ``n_samples`` rows of ``X``.

    Returns ``(avg_map, off_diagonal_mass)`` with mass ``1 - mean(diag)``.
    """
    if not teacher.arch.attention:
        raise ValueError("teacher has no attention block")
    X = np.asarray(X)[:n_samples]
    rec = teacher.attention(X, np.full(len(X), int(t)))
    avg = rec.matrix
    return avg, float(1.0 - np.mean(np.diag(avg)))


def cluster_separability(f, y) -> float:
    """Mean silhouette coefficient under Euclidean distance."""
    z = _as_batch(f).z
    y = np.asarray(y)
    classes, y_idx = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ValueError("silhouette needs at least two classes")
    counts = np.bincount(y_idx)
    if np.any(counts < 2):
        raise ValueError("every class needs at least two samples")
    if np.allclose(z, z[0]):
        raise ValueError("all feature vectors coincide; silhouette undefined")
    s = _kernels.silhouette_samples(np.ascontiguousarray(z), y_idx.astype(np.int64), int(classes.size))
    return float(np.mean(s))


@dataclass
class ProbeReport:
    t: list = field(default_factory=list)
    spectra: list = field(default_factory=list)
    erank: list = field(default_factory=list)
    separability: list = field(default_factory=list)
    attention_off_diag: list = field(default_factory=list)

    def rows(self, top_k: int = 8):
        """One dict per timestep; spectra reported raw and divided by the largest value."""
        out = []
        for i, t in enumerate(self.t):
            s = np.asarray(self.spectra[i])
            row = {"t": int(t), "erank": float(self.erank[i])}
            if self.separability:
                row["separability"] = float(self.separability[i])
            if self.attention_off_diag:
                row["attention_off_diag"] = float(self.attention_off_diag[i])
            for j in range(min(top_k, s.size)):
                row[f"sigma{j + 1}"] = float(s[j])
            for j in range(min(top_k, s.size)):
                row[f"sigma{j + 1}_norm"] = float(s[j] / s[0]) if s[0] > 0 else 0.0
            out.append(row)
        return out

    def to_dict(self) -> dict:
        return {
            "t": [int(v) for v in self.t],
            "erank": [float(v) for v in self.erank],
            "separability": [float(v) for v in self.separability],
            "attention_off_diag": [float(v) for v in self.attention_off_diag],
            "spectra": [[float(x) for x in s] for s in self.spectra],
        }

    def write_csv(self, path, top_k: int = 8) -> None:
        rows = self.rows(top_k)
        if not rows:
            raise ValueError("empty probe report")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def probe_sweep(teacher, X, t_grid, y=None, attention_samples: int = 128) -> ProbeReport:
    rep = ProbeReport()
    for t in t_grid:
        fb = extract_features(teacher, X, int(t))
        rep.t.append(int(t))
        sigma = singular_spectrum(fb)
        rep.spectra.append(sigma)
        rep.erank.append(effective_rank_of_spectrum(sigma))
        if y is not None:
            rep.separability.append(cluster_separability(fb, y))
        if teacher.arch.attention:
            rep.attention_off_diag.append(attention_mass(teacher, X, int(t), attention_samples)[1])
    return rep
