"""Feature distillation from a teacher into a student MLP, then task finetuning.

Each loss takes ``(z_s, z_t)`` row batches and returns ``(value, dz_s)`` where
``dz_s`` is the gradient with respect to the (projected) student features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .autonet import MLP, SGD, ParamStore
from .numeric import NumericalError, RngStream, log_softmax, softmax

DEFAULT_WEIGHTS = {"hint": 1.0, "at": 1000.0, "rkd": 1.0}


def _pair(z_s, z_t):
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_s.ndim != 2 or z_t.ndim != 2 or z_s.shape[0] != z_t.shape[0]:
        raise ValueError("feature batches must be 2-D with equal batch size")
    return z_s, z_t


def hint_loss(z_s, z_t):
    """Mean over the batch of the squared L2 distance."""
    z_s, z_t = _pair(z_s, z_t)
    if z_s.shape != z_t.shape:
        raise ValueError("hint loss needs equal widths; add a projector")
    r = z_s - z_t
    n = r.shape[0]
    return float(np.sum(r * r) / n), 2.0 * r / n


def _attention_map(z):
    a = z * z
    norm = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("attention transfer: a feature row has zero norm")
    return a / norm, norm


def at_loss(z_s, z_t):
    """Attention transfer on feature vectors.

    Each row is squared elementwise and L2-normalised; the loss is the mean
    squared distance between the student and teacher maps.
    """
    z_s, z_t = _pair(z_s, z_t)
    if z_s.shape != z_t.shape:
        raise ValueError("attention transfer needs equal widths; add a projector")
    q_s, norm_s = _attention_map(z_s)
    q_t, _ = _attention_map(z_t)
    n = z_s.shape[0]
    r = q_s - q_t
    g = 2.0 * r / n
    da = (g - q_s * np.sum(q_s * g, axis=1, keepdims=True)) / norm_s
    return float(np.sum(r * r) / n), da * 2.0 * z_s


def _huber(x, delta=1.0):
    ax = np.abs(x)
    return np.where(ax < delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def _huber_grad(x, delta=1.0):
    return np.clip(x, -delta, delta)


def _normalized_distances(z):
    D = _kernels.pairwise_distances(np.ascontiguousarray(z))
    n = z.shape[0]
    off = ~np.eye(n, dtype=bool)
    nz = D[off & (D > 0)]
    if nz.size == 0:
        raise ValueError("RKD: all points in the batch coincide")
    mu = nz.mean()
    return D, mu, off


def rkd_loss(z_s, z_t, delta: float = 1.0):
    """Distance-wise relational distillation.

    Pairwise distances of each batch are divided by their mean non-zero
    distance and compared under the Huber loss, averaged over ordered pairs
    ``i != j``.  Widths of the two batches may differ.
    """
    z_s, z_t = _pair(z_s, z_t)
    n = z_s.shape[0]
    if n < 3:
        raise ValueError("RKD needs a batch of at least 3")
    Ds, mu_s, off = _normalized_distances(z_s)
    Dt, mu_t, _ = _normalized_distances(z_t)
    diff = (Ds / mu_s - Dt / mu_t)[off]
    m = n * (n - 1)
    value = float(_huber(diff, delta).sum() / m)

    # gradient w.r.t. z_s; mu_s counts only non-zero distances
    G = np.zeros((n, n))
    G[off] = _huber_grad(diff, delta) / m
    nz = off & (Ds > 0)
    W = G / mu_s
    W[nz] -= np.sum(G * Ds) / (mu_s ** 2) / nz.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = np.where(Ds > 0, W / np.where(Ds > 0, Ds, 1.0), 0.0)
    coef = coef + coef.T
    dz = coef.sum(axis=1, keepdims=True) * z_s - coef @ z_s
    return value, dz


LOSSES = {"hint": hint_loss, "at": at_loss, "rkd": rkd_loss}


def cross_entropy(logits, y):
    """Per-sample cross-entropy and the gradient of its batch mean w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    k = logits.shape[1]
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    lp = log_softmax(logits)
    n = logits.shape[0]
    per = -lp[np.arange(n), y]
    g = softmax(logits)
    g[np.arange(n), y] -= 1.0
    return per, g / n


# --------------------------------------------------------------------------
# student
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StudentArch:
    input_dim: int
    hidden_dims: tuple = (64, 32)
    n_classes: int = 4
    teacher_dim: int | None = None

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]


class StudentNet:
    """Encoder ``f`` (last hidden layer is the feature tap), task head and projector."""

    def __init__(self, arch: StudentArch):
        self.arch = arch
        self.encoder = MLP((arch.input_dim,) + tuple(arch.hidden_dims), "enc.", final_activation=True)
        self.head = MLP((arch.feature_dim, arch.n_classes), "head.")
        tdim = arch.teacher_dim or arch.feature_dim
        self.projector = MLP((arch.feature_dim, tdim), "proj.")

    def init(self, rng: RngStream) -> ParamStore:
        p = self.encoder.init(rng.spawn("encoder"))
        p.update(self.head.init(rng.spawn("head")))
        if self.projector.sizes[0] == self.projector.sizes[1]:
            p["proj.W0"] = np.eye(self.projector.sizes[0])
            p["proj.b0"] = np.zeros((1, self.projector.sizes[1]))
        else:
            p.update(self.projector.init(rng.spawn("projector")))
        return p

    def features(self, params, X):
        return self.encoder(params, X)

    def logits(self, params, X):
        return self.head(params, self.encoder(params, X))

    def predict(self, params, X):
        return np.argmax(self.logits(params, X), axis=1)

    def accuracy(self, params, X, y) -> float:
        return float(np.mean(self.predict(params, X) == np.asarray(y)))


def _restrict(grads: ParamStore, params: ParamStore) -> ParamStore:
    """Gradient store over all of ``params``; missing entries are zero."""
    return ParamStore({k: grads[k] if k in grads else np.zeros_like(v) for k, v in params.items()})


def distill_loss_and_grad(student: StudentNet, params: ParamStore, X, z_teacher, kind: str = "hint",
                          weight: float | None = None):
    if kind not in LOSSES:
        raise ValueError(f"unknown distillation loss {kind!r}")
    weight = DEFAULT_WEIGHTS[kind] if weight is None else weight
    z, enc_cache = student.encoder.forward(params, X)
    zp, proj_cache = student.projector.forward(params, z)
    value, dzp = LOSSES[kind](zp, z_teacher)
    g_proj, dz = student.projector.backward(params, proj_cache, weight * dzp, want_input=True)
    g = student.encoder.backward(params, enc_cache, dz)
    g.update(g_proj)
    return weight * value, _restrict(g, params)


@dataclass
class DistillConfig:
    loss: str = "hint"
    weight: float | None = None
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown distillation loss {self.loss!r}")
        if self.weight is None:
            self.weight = DEFAULT_WEIGHTS[self.loss]
        if self.weight <= 0:
            raise ValueError("distillation weight must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _clip(g: ParamStore, limit: float) -> ParamStore:
    if not limit:
        return g
    flat = g.flatten()
    norm = np.linalg.norm(flat)
    return g.unflatten(flat * (limit / norm)) if norm > limit else g


def distill_step(student: StudentNet, params: ParamStore, teacher, X, t, cfg: DistillConfig, opt: SGD):
    """One optimizer step on ``weight * L_kd(teacher features at t, student features)``.

    The head is not part of the objective; its gradient is zero (weight decay
    still applies through the optimizer only if it is stepped, so the head is
    excluded from the update).
    """
    z_t = teacher.features(X, t)
    value, g = distill_loss_and_grad(student, params, X, z_t, cfg.loss, cfg.weight)
    if not np.isfinite(value):
        raise NumericalError("distillation loss is not finite")
    g = _clip(g, cfg.grad_clip)
    trainable = ParamStore({k: v for k, v in params.items() if not k.startswith("head.")})
    new = opt.step(trainable, ParamStore({k: g[k] for k in trainable.keys()}))
    out = params.copy()
    out.update(new)
    return out, value


def task_loss_and_grad(student: StudentNet, params: ParamStore, X, y):
    z, enc_cache = student.encoder.forward(params, X)
    logits, head_cache = student.head.forward(params, z)
    per, dlogits = cross_entropy(logits, y)
    g_head, dz = student.head.backward(params, head_cache, dlogits, want_input=True)
    g = student.encoder.backward(params, enc_cache, dz)
    g.update(g_head)
    return float(per.mean()), _restrict(g, params)


@dataclass
class FinetuneConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FinetuneResult:
    params: ParamStore
    train_accuracy: float
    test_accuracy: float
    losses: list = field(default_factory=list)


def finetune(student: StudentNet, params: ParamStore, train, epochs: int | None = None,
             cfg: FinetuneConfig | None = None, rng: RngStream | None = None, test=None) -> FinetuneResult:
    """Cross-entropy training of encoder and head; projector is left alone."""
    cfg = cfg or FinetuneConfig()
    epochs = cfg.epochs if epochs is None else epochs
    rng = rng or RngStream(0)
    test = test if test is not None else train
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    names = [k for k in params.keys() if not k.startswith("proj.")]
    losses = []
    n = train.X.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        ep = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            value, g = task_loss_and_grad(student, params, train.X[idx], train.y[idx])
            if not np.isfinite(value):
                raise NumericalError(f"finetuning diverged at epoch {epoch}")
            g = _clip(g, cfg.grad_clip)
            sub = ParamStore({k: params[k] for k in names})
            new = opt.step(sub, ParamStore({k: g[k] for k in names}))
            params = params.copy()
            params.update(new)
            ep.append(value)
        losses.append(float(np.mean(ep)))
    return FinetuneResult(params, student.accuracy(params, train.X, train.y),
                          student.accuracy(params, test.X, test.y), losses)


def linear_probe_accuracy(X, y, k: int) -> float:
    """Least-squares one-hot regression on ``[X, 1]``; training accuracy."""
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    Y = np.eye(k)[y]
    W, *_ = np.linalg.lstsq(A, Y, rcond=None)
    return float(np.mean(np.argmax(A @ W, axis=1) == y))
