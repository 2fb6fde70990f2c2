"""Noise schedules, forward perturbation, DDPM training and ancestral sampling.

Timestep conventions
--------------------
``step`` counts diffusion steps ``1..T`` as in the forward chain, with step 0
meaning clean data (``alpha_bar = 1``).  Networks, policies and probes take a
0-based *timestep index* ``k in {0..T-1}``, which corresponds to ``step = k + 1``.
So index 0 is the least noisy level and ``T - 1`` the noisiest.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autonet import Denoiser, DenoiserArch, ParamStore, SGD, ema_update, load_params, save_params
from .numeric import NumericalError, RngStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[k]`` is the cumulative product up to step ``k + 1``."""
        return np.cumprod(self.alpha)

    def alpha_bar_step(self, step) -> np.ndarray:
        """``alpha_bar`` at 1-based ``step``; step 0 gives 1."""
        step = np.asarray(step)
        if np.any(step < 0) or np.any(step > self.T):
            raise ValueError(f"step out of range [0, {self.T}]")
        ab = np.concatenate([[1.0], self.alpha_bar])
        return ab[step]

    def alpha_bar_index(self, k) -> np.ndarray:
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k >= self.T):
            raise ValueError(f"timestep index out of range [0, {self.T})")
        return self.alpha_bar[k]

    def to_dict(self) -> dict:
        return {"kind": "explicit", "beta": [float(b) for b in self.beta]}


def linear_beta_schedule(T: int = 1000, beta1: float = 1e-4, betaT: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < beta1 <= betaT < 1.0:
        raise ValueError("need 0 < beta1 <= betaT < 1")
    return NoiseSchedule(np.linspace(beta1, betaT, T))


def scaled_linear_schedule(T: int) -> NoiseSchedule:
    """Linear schedule whose endpoints are ``(1e-4, 0.02) * 1000 / T``.

    Keeps the total noise of the 1000-step schedule when ``T`` is small.
    """
    s = 1000.0 / T
    return linear_beta_schedule(T, 1e-4 * s, min(0.02 * s, 0.999))


def forward_sample(x0, step, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab) * x0 + sqrt(1 - ab) * eps`` row-wise, with ``ab`` taken at ``step``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps must have the same shape")
    x2 = x0.reshape(x0.shape[0], -1) if x0.ndim > 1 else x0[None, :]
    step = np.broadcast_to(np.asarray(step), (x2.shape[0],))
    ab = schedule.alpha_bar_step(step)[:, None]
    out = np.sqrt(ab) * x2 + np.sqrt(1.0 - ab) * eps.reshape(x2.shape)
    return out.reshape(x0.shape)


@dataclass
class DiffusionBatch:
    x0: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    xt: np.ndarray

    @classmethod
    def draw(cls, x0, schedule: NoiseSchedule, rng: RngStream) -> "DiffusionBatch":
        n = x0.shape[0]
        t = rng.integers(0, schedule.T, size=n)
        eps = rng.gen.standard_normal(x0.shape)
        return cls(x0, t, eps, forward_sample(x0, t + 1, eps, schedule))


@dataclass
class Teacher:
    params: ParamStore
    arch: DenoiserArch
    schedule: NoiseSchedule
    ema_params: ParamStore | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.net = Denoiser(self.arch)
        if self.ema_params is None:
            self.ema_params = self.params.copy()

    @property
    def T(self) -> int:
        return self.schedule.T

    @property
    def feature_dim(self) -> int:
        return self.arch.mid_width

    def predict_noise(self, x, t, use_ema: bool = True) -> np.ndarray:
        return self.net(self.ema_params if use_ema else self.params, x, t)[0]

    def features(self, x, t, use_ema: bool = True) -> np.ndarray:
        """Mid-block activation for clean input ``x`` at timestep index ``t``."""
        t = np.broadcast_to(np.asarray(t), (np.asarray(x).shape[0],))
        if np.any(t < 0) or np.any(t >= self.T):
            raise ValueError(f"timestep index out of range [0, {self.T})")
        return self.net.features(self.ema_params if use_ema else self.params, x, t)

    def attention(self, x, t, use_ema: bool = True):
        return self.net(self.ema_params if use_ema else self.params, x, t)[2]

    def digest(self) -> str:
        return self.params.digest()[:16] + self.ema_params.digest()[:16]


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------

def ddpm_loss_and_grad(net: Denoiser, params: ParamStore, batch: DiffusionBatch):
    """Mean over the batch of ``||eps - s(x_t, t)||^2`` and its parameter gradient."""
    (eps_hat, _, _), cache = net.forward(params, batch.xt, batch.t)
    r = eps_hat - batch.eps
    per = np.sum(r * r, axis=1)
    n = r.shape[0]
    return float(per.mean()), net.backward(params, cache, 2.0 * r / n), per


def ddpm_loss(teacher, x0, rng: RngStream):
    """Monte-Carlo DDPM loss on ``x0`` with fresh ``t`` and ``eps``.

    ``teacher`` only needs ``schedule`` and ``predict_noise(x, t)``.
    Returns ``(mean, per_sample)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("x0 must be a non-empty (n, d) batch")
    batch = DiffusionBatch.draw(x0, teacher.schedule, rng)
    eps_hat = teacher.predict_noise(batch.xt, batch.t)
    if eps_hat.shape != x0.shape:
        raise ValueError("noise prediction has the wrong shape")
    per = np.sum((batch.eps - eps_hat) ** 2, axis=1)
    return float(per.mean()), per


@dataclass
class TeacherConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    ema: float = 0.999
    ema_warmup: bool = True
    grad_clip: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)


def _ema_decay(cfg: TeacherConfig, n_updates: int) -> float:
    if not cfg.ema_warmup:
        return cfg.ema
    return min(cfg.ema, (1.0 + n_updates) / (10.0 + n_updates))


def train_teacher(arch: DenoiserArch, schedule: NoiseSchedule, dataset, config: TeacherConfig | None = None,
                  rng: RngStream | None = None, init_params: ParamStore | None = None) -> Teacher:
    """Minimise the DDPM loss with momentum SGD, maintaining an EMA copy.

    ``history`` on the returned teacher holds the mean loss of every epoch.
    """
    cfg = config or TeacherConfig()
    rng = rng or RngStream(0)
    X = dataset.X if hasattr(dataset, "X") else np.asarray(dataset, dtype=np.float64)
    if np.max(np.abs(X.mean(axis=0))) > 1e-6:
        raise ValueError("teacher training expects zero-mean data")
    net = Denoiser(arch)
    init_rng, batch_rng, noise_rng = rng.spawn("init"), rng.spawn("batches"), rng.spawn("noise")
    params = init_params.copy() if init_params is not None else net.init(init_rng)
    ema = params.copy()
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    history = []
    updates = 0
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            x0 = X[order[s:s + cfg.batch_size]]
            batch = DiffusionBatch.draw(x0, schedule, noise_rng)
            loss, g, _ = ddpm_loss_and_grad(net, params, batch)
            if not np.isfinite(loss):
                raise NumericalError(f"teacher training diverged at epoch {epoch}")
            if cfg.grad_clip:
                norm = np.linalg.norm(g.flatten())
                if norm > cfg.grad_clip:
                    g = g.unflatten(g.flatten() * (cfg.grad_clip / norm))
            params = opt.step(params, g)
            ema = ema_update(ema, params, _ema_decay(cfg, updates))
            updates += 1
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if epoch % 50 == 0:
            log.debug("teacher epoch %d loss %.4f", epoch, history[-1])
    return Teacher(params, arch, schedule, ema, history)


def ancestral_sample(teacher, n: int, rng: RngStream) -> np.ndarray:
    """Reverse chain with the epsilon-prediction mean and variance ``beta_t``.

    ``x_{t-1} = (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) z``,
    no noise on the final step.
    """
    sched = teacher.schedule
    d = teacher.arch.input_dim
    x = rng.gen.standard_normal((n, d))
    beta, alpha, ab = sched.beta, sched.alpha, sched.alpha_bar
    for k in range(sched.T - 1, -1, -1):
        eps_hat = teacher.predict_noise(x, np.full(n, k))
        x = (x - beta[k] / np.sqrt(1.0 - ab[k]) * eps_hat) / np.sqrt(alpha[k])
        if k > 0:
            x = x + np.sqrt(beta[k]) * rng.gen.standard_normal((n, d))
    return x


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_teacher(teacher: Teacher, path) -> Path:
    """``<path>.bin`` holds parameters (EMA under ``ema/``); ``<path>.json`` the sidecar."""
    path = Path(path)
    store = ParamStore()
    for k, v in teacher.params.items():
        store[k] = v
    for k, v in teacher.ema_params.items():
        store["ema/" + k] = v
    bin_path = path.with_suffix(".bin")
    save_params(bin_path, store)
    sidecar = {
        "format": "repfusion-teacher",
        "version": 1,
        "arch": teacher.arch.to_dict(),
        "schedule": teacher.schedule.to_dict(),
        "history": teacher.history,
        "params_file": bin_path.name,
    }
    json_path = path.with_suffix(".json")
    tmp = json_path.with_name(json_path.name + ".tmp")
    tmp.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    tmp.replace(json_path)
    return json_path


def load_teacher(path) -> Teacher:
    path = Path(path)
    json_path = path.with_suffix(".json")
    if not json_path.exists():
        raise FileNotFoundError(f"teacher sidecar not found: {json_path}")
    side = json.loads(json_path.read_text())
    store, _ = load_params(json_path.with_name(side["params_file"]))
    params = ParamStore({k: v for k, v in store.items() if not k.startswith("ema/")})
    ema = ParamStore({k[4:]: v for k, v in store.items() if k.startswith("ema/")})
    schedule = NoiseSchedule(np.array(side["schedule"]["beta"]))
    return Teacher(params, DenoiserArch.from_dict(side["arch"]), schedule, ema, side.get("history", []))
