"""Reinforced timestep selection.

A policy network maps an input ``x`` to logits over the ``T`` timestep indices.
An auxiliary linear decoder ``g`` reads the teacher feature at the chosen
timestep and predicts the label; the reward is the negative cross-entropy.  The
policy maximises

    J = mean_x sum_t pi(t|x) R(x, t) + lambda_H * mean_x H(pi(.|x))

through the sampled score-function estimator (:func:`reinforce_grad`); the
exact enumerated gradient (:func:`exact_grad`) is kept as an oracle.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autonet import MLP, SGD, ParamStore
from .distill import cross_entropy
from .numeric import NumericalError, RngStream, log_softmax, softmax

LAMBDA_H = 0.1


class TimePolicy:
    """Three SiLU hidden layers followed by a linear layer of width ``T``."""

    def __init__(self, input_dim: int, T: int, hidden: int = 32):
        self.T = T
        self.net = MLP((input_dim, hidden, hidden, hidden, T), "pi.")

    def init(self, rng: RngStream, zero_last: bool = True) -> ParamStore:
        p = self.net.init(rng)
        if zero_last:
            # start from the uniform policy
            p["pi.W3"] = np.zeros_like(p["pi.W3"])
            p["pi.b3"] = np.zeros_like(p["pi.b3"])
        return p

    def logits(self, params, x):
        return self.net(params, np.asarray(x, dtype=np.float64))

    def probs(self, params, x):
        return softmax(self.logits(params, x), axis=1)


class AuxDecoder:
    """Linear map from teacher features to class logits."""

    def __init__(self, feature_dim: int, n_classes: int):
        self.n_classes = n_classes
        self.net = MLP((feature_dim, n_classes), "g.")

    def init(self, rng: RngStream) -> ParamStore:
        return self.net.init(rng)

    def logits(self, params, z):
        return self.net(params, z)


@dataclass
class RewardRecord:
    t: np.ndarray
    rewards: np.ndarray
    entropy: float
    decoder_loss: float

    @property
    def mean_t(self) -> float:
        return float(np.mean(self.t))

    @property
    def std_t(self) -> float:
        return float(np.std(self.t))

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))


# --------------------------------------------------------------------------
# sampling, reward, entropy
# --------------------------------------------------------------------------

def sample_categorical(probs: np.ndarray, rng: RngStream) -> np.ndarray:
    """One inverse-CDF draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.uniform(size=(probs.shape[0], 1)) * cdf[:, -1:]
    t = (cdf <= u).sum(axis=1)
    return np.minimum(t, probs.shape[1] - 1)


def sample_time(policy: TimePolicy, params, x, rng: RngStream) -> np.ndarray:
    return sample_categorical(policy.probs(params, x), rng)


def reward(decoder: AuxDecoder, params, z, y) -> np.ndarray:
    """``-cross_entropy(y, g(z))`` per sample."""
    per, _ = cross_entropy(decoder.logits(params, z), y)
    return -per


def _entropy(logits):
    lp = log_softmax(logits, axis=1)
    p = np.exp(lp)
    H = -np.sum(p * lp, axis=1)
    return p, lp, H


def entropy_bonus(policy: TimePolicy, params, x) -> float:
    """Mean per-sample entropy (nats) of ``pi(.|x)``."""
    return float(np.mean(_entropy(policy.logits(params, x))[2]))


def entropy_of(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


# --------------------------------------------------------------------------
# gradients (ascent directions for J)
# --------------------------------------------------------------------------

def _entropy_logit_grad(p, lp, H):
    return -p * (lp + H[:, None])


def reinforce_grad(policy: TimePolicy, params, x, t, rewards, lambda_h: float = LAMBDA_H,
                   baseline: float = 0.0) -> ParamStore:
    """Score-function estimate of the gradient of ``J``.

    ``mean_i (R_i - baseline) * grad log pi(t_i|x_i) + lambda_h * grad mean_i H_i``;
    the entropy part is exact.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    if not np.all(np.isfinite(rewards)):
        raise NumericalError("non-finite reward")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if rewards.shape != (n,) or t.shape != (n,):
        raise ValueError("need one (t, reward) pair per sample")
    logits, cache = policy.net.forward(params, x)
    p, lp, H = _entropy(logits)
    d = -p
    d[np.arange(n), t] += 1.0
    d *= (rewards - baseline)[:, None]
    d += lambda_h * _entropy_logit_grad(p, lp, H)
    return policy.net.backward(params, cache, d / n)


def objective(policy: TimePolicy, params, x, reward_table, lambda_h: float = LAMBDA_H) -> float:
    """Exact ``J`` by enumeration over all actions."""
    logits = policy.logits(params, x)
    p, lp, H = _entropy(logits)
    return float(np.mean(np.sum(p * reward_table, axis=1)) + lambda_h * np.mean(H))


def exact_grad(policy: TimePolicy, params, x, reward_table, lambda_h: float = LAMBDA_H) -> ParamStore:
    """Gradient of :func:`objective`, enumerating the ``T`` actions."""
    R = np.asarray(reward_table, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if R.shape != (n, policy.T) or not np.all(np.isfinite(R)):
        raise ValueError(f"reward table must be a finite ({n}, {policy.T}) array")
    logits, cache = policy.net.forward(params, x)
    p, lp, H = _entropy(logits)
    expected = np.sum(p * R, axis=1, keepdims=True)
    d = p * (R - expected) + lambda_h * _entropy_logit_grad(p, lp, H)
    return policy.net.backward(params, cache, d / n)


# --------------------------------------------------------------------------
# joint update
# --------------------------------------------------------------------------

@dataclass
class PolicyConfig:
    lambda_h: float = LAMBDA_H
    policy_lr: float = 0.1
    decoder_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hidden: int = 32
    use_baseline: bool = False
    baseline_momentum: float = 0.9

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SelectorState:
    """Policy and decoder parameters plus their optimizers."""

    policy: TimePolicy
    decoder: AuxDecoder
    policy_params: ParamStore
    decoder_params: ParamStore
    policy_opt: SGD
    decoder_opt: SGD
    baseline: float = 0.0
    steps: int = 0
    records: list = field(default_factory=list)

    @classmethod
    def create(cls, input_dim: int, T: int, feature_dim: int, n_classes: int, cfg: PolicyConfig,
               rng: RngStream) -> "SelectorState":
        pol = TimePolicy(input_dim, T, cfg.hidden)
        dec = AuxDecoder(feature_dim, n_classes)
        return cls(pol, dec, pol.init(rng.spawn("policy")), dec.init(rng.spawn("decoder")),
                   SGD(cfg.policy_lr, cfg.momentum, cfg.weight_decay),
                   SGD(cfg.decoder_lr, cfg.momentum, cfg.weight_decay))


def joint_step(state: SelectorState, teacher, X, y, cfg: PolicyConfig, rng: RngStream):
    """Sample ``t``, score it with the decoder, then update decoder and policy.

    Rewards are computed with the decoder as it was before this step's update.
    Returns the sampled timesteps and the :class:`RewardRecord`.
    """
    X = np.asarray(X, dtype=np.float64)
    t = sample_time(state.policy, state.policy_params, X, rng)
    z = teacher.features(X, t)
    logits, cache = state.decoder.net.forward(state.decoder_params, z)
    per, dlogits = cross_entropy(logits, y)
    rewards = -per
    g_dec = state.decoder.net.backward(state.decoder_params, cache, dlogits)
    state.decoder_params = state.decoder_opt.step(state.decoder_params, g_dec)

    baseline = state.baseline if cfg.use_baseline else 0.0
    g_pol = reinforce_grad(state.policy, state.policy_params, X, t, rewards, cfg.lambda_h, baseline)
    neg = ParamStore({k: -v for k, v in g_pol.items()})
    state.policy_params = state.policy_opt.step(state.policy_params, neg)
    if cfg.use_baseline:
        m = cfg.baseline_momentum
        state.baseline = m * state.baseline + (1 - m) * float(rewards.mean()) if state.steps else float(rewards.mean())
    state.steps += 1
    H = entropy_bonus(state.policy, state.policy_params, X)
    rec = RewardRecord(t, rewards, H, float(per.mean()))
    state.records.append(rec)
    return t, rec


def modal_action(policy: TimePolicy, params, x) -> int:
    """Most frequent argmax action over the batch."""
    a = np.argmax(policy.logits(params, x), axis=1)
    return int(np.bincount(a, minlength=policy.T).argmax())


# --------------------------------------------------------------------------
# planted problem and exhaustive oracle
# --------------------------------------------------------------------------

class PlantedTeacher:
    """Synthetic teacher whose features carry label information at one timestep only.

    At ``t_star`` the feature is a fixed linear map of ``x``; at every other
    timestep it is a high-frequency pseudo-random function of ``(x, t)`` that a
    linear decoder cannot exploit.
    """

    def __init__(self, input_dim: int, T: int, t_star: int, feature_dim: int = 8, seed: int = 0,
                 frequency: float = 97.0):
        if not 0 <= t_star < T:
            raise ValueError("t_star must be a valid timestep index")
        g = np.random.default_rng(seed)
        self.T = T
        self.t_star = t_star
        self.feature_dim = feature_dim
        self.A = g.standard_normal((input_dim, feature_dim)) / np.sqrt(input_dim)
        self.B = g.standard_normal((T, input_dim, feature_dim)) * frequency
        self.phase = g.uniform(0, 2 * np.pi, size=(T, feature_dim))

    def features(self, X, t):
        X = np.asarray(X, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t), (X.shape[0],))
        out = np.empty((X.shape[0], self.feature_dim))
        for tt in np.unique(t):
            rows = t == tt
            if tt == self.t_star:
                out[rows] = np.tanh(2.0 * X[rows] @ self.A)
            else:
                out[rows] = np.sin(X[rows] @ self.B[tt] + self.phase[tt])
        return out


def exhaustive_sweep(teacher, X, y, n_classes: int, steps: int = 300, lr: float = 0.1,
                     rng: RngStream | None = None) -> np.ndarray:
    """Train a fresh linear decoder at every timestep; return final mean cross-entropy per ``t``.

    Full-batch momentum SGD, identical initialisation for every ``t``.
    """
    rng = rng or RngStream(0)
    losses = np.empty(teacher.T)
    init = None
    for t in range(teacher.T):
        z = teacher.features(X, np.full(len(X), t))
        dec = AuxDecoder(z.shape[1], n_classes)
        if init is None:
            init = dec.init(rng)
        params, opt = init.copy(), SGD(lr, 0.9, 0.0)
        for _ in range(steps):
            logits, cache = dec.net.forward(params, z)
            _, dl = cross_entropy(logits, y)
            params = opt.step(params, dec.net.backward(params, cache, dl))
        losses[t] = cross_entropy(dec.logits(params, z), y)[0].mean()
    return losses
