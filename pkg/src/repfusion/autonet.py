"""Small fixed-graph networks with hand-written reverse passes.

Two network families live here:

* :class:`MLP` - plain SiLU multilayer perceptron (students, policy, decoder).
* :class:`Denoiser` - time-conditioned MLP that predicts noise, exposes the
  activation of its "mid-block" (the narrowest hidden layer) and can put a
  single-head self-attention block over input tokens in front of the MLP.

Parameters are held in a :class:`ParamStore`.  Every network has
``forward(params, ...) -> (outputs, cache)`` and
``backward(params, cache, upstream...) -> ParamStore`` so callers can compose
losses and get exact gradients without a general autodiff engine.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .numeric import NumericalError, RngStream


class ParamStore:
    """Ordered mapping ``name -> 2-D float64 array``.

    The flat layout is the insertion order of names, each array flattened in
    row-major order.
    """

    def __init__(self, items=None):
        self._d: dict[str, np.ndarray] = {}
        if items:
            for k, v in dict(items).items():
                self[k] = v

    def __getitem__(self, name: str) -> np.ndarray:
        return self._d[name]

    def __setitem__(self, name: str, value) -> None:
        a = np.asarray(value, dtype=np.float64)
        if a.ndim == 1:
            a = a[None, :]
        if a.ndim != 2:
            raise ValueError(f"parameter {name!r} must be 2-D, got {a.shape}")
        self._d[name] = a

    def __contains__(self, name) -> bool:
        return name in self._d

    def __iter__(self) -> Iterator[str]:
        return iter(self._d)

    def __len__(self) -> int:
        return len(self._d)

    def keys(self):
        return self._d.keys()

    def items(self):
        return self._d.items()

    def values(self):
        return self._d.values()

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._d.values()))

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: v.shape for k, v in self._d.items()}

    def flatten(self) -> np.ndarray:
        if not self._d:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._d.values()])

    def unflatten(self, vec) -> "ParamStore":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != self.size:
            raise ValueError(f"vector has {vec.size} entries, store has {self.size}")
        out = ParamStore()
        pos = 0
        for k, v in self._d.items():
            out._d[k] = vec[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out._d = {k: v.copy() for k, v in self._d.items()}
        return out

    def zeros_like(self) -> "ParamStore":
        out = ParamStore()
        out._d = {k: np.zeros_like(v) for k, v in self._d.items()}
        return out

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        out._d = {k: v for k, v in self._d.items() if k.startswith(prefix)}
        return out

    def update(self, other: "ParamStore") -> None:
        for k, v in other.items():
            self._d[k] = v

    def allclose(self, other: "ParamStore", atol: float = 0.0) -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in self._d.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"ParamStore({len(self)} tensors, {self.size} values)"


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

PARAM_FORMAT = "repfusion-params"
PARAM_VERSION = 1


def save_params(path, params: ParamStore, meta: dict | None = None) -> None:
    """Write ``params`` as ``<u64 header length><JSON header><raw <f8 data>``.

    Offsets in the header are byte offsets into the data block.
    """
    tensors = []
    offset = 0
    for name, v in params.items():
        tensors.append({"name": name, "rows": v.shape[0], "cols": v.shape[1], "offset": offset})
        offset += v.size * 8
    header = {"format": PARAM_FORMAT, "version": PARAM_VERSION, "tensors": tensors}
    if meta:
        header["meta"] = meta
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def load_params(path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated parameter file")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("format") != PARAM_FORMAT:
        raise ValueError(f"{path}: not a {PARAM_FORMAT} file")
    data = raw[8 + hlen:]
    out = ParamStore()
    for t in header["tensors"]:
        n = t["rows"] * t["cols"]
        start = t["offset"]
        if start + 8 * n > len(data):
            raise ValueError(f"{path}: tensor {t['name']!r} runs past end of file")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=start)
        out[t["name"]] = arr.reshape(t["rows"], t["cols"]).astype(np.float64)
    return out, header.get("meta", {})


# --------------------------------------------------------------------------
# elementwise pieces
# --------------------------------------------------------------------------

def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def silu(a):
    return a * sigmoid(a)


def silu_grad(a):
    s = sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


def _check(name: str, a: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite activation in layer {name!r}")
    return a


def _uniform_init(rng: RngStream, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def time_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding; returns ``(len(t), dim)`` with sines then cosines."""
    if dim % 2 or dim < 2:
        raise ValueError(f"time embedding dim must be even and >= 2, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    phase = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MLP:
    """``sizes = (in, h1, ..., out)``; SiLU between layers.

    With ``final_activation`` the output itself is passed through SiLU, which
    is how encoders expose their last hidden layer as a feature.
    """

    sizes: tuple
    prefix: str = ""
    final_activation: bool = False

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def init(self, rng: RngStream, scale: float = 1.0) -> ParamStore:
        p = ParamStore()
        for i in range(self.n_layers):
            fi, fo = self.sizes[i], self.sizes[i + 1]
            p[f"{self.prefix}W{i}"] = scale * _uniform_init(rng, fi, (fi, fo))
            p[f"{self.prefix}b{i}"] = scale * _uniform_init(rng, fi, (1, fo))
        return p

    def forward(self, params: ParamStore, x: np.ndarray):
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"{self.prefix or 'mlp'}: input width {x.shape[1]} != {self.sizes[0]}")
        inputs, pre = [], []
        h = x
        for i in range(self.n_layers):
            inputs.append(h)
            a = h @ params[f"{self.prefix}W{i}"] + params[f"{self.prefix}b{i}"]
            _check(f"{self.prefix}{i}", a)
            pre.append(a)
            last = i == self.n_layers - 1
            h = a if (last and not self.final_activation) else silu(a)
        return h, (inputs, pre)

    def backward(self, params: ParamStore, cache, d_out: np.ndarray, want_input: bool = False):
        inputs, pre = cache
        g = ParamStore()
        d = d_out
        for i in reversed(range(self.n_layers)):
            last = i == self.n_layers - 1
            if not (last and not self.final_activation):
                d = d * silu_grad(pre[i])
            g[f"{self.prefix}W{i}"] = inputs[i].T @ d
            g[f"{self.prefix}b{i}"] = d.sum(axis=0, keepdims=True)
            if i > 0 or want_input:
                d = d @ params[f"{self.prefix}W{i}"].T
        ordered = ParamStore({k: g[k] for k in _mlp_names(self)})
        if want_input:
            return ordered, d
        return ordered

    def __call__(self, params: ParamStore, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x)[0]


def _mlp_names(mlp: MLP) -> list[str]:
    names = []
    for i in range(mlp.n_layers):
        names += [f"{mlp.prefix}W{i}", f"{mlp.prefix}b{i}"]
    return names


# --------------------------------------------------------------------------
# time-conditioned denoiser
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserArch:
    input_dim: int
    hidden_dims: tuple = (64, 32, 64)
    time_dim: int = 16
    mid_index: int | None = None
    attention: bool = False
    n_tokens: int = 0
    token_embed_dim: int = 8
    skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("denoiser needs at least one hidden layer")
        if self.mid_index is None:
            narrow = min(self.hidden_dims)
            # deepest of the narrowest layers
            idx = max(i for i, h in enumerate(self.hidden_dims) if h == narrow)
            object.__setattr__(self, "mid_index", idx)
        if not 0 <= self.mid_index < len(self.hidden_dims):
            raise ValueError("mid_index must index a hidden layer")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.attention:
            if self.n_tokens < 1 or self.input_dim % self.n_tokens:
                raise ValueError("n_tokens must divide input_dim when attention is enabled")

    @property
    def token_dim(self) -> int:
        return self.input_dim // self.n_tokens if self.attention else 0

    @property
    def mid_width(self) -> int:
        return self.hidden_dims[self.mid_index]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserArch":
        return cls(**{**d, "hidden_dims": tuple(d["hidden_dims"])})


@dataclass
class AttentionRecord:
    """Attention weights averaged over the batch, ``(tokens, tokens)``."""

    matrix: np.ndarray
    per_sample: np.ndarray | None = field(default=None, repr=False)

    def off_diagonal_mass(self) -> float:
        return float(1.0 - np.mean(np.diag(self.matrix)))


class Denoiser:
    """Noise predictor ``s(x, t)`` built on a :class:`DenoiserArch`.

    Layout: optional token attention block -> hidden SiLU layers (the time
    embedding enters the first one through a learned linear map) -> linear
    output, plus a learned linear skip from input to output.
    """

    def __init__(self, arch: DenoiserArch):
        self.arch = arch

    # parameter names -----------------------------------------------------
    def init(self, rng: RngStream) -> ParamStore:
        a = self.arch
        p = ParamStore()
        if a.attention:
            e, td = a.token_embed_dim, a.token_dim
            p["tok.W"] = _uniform_init(rng, td, (td, e))
            p["tok.b"] = _uniform_init(rng, td, (1, e))
            p["tok.time"] = _uniform_init(rng, a.time_dim, (a.time_dim, e))
            p["tok.pos"] = rng.gen.standard_normal((a.n_tokens, e)) * 0.5
            for k in ("q", "k", "v"):
                p[f"attn.{k}"] = _uniform_init(rng, e, (e, e))
            width = a.n_tokens * e
        else:
            width = a.input_dim
        p["time.W"] = _uniform_init(rng, a.time_dim, (a.time_dim, a.hidden_dims[0]))
        dims = (width,) + a.hidden_dims
        for i in range(len(a.hidden_dims)):
            p[f"h{i}.W"] = _uniform_init(rng, dims[i], (dims[i], dims[i + 1]))
            p[f"h{i}.b"] = _uniform_init(rng, dims[i], (1, dims[i + 1]))
        p["out.W"] = _uniform_init(rng, dims[-1], (dims[-1], a.input_dim))
        p["out.b"] = _uniform_init(rng, dims[-1], (1, a.input_dim))
        if a.skip:
            p["skip.W"] = np.zeros((a.input_dim, a.input_dim))
        return p

    # forward -------------------------------------------------------------
    def forward(self, params: ParamStore, x: np.ndarray, t):
        a = self.arch
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != a.input_dim:
            raise ValueError(f"denoiser expects (n, {a.input_dim}) input, got {x.shape}")
        t = np.asarray(t)
        if t.ndim == 0:
            t = np.full(x.shape[0], int(t))
        if t.shape != (x.shape[0],):
            raise ValueError("need exactly one timestep per row")
        n = x.shape[0]
        temb = time_embedding(t, a.time_dim)
        cache = {"x": x, "temb": temb}
        attn = None
        if a.attention:
            e = a.token_embed_dim
            tokens = x.reshape(n, a.n_tokens, a.token_dim)
            h = (tokens @ params["tok.W"] + params["tok.b"] + params["tok.pos"][None]
                 + (temb @ params["tok.time"])[:, None, :])
            q = h @ params["attn.q"]
            k = h @ params["attn.k"]
            v = h @ params["attn.v"]
            s = np.einsum("bie,bje->bij", q, k) / math.sqrt(e)
            s -= s.max(axis=-1, keepdims=True)
            w = np.exp(s)
            w /= w.sum(axis=-1, keepdims=True)
            o = np.einsum("bij,bje->bie", w, v)
            h1 = _check("attention", h + o)
            cache.update(tokens=tokens, h=h, q=q, k=k, v=v, w=w)
            inp = h1.reshape(n, -1)
            attn = AttentionRecord(w.mean(axis=0), w)
        else:
            inp = x
        cache["inp"] = inp
        acts, pres = [], []
        hcur = inp
        for i in range(len(a.hidden_dims)):
            pre = hcur @ params[f"h{i}.W"] + params[f"h{i}.b"]
            if i == 0:
                pre = pre + temb @ params["time.W"]
            _check(f"h{i}", pre)
            pres.append(pre)
            hcur = silu(pre)
            acts.append(hcur)
        out = hcur @ params["out.W"] + params["out.b"]
        if a.skip:
            out = out + x @ params["skip.W"]
        _check("out", out)
        cache.update(acts=acts, pres=pres)
        return (out, acts[a.mid_index], attn), cache

    def __call__(self, params, x, t):
        return self.forward(params, x, t)[0]

    def features(self, params: ParamStore, x: np.ndarray, t) -> np.ndarray:
        """Mid-block activation only; skips the layers after the tap."""
        return self.forward(params, x, t)[0][1]

    # backward ------------------------------------------------------------
    def backward(self, params: ParamStore, cache, d_out: np.ndarray | None, d_mid: np.ndarray | None = None) -> ParamStore:
        a = self.arch
        g = {}
        acts, pres = cache["acts"], cache["pres"]
        n = cache["x"].shape[0]
        if d_out is None:
            d_out = np.zeros((n, a.input_dim))
        g["out.W"] = acts[-1].T @ d_out
        g["out.b"] = d_out.sum(axis=0, keepdims=True)
        if a.skip:
            g["skip.W"] = cache["x"].T @ d_out
        dh = d_out @ params["out.W"].T
        for i in reversed(range(len(a.hidden_dims))):
            if d_mid is not None and i == a.mid_index:
                dh = dh + d_mid
            dpre = dh * silu_grad(pres[i])
            prev = acts[i - 1] if i > 0 else cache["inp"]
            g[f"h{i}.W"] = prev.T @ dpre
            g[f"h{i}.b"] = dpre.sum(axis=0, keepdims=True)
            if i == 0:
                g["time.W"] = cache["temb"].T @ dpre
            dh = dpre @ params[f"h{i}.W"].T
        if a.attention:
            e = a.token_embed_dim
            dh1 = dh.reshape(n, a.n_tokens, e)
            h, q, k, v, w = cache["h"], cache["q"], cache["k"], cache["v"], cache["w"]
            do = dh1
            dhh = dh1.copy()
            dw = np.einsum("bie,bje->bij", do, v)
            dv = np.einsum("bij,bie->bje", w, do)
            ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) / math.sqrt(e)
            dq = np.einsum("bij,bje->bie", ds, k)
            dk = np.einsum("bij,bie->bje", ds, q)
            hf = h.reshape(-1, e)
            g["attn.q"] = hf.T @ dq.reshape(-1, e)
            g["attn.k"] = hf.T @ dk.reshape(-1, e)
            g["attn.v"] = hf.T @ dv.reshape(-1, e)
            dhh += dq @ params["attn.q"].T + dk @ params["attn.k"].T + dv @ params["attn.v"].T
            g["tok.W"] = cache["tokens"].reshape(-1, a.token_dim).T @ dhh.reshape(-1, e)
            g["tok.b"] = dhh.sum(axis=(0, 1))[None, :]
            g["tok.time"] = cache["temb"].T @ dhh.sum(axis=1)
            g["tok.pos"] = dhh.sum(axis=0)
        return ParamStore({name: g[name] for name in params.keys()})


# --------------------------------------------------------------------------
# gradients, optimizers
# --------------------------------------------------------------------------

LossFn = Callable[[ParamStore], "tuple[float, ParamStore]"]


def grad(loss: LossFn, params: ParamStore) -> ParamStore:
    """Exact gradient of ``loss`` at ``params``.

    ``loss`` returns ``(value, gradient_store)``; this checks both are finite
    and that the gradient covers exactly the parameters.
    """
    value, g = loss(params)
    if not np.isfinite(value):
        raise NumericalError("loss is not finite")
    if list(g.keys()) != list(params.keys()):
        missing = set(params.keys()) ^ set(g.keys())
        raise ValueError(f"gradient/parameter name mismatch: {sorted(missing)}")
    for k, v in g.items():
        if v.shape != params[k].shape:
            raise ValueError(f"gradient for {k!r} has shape {v.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite gradient for {k!r}")
    return g


def check_grad(loss: LossFn, params: ParamStore, h: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-6):
    """Compare :func:`grad` with central differences; returns ``(ok, max_violation)``."""
    from .numeric import central_diff

    analytic = grad(loss, params).flatten()
    fd = central_diff(lambda v: loss(params.unflatten(v))[0], params.flatten(), h)
    excess = np.abs(analytic - fd) - (atol + rtol * np.abs(fd))
    return bool(np.all(excess <= 0)), float(excess.max(initial=-np.inf))


def sgd_step(params: ParamStore, grads: ParamStore, state: dict | None = None, lr: float = 0.1,
             momentum: float = 0.9, weight_decay: float = 1e-4):
    """Momentum SGD with L2 weight decay added to the gradient.

    ``buf <- momentum * buf + (g + wd * p)``; ``p <- p - lr * buf``.
    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state = {} if state is None else state
    new_p, new_state = ParamStore(), {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
        if weight_decay:
            g = g + weight_decay * p
        buf = state.get(k)
        buf = g.copy() if buf is None else momentum * buf + g
        new_state[k] = buf
        new_p[k] = p - lr * buf if momentum else p - lr * g
    return new_p, new_state


class SGD:
    def __init__(self, lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 1e-4):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.state: dict = {}

    def step(self, params: ParamStore, grads: ParamStore) -> ParamStore:
        params, self.state = sgd_step(params, grads, self.state, self.lr, self.momentum, self.weight_decay)
        return params


def ema_update(ema: ParamStore, params: ParamStore, m: float = 0.999) -> ParamStore:
    if not 0.0 <= m < 1.0:
        raise ValueError("EMA momentum must lie in [0, 1)")
    out = ParamStore()
    for k, e in ema.items():
        p = params[k]
        if p.shape != e.shape:
            raise ValueError(f"EMA shape mismatch for {k!r}")
        out[k] = m * e + (1.0 - m) * p
    return out
