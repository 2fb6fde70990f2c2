import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from repfusion.autonet import (MLP, SGD, Denoiser, DenoiserArch, ParamStore, check_grad, ema_update, grad,
                               load_params, save_params, sgd_step, time_embedding)
from repfusion.numeric import NumericalError, RngStream


def _store(rng, shapes):
    return ParamStore({f"p{i}": rng.standard_normal(s) for i, s in enumerate(shapes)})


# --- ParamStore -------------------------------------------------------------

@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=5), st.integers(0, 2**31))
def test_flatten_unflatten_identity(shapes, seed):
    p = _store(np.random.default_rng(seed), shapes)
    q = p.unflatten(p.flatten())
    assert list(q.keys()) == list(p.keys())
    assert all(np.array_equal(p[k], q[k]) for k in p.keys())
    assert p.size == p.flatten().size


def test_unflatten_wrong_length(rng):
    p = _store(rng, [(2, 2)])
    with pytest.raises(ValueError):
        p.unflatten(np.zeros(3))


def test_store_shapes():
    p = ParamStore()
    p["v"] = np.zeros(3)  # vectors become row matrices
    assert p["v"].shape == (1, 3)
    with pytest.raises(ValueError):
        p["x"] = np.zeros((2, 2, 2))


def test_params_file_roundtrip(tmp_path, rng):
    p = _store(rng, [(3, 2), (1, 5)])
    save_params(tmp_path / "w.bin", p, {"note": "x"})
    q, meta = load_params(tmp_path / "w.bin")
    assert meta == {"note": "x"}
    assert q.digest() == p.digest()


def test_params_file_layout(tmp_path):
    import json
    import struct

    p = ParamStore({"a": np.array([[1.0, 2.0]]), "b": np.array([[3.0]])})
    save_params(tmp_path / "w.bin", p)
    raw = (tmp_path / "w.bin").read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    assert header["tensors"] == [{"name": "a", "rows": 1, "cols": 2, "offset": 0},
                                 {"name": "b", "rows": 1, "cols": 1, "offset": 16}]
    assert np.frombuffer(raw[8 + n:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_params_file_truncated(tmp_path, rng):
    save_params(tmp_path / "w.bin", _store(rng, [(4, 4)]))
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.bin")


# --- time embedding ---------------------------------------------------------

def test_time_embedding_zero_phase():
    e = time_embedding([0], 8)[0]
    assert np.all(e[:4] == 0) and np.all(e[4:] == 1)


def test_time_embedding_injective():
    e = time_embedding(np.arange(100), 16)
    d = np.linalg.norm(e[:, None] - e[None], axis=-1)
    assert d[~np.eye(100, dtype=bool)].min() > 0


def test_time_embedding_odd_dim():
    with pytest.raises(ValueError):
        time_embedding([1], 7)


# --- denoiser forward -------------------------------------------------------

ARCHES = [DenoiserArch(6, (8, 4, 8), time_dim=4),
          DenoiserArch(6, (5, 3), time_dim=4, skip=False),
          DenoiserArch(8, (6, 4, 6), time_dim=4, attention=True, n_tokens=4, token_embed_dim=3)]


@pytest.mark.parametrize("arch", ARCHES)
def test_zero_network_outputs_zero(arch):
    net = Denoiser(arch)
    p = net.init(RngStream(0)).zeros_like()
    eps, z, _ = net(p, np.random.default_rng(0).standard_normal((5, arch.input_dim)), np.arange(5))
    assert np.all(eps == 0)
    assert z.shape == (5, arch.mid_width)


@pytest.mark.parametrize("arch", ARCHES)
def test_forward_deterministic(arch):
    net = Denoiser(arch)
    p = net.init(RngStream(1))
    x = np.random.default_rng(2).standard_normal((4, arch.input_dim))
    a, b = net(p, x, np.array([0, 3, 5, 9])), net(p, x, np.array([0, 3, 5, 9]))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_attention_rows_stochastic():
    arch = ARCHES[2]
    net = Denoiser(arch)
    p = net.init(RngStream(3))
    _, _, att = net(p, np.random.default_rng(4).standard_normal((16, 8)) * 3, np.arange(16))
    assert np.allclose(att.per_sample.sum(-1), 1, atol=1e-9)
    assert np.allclose(att.matrix.sum(-1), 1, atol=1e-9)
    assert att.matrix.shape == (4, 4)
    assert np.all(att.matrix >= 0)


def test_no_attention_record_without_attention():
    net = Denoiser(ARCHES[0])
    assert net(net.init(RngStream(0)), np.zeros((2, 6)), np.zeros(2, int))[2] is None


def test_forward_shape_errors():
    net = Denoiser(ARCHES[0])
    p = net.init(RngStream(0))
    with pytest.raises(ValueError):
        net(p, np.zeros((2, 5)), np.zeros(2, int))
    with pytest.raises(ValueError):
        net(p, np.zeros((2, 6)), np.zeros(3, int))


def test_arch_invariants():
    with pytest.raises(ValueError):
        DenoiserArch(6, (4, 4), mid_index=2)
    with pytest.raises(ValueError):
        DenoiserArch(6, (4,), attention=True, n_tokens=4)
    assert DenoiserArch(6, (8, 4, 4, 8)).mid_index == 2
    a = ARCHES[2]
    assert DenoiserArch.from_dict(a.to_dict()) == a


def test_nonfinite_activation_names_layer():
    net = Denoiser(ARCHES[0])
    p = net.init(RngStream(0))
    p["h1.W"] = np.full_like(p["h1.W"], np.inf)
    with pytest.raises(NumericalError, match="h1"):
        net(p, np.ones((2, 6)), np.zeros(2, int))


# --- gradients -------------------------------------------------------------

def _denoiser_loss(net, x, t, target, mid_target):
    def loss(p):
        (eps, z, _), cache = net.forward(p, x, t)
        r, rz = eps - target, z - mid_target
        v = float(np.sum(r * r) + 0.5 * np.sum(rz * rz))
        return v, net.backward(p, cache, 2 * r, d_mid=rz)
    return loss


@pytest.mark.parametrize("seed", range(20))
def test_denoiser_grad_random_arch(seed):
    g = np.random.default_rng(seed)
    attention = seed % 2 == 1
    n_tok = int(g.choice([2, 4]))
    d = n_tok * int(g.integers(1, 4)) if attention else int(g.integers(2, 7))
    hidden = tuple(int(h) for h in g.integers(2, 7, size=g.integers(1, 4)))
    arch = DenoiserArch(d, hidden, time_dim=4, attention=attention, n_tokens=n_tok if attention else 0,
                        token_embed_dim=int(g.integers(2, 4)), skip=bool(seed % 3))
    net = Denoiser(arch)
    p = net.init(RngStream(seed))
    if "skip.W" in p:
        p["skip.W"] = g.standard_normal(p["skip.W"].shape) * 0.3
    x = g.standard_normal((5, d))
    ok, worst = check_grad(_denoiser_loss(net, x, g.integers(0, 50, 5), g.standard_normal((5, d)),
                                          g.standard_normal((5, arch.mid_width))), p)
    assert ok, worst


def test_mlp_grad_with_input(rng):
    mlp = MLP((4, 6, 3), "m.", final_activation=True)
    p = mlp.init(RngStream(0))
    x = rng.standard_normal((7, 4))
    w = rng.standard_normal((7, 3))

    def loss(q):
        out, cache = mlp.forward(q, x)
        return float(np.sum(out * w)), mlp.backward(q, cache, w)
    assert check_grad(loss, p)[0]
    out, cache = mlp.forward(p, x)
    _, dx = mlp.backward(p, cache, w, want_input=True)
    from repfusion.numeric import central_diff
    fd = central_diff(lambda v: float(np.sum(mlp(p, v.reshape(7, 4)) * w)), x.ravel())
    assert np.allclose(dx.ravel(), fd, rtol=1e-4, atol=1e-6)


def test_grad_quadratic(rng):
    p = _store(rng, [(2, 3), (1, 2)])
    g = grad(lambda q: (float(q.flatten() @ q.flatten()), ParamStore({k: 2 * v for k, v in q.items()})), p)
    assert np.allclose(g.flatten(), 2 * p.flatten())


def test_grad_unused_block_is_zero(rng):
    mlp = MLP((3, 2), "a.")
    p = mlp.init(RngStream(0))
    p["unused"] = rng.standard_normal((2, 2))
    x = rng.standard_normal((4, 3))

    def loss(q):
        out, cache = mlp.forward(q, x)
        g = mlp.backward(q, cache, np.ones_like(out))
        g["unused"] = np.zeros((2, 2))
        return float(out.sum()), g
    assert np.all(grad(loss, p)["unused"] == 0)
    assert check_grad(loss, p)[0]


def test_grad_validates(rng):
    p = _store(rng, [(2, 2)])
    with pytest.raises(ValueError):
        grad(lambda q: (0.0, ParamStore({"other": np.zeros((2, 2))})), p)
    with pytest.raises(NumericalError):
        grad(lambda q: (float("nan"), q.zeros_like()), p)


# --- optimizers -------------------------------------------------------------

def test_sgd_zero_grad_unchanged(rng):
    p = _store(rng, [(3, 3)])
    q, _ = sgd_step(p, p.zeros_like(), None, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p.allclose(q)


def test_sgd_hand_arithmetic():
    p = ParamStore({"w": np.array([[1.0]])})
    q, _ = sgd_step(p, ParamStore({"w": 2 * p["w"]}), None, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert q["w"][0, 0] == pytest.approx(0.8)


def test_sgd_momentum_matches_torch_convention():
    # buf_1 = g_1; buf_2 = m * buf_1 + g_2 ; weight decay folded into g
    p = ParamStore({"w": np.array([[1.0]])})
    opt = SGD(lr=0.1, momentum=0.9, weight_decay=0.5)
    p1 = opt.step(p, ParamStore({"w": np.array([[1.0]])}))
    g1 = 1.0 + 0.5 * 1.0
    assert p1["w"][0, 0] == pytest.approx(1.0 - 0.1 * g1)
    p2 = opt.step(p1, ParamStore({"w": np.array([[1.0]])}))
    g2 = 1.0 + 0.5 * p1["w"][0, 0]
    assert p2["w"][0, 0] == pytest.approx(p1["w"][0, 0] - 0.1 * (0.9 * g1 + g2))


def test_sgd_negative_lr():
    with pytest.raises(ValueError):
        SGD(lr=-1.0)
    with pytest.raises(ValueError):
        sgd_step(ParamStore(), ParamStore(), None, lr=-0.1)


def test_sgd_convex_quadratic_monotone(rng):
    A = rng.standard_normal((4, 4))
    H = A @ A.T + np.eye(4)
    p = ParamStore({"w": rng.standard_normal((1, 4))})
    opt = SGD(lr=1.0 / np.linalg.eigvalsh(H).max(), momentum=0.0, weight_decay=0.0)
    losses = []
    for _ in range(100):
        w = p["w"][0]
        losses.append(0.5 * w @ H @ w)
        p = opt.step(p, ParamStore({"w": (H @ w)[None]}))
    assert np.all(np.diff(losses[5:]) <= 0)
    assert losses[-1] < losses[0]


def test_ema_edge_cases(rng):
    e, p = _store(rng, [(2, 2)]), _store(rng, [(2, 2)])
    assert ema_update(e, p, 0.0).allclose(p)
    with pytest.raises(ValueError):
        ema_update(e, p, 1.0)


def test_ema_fixed_point():
    e = ParamStore({"w": np.zeros((1, 1))})
    c = ParamStore({"w": np.full((1, 1), 3.0)})
    for _ in range(20000):
        e = ema_update(e, c, 0.999)
    assert e["w"][0, 0] == pytest.approx(3.0, abs=1e-6)


def test_ema_geometric_series():
    e = ParamStore({"w": np.zeros((1, 1))})
    c = ParamStore({"w": np.ones((1, 1))})
    for _ in range(1000):
        e = ema_update(e, c, 0.999)
    assert e["w"][0, 0] == pytest.approx(1 - 0.999 ** 1000, rel=1e-10)
