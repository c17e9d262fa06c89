import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshape.numerics import tensor as T
from fewshape.numerics.gradcheck import check_grads, numeric_grad, rel_error
from fewshape.numerics.io import (FormatError, load_checkpoint, load_tensor, save_checkpoint, save_tensor,
                                  tensor_from_bytes, tensor_to_bytes)
from fewshape.numerics.module import Conv2d, LayerNorm, Linear, Module
from fewshape.numerics.optim import AdamW, NonFiniteGradient, OptimizerState, adamw_step
from fewshape.numerics.tensor import ShapeError, Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# ------------------------------------------------------------ forward values

def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor(np.full((2, 5), 3.7)))
    assert np.all(out.data == 0.0)


def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_saturates_without_overflow():
    out = T.sigmoid(Tensor([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.0, 1.0])


def test_matmul_shape_error_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_broadcast_mismatch_rejected():
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_forward_op_dispatch():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    assert np.array_equal(T.forward_op("mul", a, b).data, [3.0, 8.0])
    with pytest.raises(ValueError, match="unknown op"):
        T.forward_op("nope", a)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.floats(0.1, 50.0))
def test_softmax_rows_sum_to_one(rows, cols, scale):
    x = np.random.default_rng(rows * 31 + cols).normal(size=(rows, cols)) * scale
    out = T.softmax(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


# ----------------------------------------------------------------- backward

def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.reduce_sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_sigmoid_slope():
    w = Tensor(0.0, requires_grad=True)
    T.sigmoid(w * 1.0).backward()
    assert w.grad == pytest.approx(0.25)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_backward_twice_is_deterministic():
    rng = np.random.default_rng(0)
    x, w = leaf(rng, 4, 3), leaf(rng, 3, 2)

    def f():
        return T.reduce_sum(T.sigmoid(T.matmul(x, w)) ** 2)

    f().backward()
    g1 = (x.grad.copy(), w.grad.copy())
    x.grad = w.grad = None
    f().backward()
    assert np.array_equal(g1[0], x.grad) and np.array_equal(g1[1], w.grad)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and not y._parents


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    ws = [leaf(rng, 4, 6), leaf(rng, 6, 6), leaf(rng, 6, 1)]
    bs = [leaf(rng, 6), leaf(rng, 6), leaf(rng, 1)]

    def f():
        h = Tensor(x)
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = T.matmul(h, w) + b
            if i < 2:
                h = T.sigmoid(h)
        return T.reduce_sum(h)

    assert check_grads(f, ws + bs) < 1e-5


# Each entry builds a scalar from random leaves; kinked ops keep their inputs
# away from the kink so central differences stay valid.
def _op_cases():
    def pos(rng, *s):
        return Tensor(rng.uniform(0.5, 2.0, size=s), requires_grad=True)

    def away(rng, *s, lo=0.05):
        v = rng.uniform(lo, 2.0, size=s) * rng.choice([-1.0, 1.0], size=s)
        return Tensor(v, requires_grad=True)

    return {
        "add": lambda r: ((a := leaf(r, 3, 4)), (b := leaf(r, 4)), lambda: T.reduce_sum((a + b) ** 2)),
        "sub": lambda r: ((a := leaf(r, 3, 1)), (b := leaf(r, 3, 4)), lambda: T.reduce_sum((a - b) ** 2)),
        "mul": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 2, 3)), lambda: T.reduce_sum(a * b * a)),
        "div": lambda r: ((a := leaf(r, 3)), (b := pos(r, 3)), lambda: T.reduce_sum(a / b)),
        "exp": lambda r: ((a := leaf(r, 4)), lambda: T.reduce_sum(T.exp(a))),
        "log": lambda r: ((a := pos(r, 4)), lambda: T.reduce_sum(T.log(a) * a)),
        "sqrt": lambda r: ((a := pos(r, 4)), lambda: T.reduce_sum(T.sqrt(a))),
        "sin_cos": lambda r: ((a := leaf(r, 4)), lambda: T.reduce_sum(T.sin(a) * T.cos(a * 2.0))),
        "power": lambda r: ((a := pos(r, 4)), lambda: T.reduce_sum(T.power(a, 2.5))),
        "sigmoid": lambda r: ((a := leaf(r, 5)), lambda: T.reduce_sum(T.sigmoid(a) ** 2)),
        "relu": lambda r: ((a := away(r, 6)), lambda: T.reduce_sum(T.relu(a) ** 2)),
        "clip": lambda r: ((a := away(r, 6, lo=0.05)), lambda: T.reduce_sum(T.clip(a * 0.4, -0.5, 0.5) ** 2)),
        "smooth_l1": lambda r: ((a := away(r, 6)), lambda: T.reduce_sum(T.smooth_l1(a * 1.3 + 0.0))),
        "softmax": lambda r: ((a := leaf(r, 3, 5)), lambda: T.reduce_sum(T.softmax(a) * np.arange(5.0))),
        "layer_norm": lambda r: ((a := leaf(r, 3, 6)), (g := leaf(r, 6)), (b := leaf(r, 6)),
                                 lambda: T.reduce_sum(T.layer_norm(a, g, b) * np.linspace(-1, 1, 6))),
        "reduce_mean": lambda r: ((a := leaf(r, 3, 4)), lambda: T.reduce_sum(T.reduce_mean(a, axis=0) ** 2)),
        "reshape_transpose": lambda r: ((a := leaf(r, 2, 6)),
                                        lambda: T.reduce_sum(T.transpose(T.reshape(a, (3, 4)), (1, 0)) * np.arange(12.0).reshape(4, 3))),
        "getitem": lambda r: ((a := leaf(r, 4, 3)), lambda: T.reduce_sum(T.getitem(a, (np.array([0, 2, 2]), slice(None))) ** 2)),
        "concat": lambda r: ((a := leaf(r, 2, 3)), (b := leaf(r, 2, 2)), lambda: T.reduce_sum(T.concat([a, b], -1) ** 3)),
        "gather_rows": lambda r: ((a := leaf(r, 2, 5, 3)),
                                  lambda: T.reduce_sum(T.gather_rows(a, np.array([[4, 0, 4], [1, 2, 3]])) ** 2)),
        "matmul": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 4, 5)), lambda: T.reduce_sum(T.matmul(a, b) ** 2)),
        "matmul_batched": lambda r: ((a := leaf(r, 2, 3, 4)), (b := leaf(r, 2, 4, 2)),
                                     lambda: T.reduce_sum(T.matmul(a, b) ** 2)),
        "conv2d": lambda r: ((x := leaf(r, 2, 5, 5, 3)), (w := leaf(r, 3, 3, 3, 2)), (b := leaf(r, 2)),
                             lambda: T.reduce_sum(T.conv2d(x, w, b, stride=1, padding=1) ** 2)),
        "conv2d_stride2": lambda r: ((x := leaf(r, 1, 6, 6, 2)), (w := leaf(r, 3, 3, 2, 3)),
                                     lambda: T.reduce_sum(T.conv2d(x, w, None, stride=2, padding=1) ** 2)),
        "upsample": lambda r: ((x := leaf(r, 1, 2, 3, 2)), lambda: T.reduce_sum(T.upsample_nearest(x, 2) ** 2 * 0.5)),
        "bilinear": lambda r: ((x := leaf(r, 1, 4, 5, 2)),
                               (c := Tensor(r.uniform(0.1, 0.9, size=(1, 6, 2)) + r.integers(0, 3, size=(1, 6, 2)),
                                            requires_grad=True)),
                               lambda: T.reduce_sum(T.bilinear_sample(x, c) ** 2)),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_op_gradients_match_finite_differences(name):
    build = _op_cases()[name]
    worst, checked, seed = 0.0, 0, 0
    while checked < 1000:
        *inputs, fn = build(np.random.default_rng(seed))
        worst = max(worst, check_grads(fn, inputs, step=1e-6))
        checked += sum(t.data.size for t in inputs)
        seed += 1
    assert worst < 1e-4, f"{name}: rel error {worst:.2e}"


def test_numeric_grad_restores_input():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    numeric_grad(lambda: T.reduce_sum(t * t), t)
    np.testing.assert_array_equal(t.data, [1.0, 2.0])


def test_rel_error_zero_for_equal_arrays():
    a = np.array([1.0, -2.0])
    assert rel_error(a, a.copy()) == 0.0


# --------------------------------------------------------------------- conv

def _conv_reference(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    B, H, W, C = xp.shape
    kh, kw, _, co = w.shape
    ho, wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((B, ho, wo, co))
    for n in range(B):
        for i in range(ho):
            for j in range(wo):
                for o in range(co):
                    acc = b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(C):
                                acc += xp[n, i * stride + di, j * stride + dj, c] * w[di, dj, c, o]
                    out[n, i, j, o] = acc
    return out


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0), (5, 2, 2)])
def test_conv2d_matches_nested_loops(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.normal(size=(2, 5, 5, 3))
    w = rng.normal(size=(k, k, 3, 4))
    b = rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, _conv_reference(x, w, b, stride, pad), atol=1e-10, rtol=0)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((1, 4, 4, 3))), Tensor(np.ones((3, 3, 2, 1))))


# ---------------------------------------------------------------- optimizer

def test_adamw_decay_only():
    params = {"p": np.array([1.0])}
    state = OptimizerState(lr=1.0, weight_decay=0.1)
    adamw_step(params, {"p": np.zeros(1)}, state)
    assert params["p"][0] == pytest.approx(0.9)


def test_adamw_first_step_is_sign_step():
    params = {"p": np.array([0.0, 0.0])}
    state = OptimizerState(lr=0.01, weight_decay=0.0)
    adamw_step(params, {"p": np.array([5.0, -0.3])}, state)
    np.testing.assert_allclose(params["p"], [-0.01, 0.01], rtol=1e-6)


def test_adamw_minimizes_quadratic():
    w = Tensor(np.array(0.0), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
    for _ in range(100):
        opt.zero_grad()
        ((w - 3.0) ** 2).backward()
        opt.step()
    assert abs(float(w.data) - 3.0) < 0.05


def test_adamw_rejects_non_finite_with_name():
    params = {"good": np.array([1.0]), "bad": np.array([1.0])}
    state = OptimizerState()
    with pytest.raises(NonFiniteGradient, match="bad"):
        adamw_step(params, {"good": np.array([1.0]), "bad": np.array([np.nan])}, state)
    assert state.step == 0 and params["good"][0] == 1.0


def test_adamw_step_count_increases():
    params = {"p": np.ones(2)}
    state = OptimizerState()
    for k in range(1, 4):
        adamw_step(params, {"p": np.ones(2)}, state)
        assert state.step == k
        assert state.m["p"].shape == params["p"].shape


# ----------------------------------------------------------------------- io

def test_tensor_bytes_round_trip():
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7
    back = tensor_from_bytes(tensor_to_bytes(arr))
    assert back.dtype == np.float64 and back.shape == arr.shape
    np.testing.assert_allclose(back, arr.astype(np.float32))


def test_tensor_header_layout():
    buf = tensor_to_bytes(np.zeros((2, 3)))
    assert buf[:4] == b"FTNS"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert int.from_bytes(buf[6:10], "little") == 2
    assert int.from_bytes(buf[10:18], "little") == 2
    assert len(buf) == 4 + 2 + 4 + 16 + 6 * 4


def test_tensor_bad_magic():
    with pytest.raises(FormatError):
        tensor_from_bytes(b"XXXX" + tensor_to_bytes(np.zeros(1))[4:])


def test_tensor_truncated():
    with pytest.raises(FormatError):
        tensor_from_bytes(tensor_to_bytes(np.zeros(8))[:-4])


def test_tensor_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4))
    save_tensor(tmp_path / "a.ftns", arr)
    np.testing.assert_allclose(load_tensor(tmp_path / "a.ftns"), arr, rtol=1e-6)


def test_checkpoint_round_trip_and_hash_stability(tmp_path):
    tensors = {"b/w": np.ones((2, 2)), "a/bias": np.arange(3.0)}
    h1 = save_checkpoint(tmp_path / "1.ckpt", tensors, {"epoch": 3})
    h2 = save_checkpoint(tmp_path / "2.ckpt", dict(reversed(list(tensors.items()))), {"epoch": 3})
    assert h1 == h2
    back, meta = load_checkpoint(tmp_path / "1.ckpt")
    assert meta == {"epoch": 3}
    assert set(back) == set(tensors)
    np.testing.assert_array_equal(back["a/bias"], tensors["a/bias"])


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="checkpoint not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


# ------------------------------------------------------------------ modules

class _Tiny(Module):
    def __init__(self, rng):
        self.fc = Linear(rng, 3, 2)
        self.convs = [Conv2d(rng, 2, 2, k=1), Conv2d(rng, 2, 2, k=3)]
        self.norm = LayerNorm(2)


def test_module_names_and_state_round_trip():
    rng = np.random.default_rng(0)
    m = _Tiny(rng)
    names = set(m.named_parameters())
    assert {"fc/weight", "fc/bias", "convs/0/weight", "convs/1/bias", "norm/gamma"} <= names
    other = _Tiny(np.random.default_rng(1))
    other.load_state_dict(m.state_dict())
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(other.named_parameters()[k].data, v)


def test_module_load_reports_shape_diff():
    rng = np.random.default_rng(0)
    m = _Tiny(rng)
    state = m.state_dict()
    state["fc/weight"] = np.zeros((4, 2))
    del state["norm/beta"]
    with pytest.raises(ValueError, match="missing=norm/beta.*fc/weight"):
        m.load_state_dict(state)


def test_uniform_init_bound():
    rng = np.random.default_rng(0)
    w = Linear(rng, 16, 8).weight.data
    assert np.abs(w).max() <= 1 / math.sqrt(16)
