"""Autodiff core: forward oracles and gradient checks for every primitive."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerdiff import tensor as T
from layerdiff.params import ParamStore, backward, finite_diff_check
from layerdiff.tensor import ShapeError, Tensor


def conv2d_loops(x, w, b, stride, padding):
    """Six-nested-loop convolution oracle (cross-correlation convention)."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for oi in range(c_out):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (
                                    xp[ni, ci, yi * stride + ky, xi * stride + kx]
                                    * w[oi, ci, ky, kx]
                                )
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


def test_conv2d_matches_loop_oracle_many_random_shapes():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(100):
        n = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.integers(0, 2))
        h = int(rng.integers(k, 7))
        if (h + 2 * padding - k) % stride:
            h += stride - (h + 2 * padding - k) % stride
        x = rng.normal(size=(n, c_in, h, h))
        w = rng.normal(size=(c_out, c_in, k, k))
        b = rng.normal(size=c_out) if rng.random() < 0.5 else None
        got = T.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b),
                       stride=stride, padding=padding).data
        want = conv2d_loops(x, w, b, stride, padding)
        assert np.allclose(got, want, atol=1e-10), (n, c_in, c_out, k, stride)
        checked += 1
    assert checked == 100


def _fd(build, shapes, seed=0):
    """finite_diff_check wrapper: build(params) -> scalar Tensor."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype=np.float64)
    for name, shape in shapes.items():
        store.add(name, rng.normal(size=shape))
    return finite_diff_check(build, store, rng=np.random.default_rng(1))


def test_backward_elementwise_ops():
    err = _fd(lambda p: ((p["a"] * p["b"] + p["a"] / (p["b"] * p["b"] + 2.0)
                          - p["b"]).sigmoid().silu().exp()).mean(),
              {"a": (3, 4), "b": (3, 4)})
    assert err < 1e-4


def test_backward_pow_log_sum_mean_axes():
    err = _fd(lambda p: ((p["a"] ** 3).sum(axis=0)
                         * (p["a"] * p["a"] + 0.5).log().mean(axis=1)).sum(),
              {"a": (4, 4)})
    assert err < 1e-4


def test_backward_matmul_batched_and_broadcast():
    err = _fd(lambda p: (T.matmul(p["a"], p["b"])
                         * T.matmul(p["c"], p["b"])).mean(),
              {"a": (2, 3, 4), "b": (4, 5), "c": (1, 3, 4)})
    assert err < 1e-4


def test_backward_conv2d_all_settings():
    for stride, padding in ((1, 0), (1, 1), (2, 1)):
        err = _fd(lambda p: T.conv2d(p["x"], p["w"], p["b"], stride=stride,
                                     padding=padding).mean(),
                  {"x": (2, 3, 6, 6), "w": (4, 3, 3, 3), "b": (4,)},
                  seed=stride * 10 + padding)
        assert err < 1e-4, (stride, padding)


def test_backward_softmax_attention_pattern():
    def f(p):
        scores = T.matmul(p["q"].transpose((0, 2, 1)), p["k"])
        attn = T.softmax(scores, axis=2)
        return (T.matmul(p["v"], attn.transpose((0, 2, 1))) * p["v"]).mean()

    err = _fd(f, {"q": (2, 3, 5), "k": (2, 3, 5), "v": (2, 3, 5)})
    assert err < 1e-4


def test_backward_upsample_concat_getitem_transpose_reshape():
    def f(p):
        up = T.nearest_upsample(p["x"], 2)
        cat = T.concat([up, up * 2.0], axis=1)
        sl = cat[:, :, 1:5, 0:4]
        return sl.transpose((0, 2, 3, 1)).reshape((-1,)).mean()

    err = _fd(f, {"x": (1, 2, 3, 3)})
    assert err < 1e-4


def test_backward_gather_rows():
    ids = np.array([[0, 2, 2], [1, 0, 3]])

    def f(p):
        return (T.gather_rows(p["tab"], ids) * T.gather_rows(p["tab"], ids)).mean()

    err = _fd(f, {"tab": (4, 5)})
    assert err < 1e-4


def test_quadratic_gradient_is_exact():
    store = ParamStore(dtype=np.float64)
    x = store.add("x", np.array([2.0, 4.0]))
    loss = (x * x).sum()
    backward(loss, store)
    assert np.array_equal(x.grad, np.array([4.0, 8.0]))


def test_disconnected_parameter_gets_zero_gradient():
    store = ParamStore(dtype=np.float64)
    x = store.add("x", np.ones(3))
    store.add("unused", np.ones(2))
    backward((x * x).sum(), store)
    assert np.array_equal(store["unused"].grad, np.zeros(2))


def test_shape_errors_name_the_problem():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 5)))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    s = T.softmax(Tensor(rng.normal(size=(2, 5, 7))), axis=2)
    assert np.allclose(s.data.sum(axis=2), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=20))
def test_mean_matches_numpy(values):
    arr = np.asarray(values, dtype=np.float64)
    assert np.isclose(Tensor(arr).mean().item(), arr.mean(), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_transpose_reshape_roundtrip(a, b, c):
    rng = np.random.default_rng(a * 16 + b * 4 + c)
    x = rng.normal(size=(a, b, c))
    t = Tensor(x).transpose((2, 0, 1)).transpose((1, 2, 0))
    assert np.array_equal(t.data, x)
    assert np.array_equal(Tensor(x).reshape((-1,)).reshape((a, b, c)).data, x)
