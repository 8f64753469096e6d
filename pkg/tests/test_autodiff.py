import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from deskhmr import autodiff as ad
from deskhmr.autodiff import ContractError, NumericError, ShapeError, Tape, Tensor


UNARY = {
    "neg": ad.neg, "exp": ad.exp, "sigmoid": ad.sigmoid, "silu": ad.silu, "softplus": ad.softplus,
    "square": ad.square, "softmax": ad.softmax_lastdim,
    "log": lambda t: ad.log(ad.add(ad.square(t), 0.5)),
    "sqrt": lambda t: ad.sqrt(ad.add(ad.square(t), 0.1)),
    "abs": lambda t: ad.abs(ad.add(t, 10.0)),
    "reshape": lambda t: ad.reshape(t, (4, 6)),
    "transpose": lambda t: ad.transpose(t, (2, 0, 1)),
    "expand": lambda t: ad.expand(t, 1, 3),
    "sum_axis": lambda t: ad.reduce_sum(t, axis=1, keepdims=True),
    "mean": lambda t: ad.reduce_mean(t, axis=-1),
    "slice": lambda t: ad.slice(t, 2, 1, 3),
    "gather": lambda t: ad.gather_rows(t, np.array([2, 0, 2]), axis=1),
    "scatter": lambda t: ad.scatter_rows(t, np.array([4, 0, 2]), 5, axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    f = UNARY[name]
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=f(Tensor(x)).shape)
    rep = ad.grad_check(lambda t: ad.reduce_sum(ad.mul(f(t), w)), x)
    assert rep.passed, rep


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b, (0, 2, 1))),
    "concat": lambda a, b: ad.concat([a, b], axis=1),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name, rng):
    f = BINARY[name]
    xs = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 3, 4))}
    w = rng.normal(size=f(Tensor(xs["a"]), Tensor(xs["b"])).shape)
    rep = ad.grad_check(lambda v: ad.reduce_sum(ad.mul(f(v["a"], v["b"]), w)), xs)
    assert rep.passed, rep


def test_suffix_broadcast_gradient(rng):
    xs = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(3, 4))}
    w = rng.normal(size=(2, 3, 4))
    rep = ad.grad_check(lambda v: ad.reduce_sum(ad.mul(ad.mul(v["a"], v["b"]), w)), xs)
    assert rep.passed


def test_non_suffix_broadcast_rejected():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_conv1d_matches_numpy_convolve(rng):
    x = rng.normal(size=(1, 9, 2))
    w = rng.normal(size=(3, 2))
    y = ad.conv1d_depthwise(x, w).data
    for d in range(2):
        ref = np.convolve(x[0, :, d], w[:, d])[:9]
        np.testing.assert_allclose(y[0, :, d], ref, atol=1e-14)


def test_conv1d_segments_do_not_leak(rng):
    x = rng.normal(size=(1, 6, 1))
    w = rng.normal(size=(3, 1))
    seg = np.array([0, 0, 0, 1, 1, 1])
    y = ad.conv1d_depthwise(x, w, segments=seg).data
    tail = ad.conv1d_depthwise(x[:, 3:], w).data
    np.testing.assert_allclose(y[:, 3:], tail, atol=1e-15)


def test_conv1d_gradient_with_segments(rng):
    seg = np.array([0, 0, 1, 1, 1, 2, 2])
    xs = {"x": rng.normal(size=(2, 7, 3)), "w": rng.normal(size=(3, 3))}
    W = rng.normal(size=(2, 7, 3))
    rep = ad.grad_check(lambda v: ad.reduce_sum(ad.mul(ad.conv1d_depthwise(v["x"], v["w"], seg), W)), xs)
    assert rep.passed


def test_bilinear_matches_scipy_map_coordinates(rng):
    H, W, C = 5, 7, 3
    grid = rng.normal(size=(1, H, W, C))
    coords = rng.uniform(-1, 1, size=(1, 20, 2))
    out = ad.bilinear_sample_2d(grid, coords).data[0]
    cols = (coords[0, :, 0] + 1) / 2 * (W - 1)
    rows = (coords[0, :, 1] + 1) / 2 * (H - 1)
    for c in range(C):
        ref = ndimage.map_coordinates(grid[0, :, :, c], [rows, cols], order=1, mode="nearest")
        np.testing.assert_allclose(out[:, c], ref, atol=1e-12)


def test_bilinear_clamps_outside_points(rng):
    grid = rng.normal(size=(1, 4, 4, 2))
    out = ad.bilinear_sample_2d(grid, np.array([[[-3.0, -3.0], [5.0, 5.0]]])).data[0]
    np.testing.assert_allclose(out[0], grid[0, 0, 0])
    np.testing.assert_allclose(out[1], grid[0, 3, 3])


def test_bilinear_gradients(rng):
    xs = {"g": rng.normal(size=(2, 4, 5, 3)), "c": rng.uniform(-0.9, 0.9, size=(2, 6, 2))}
    W = rng.normal(size=(2, 6, 3))
    rep = ad.grad_check(lambda v: ad.reduce_sum(ad.mul(ad.bilinear_sample_2d(v["g"], v["c"]), W)), xs,
                        step=1e-6, tol=1e-3)
    assert rep.passed, rep


def test_no_tape_no_recording():
    a = Tensor(np.ones(3), requires_grad=True)
    b = ad.mul(a, 2.0)
    assert ad.active_tape() is None
    with Tape() as tape:
        c = ad.mul(a, 2.0)
    assert len(tape.nodes) == 1
    with pytest.raises(ContractError):
        tape.backward(ad.reduce_sum(b))
    del c


def test_backward_twice_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(ad.square(a))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_backward_needs_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.square(a)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_shared_input_accumulates():
    a = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(ad.add(ad.mul(a, a), ad.mul(a, 3.0)))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * a.data + 3.0)


def test_grad_check_rejects_non_finite():
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        ad.grad_check(lambda t: ad.reduce_sum(ad.log(t)), np.array([-1.0, 2.0]))


def test_grad_check_catches_a_wrong_vjp():
    def bad_square(a):
        a = ad.as_tensor(a)
        return ad.record("bad_square", a.data ** 2, (a,), lambda g: (g * a.data,))

    rep = ad.grad_check(lambda t: ad.reduce_sum(bad_square(t)), np.array([1.0, 2.0, 3.0]))
    assert not rep.passed and rep.max_rel_err > 0.3


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=30, size=(rows, cols))
    s = ad.softmax_lastdim(x).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
    assert np.all(s >= 0)
