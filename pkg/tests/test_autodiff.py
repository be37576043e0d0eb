import numpy as np
import pytest

from imdet.autodiff import (Tensor, conv2d_3x3, maxpool2x2, parameter,
                            roi_max_pool)
from imdet.errors import ArgumentError
from tests_fd import fd_check


def test_add_mul_broadcast():
    rng = np.random.default_rng(1)
    a = parameter(rng.normal(size=(4, 5)))
    b = parameter(rng.normal(size=(5,)))
    c = rng.normal(size=(4, 5))
    fd_check(lambda: ((a + b) * c + a * a).sum(), [a, b], rng=rng)


def test_matmul():
    rng = np.random.default_rng(2)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4, 6)))
    c = rng.normal(size=(3, 6))
    fd_check(lambda: ((a @ b) * c).sum(), [a, b], rng=rng)


def test_relu_log_clip():
    rng = np.random.default_rng(3)
    # keep values away from the relu kink and clip edges
    a = parameter(rng.uniform(0.2, 2.0, size=(6, 6)) * rng.choice([-1, 1], size=(6, 6)))
    fd_check(lambda: (a.relu() + 0.5).log().sum(), [a], rng=rng)
    b = parameter(rng.uniform(0.1, 0.9, size=(10,)))
    fd_check(lambda: (b.clip(0.2, 0.8) * 3.0).sum(), [b], rng=rng)


def test_clip_blocks_gradient_outside_range():
    t = parameter(np.array([0.0, 0.5, 1.0]))
    loss = t.clip(0.2, 0.8).sum()
    loss.backward()
    assert t.grad.tolist() == [0.0, 1.0, 0.0]


def test_softmax_both_axes():
    rng = np.random.default_rng(4)
    a = parameter(rng.normal(size=(5, 3)))
    c = rng.normal(size=(5, 3))
    fd_check(lambda: (a.softmax(axis=0) * c).sum(), [a], rng=rng)
    fd_check(lambda: (a.softmax(axis=1) * c).sum(), [a], rng=rng)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    y = Tensor(rng.normal(size=(7, 4)) * 10).softmax(axis=1)
    assert np.allclose(y.value.sum(axis=1), 1.0, atol=1e-12)


def test_sum_axis_keepdims_reshape():
    rng = np.random.default_rng(6)
    a = parameter(rng.normal(size=(3, 4, 2)))
    c = rng.normal(size=(3, 1, 2))
    fd_check(lambda: (a.sum(axis=1, keepdims=True) * c).sum(), [a], rng=rng)
    d = rng.normal(size=(12, 2))
    fd_check(lambda: (a.reshape(12, 2) * d).sum(), [a], rng=rng)


def test_gradient_accumulates_on_reuse():
    x = parameter(np.array([2.0, 3.0]))
    y = np.array([5.0, 7.0])
    loss = (x * y + x).sum()
    loss.backward()
    assert np.allclose(x.grad, y + 1.0)


def test_backward_requires_scalar():
    x = parameter(np.ones((2, 2)))
    with pytest.raises(ArgumentError):
        (x * 2).backward()


def test_conv_shapes_and_gradients():
    rng = np.random.default_rng(7)
    x = parameter(rng.normal(size=(2, 5, 6)))
    w = parameter(rng.normal(size=(3, 2, 3, 3)) * 0.3)
    b = parameter(rng.normal(size=(3,)))
    c = rng.normal(size=(3, 5, 6))
    out = conv2d_3x3(x, w, b)
    assert out.value.shape == (3, 5, 6)
    fd_check(lambda: (conv2d_3x3(x, w, b) * c).sum(), [x, w, b], rng=rng)
    with pytest.raises(ArgumentError):
        conv2d_3x3(x, parameter(np.zeros((3, 4, 3, 3))), b)


def test_conv_against_direct_convolution():
    rng = np.random.default_rng(8)
    xv = rng.normal(size=(2, 4, 5))
    wv = rng.normal(size=(3, 2, 3, 3))
    bv = rng.normal(size=(3,))
    out = conv2d_3x3(Tensor(xv), Tensor(wv), Tensor(bv)).value
    # direct quadruple loop over the padded input
    pad = np.zeros((2, 6, 7))
    pad[:, 1:-1, 1:-1] = xv
    want = np.zeros((3, 4, 5))
    for co in range(3):
        for x in range(4):
            for y in range(5):
                acc = bv[co]
                for ci in range(2):
                    for dx in range(3):
                        for dy in range(3):
                            acc += wv[co, ci, dx, dy] * pad[ci, x + dx, y + dy]
                want[co, x, y] = acc
    assert np.allclose(out, want, atol=1e-12)


def test_maxpool_even_and_ceil():
    rng = np.random.default_rng(9)
    # distinct values so finite differences never flip an argmax
    vals = rng.permutation(3 * 6 * 6).reshape(3, 6, 6) * 0.1
    x = parameter(vals)
    out = maxpool2x2(x)
    assert out.value.shape == (3, 3, 3)
    want = vals.reshape(3, 3, 2, 3, 2).max(axis=(2, 4))
    assert np.array_equal(out.value, want)

    odd = parameter(rng.permutation(2 * 5 * 5).reshape(2, 5, 5) * 0.1)
    out_odd = maxpool2x2(odd)
    assert out_odd.value.shape == (2, 3, 3)
    # odd edge cells pool whatever real entries exist
    assert out_odd.value[0, 2, 2] == odd.value[0, 4, 4]
    c = rng.normal(size=(2, 3, 3))
    fd_check(lambda: (maxpool2x2(odd) * c).sum(), [odd], rng=rng)


def test_maxpool_tie_routes_once():
    x = parameter(np.zeros((1, 2, 2)))
    loss = maxpool2x2(x).sum()
    loss.backward()
    assert x.grad.sum() == 1.0   # all-equal window routes to one entry only


def test_roi_pool_gradients():
    rng = np.random.default_rng(10)
    fm = parameter(rng.permutation(4 * 8 * 8).reshape(4, 8, 8) * 0.1)
    boxes = np.array([[0.0, 0.0, 8.0, 8.0], [2.0, 1.0, 6.0, 6.0], [5.0, 5.0, 8.0, 8.0]])
    c = rng.normal(size=(3, 4 * 4))
    fd_check(lambda: (roi_max_pool(fm, boxes, 1.0, 2) * c).sum(), [fm], rng=rng)
    with pytest.raises(ArgumentError):
        roi_max_pool(fm, np.zeros((0, 4)), 1.0, 2)
