"""Bilinear warping and resizing: integer-shift oracle, interpolation
identities, border behaviour and gradients."""

import numpy as np
import pytest

from garamost import tensor as T
from garamost.gradcheck import grad_check
from garamost.tensor import ShapeError, Tensor

from conftest import t64


def test_zero_flow_is_identity(rng):
    img = Tensor(rng.standard_normal((2, 3, 5, 6)).astype(np.float32))
    flow = Tensor(np.zeros((2, 2, 5, 6), dtype=np.float32))
    out = T.bilinear_warp(img, flow).data
    np.testing.assert_array_equal(out, img.data)


def test_integer_shift_oracle(rng):
    # Integer displacements must reproduce exact shifted pixels (backward
    # warp: out(x) = img(x + u)), with border clamping outside.
    img = rng.standard_normal((1, 2, 6, 7)).astype(np.float32)
    for u, v in [(1, 0), (0, 2), (-1, 1), (3, -2)]:
        flow = np.zeros((1, 2, 6, 7), dtype=np.float32)
        flow[:, 0] = u
        flow[:, 1] = v
        out = T.bilinear_warp(Tensor(img), Tensor(flow)).data
        xs = np.clip(np.arange(7) + u, 0, 6)
        ys = np.clip(np.arange(6) + v, 0, 5)
        want = img[:, :, ys][:, :, :, xs]
        np.testing.assert_array_equal(out, want)


def test_fractional_shift_interpolates_linearly(rng):
    img = rng.standard_normal((1, 1, 4, 8)).astype(np.float64)
    flow = np.zeros((1, 2, 4, 8))
    flow[:, 0] = 0.25  # quarter-pixel right
    out = T.bilinear_warp(Tensor(img), Tensor(flow)).data
    want = 0.75 * img[..., :] + 0.25 * np.concatenate(
        [img[..., 1:], img[..., -1:]], axis=-1)
    np.testing.assert_allclose(out[..., :-1], want[..., :-1], rtol=1e-12)


def test_warp_grads(rng, f64):
    img = t64(rng, 1, 2, 5, 6)
    flow = T.Tensor(rng.uniform(-1.3, 1.3, (1, 2, 5, 6)), requires_grad=True)
    # keep sampling points away from exact integers (abs kink of bilinear)
    flow.data = np.round(flow.data * 4) / 4 + 0.13
    w = T.Tensor(rng.standard_normal((1, 2, 5, 6)))

    def fn(i, f):
        return T.tsum(T.mul(T.bilinear_warp(i, f), w))

    assert grad_check(fn, [img, flow], max_coords_per_input=40, rng=rng) < 1e-7


def test_border_coordinate_grad_is_zero(rng, f64):
    # Clamped samples must not propagate gradient to the flow.
    img = t64(rng, 1, 1, 4, 4)
    flow = T.Tensor(np.full((1, 2, 4, 4), 10.0), requires_grad=True)
    out = T.bilinear_warp(img, flow)
    T.tsum(out).backward()
    np.testing.assert_array_equal(flow.grad, 0.0)


def test_resize_identity_and_doubling(rng):
    x = rng.standard_normal((1, 2, 4, 6)).astype(np.float32)
    same = T.bilinear_resize(Tensor(x), 4, 6).data
    np.testing.assert_allclose(same, x, rtol=1e-6)
    up = T.bilinear_resize(Tensor(x), 8, 12).data
    assert up.shape == (1, 2, 8, 12)
    # half-pixel convention: the mean is preserved away from borders
    np.testing.assert_allclose(up[..., 2:-2, 2:-2].mean(),
                               x[..., 1:-1, 1:-1].mean(), atol=0.2)


def test_resize_averages_neighbors(rng):
    # Downscaling 2x with half-pixel centers lands exactly between four
    # pixels, i.e. their average.
    x = rng.standard_normal((1, 1, 4, 4)).astype(np.float64)
    down = T.bilinear_resize(Tensor(x), 2, 2).data
    want = x.reshape(1, 1, 2, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(down, want, rtol=1e-12)


def test_resize_grad(rng, f64):
    x = t64(rng, 1, 2, 4, 4)
    w = T.Tensor(rng.standard_normal((1, 2, 6, 7)))
    assert grad_check(lambda v: T.tsum(T.mul(T.bilinear_resize(v, 6, 7), w)),
                      [x], max_coords_per_input=32, rng=rng) < 1e-7


def test_warp_shape_errors():
    img = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
    bad_flow = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        T.bilinear_warp(img, bad_flow)
    mismatched = Tensor(np.zeros((1, 2, 5, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        T.bilinear_warp(img, mismatched)
