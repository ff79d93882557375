"""Decoder stack: time mapping, flow/mask levels, blending and the refiner."""

import numpy as np
import pytest

from garamost import tensor as T
from garamost.decoder import (DlFmeLevel, FlowMask, Refiner, blend,
                              combine_levels, time_map, warp_all)
from garamost.encoder import PyramidFeatures
from garamost.tensor import ShapeError, Tensor


def test_time_map_scales_linearly(rng):
    m0 = Tensor(rng.standard_normal((1, 4, 3, 3)).astype(np.float32))
    m1 = Tensor(rng.standard_normal((1, 4, 3, 3)).astype(np.float32))
    a, b = time_map(m0, m1, 0.25)
    np.testing.assert_allclose(a.data, 0.25 * m0.data, rtol=1e-6)
    np.testing.assert_allclose(b.data, 0.75 * m1.data, rtol=1e-6)
    with pytest.raises(ValueError):
        time_map(m0, m1, 1.5)


def test_combine_levels_sums_in_logit_space(rng):
    phi = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
    mu = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
    fm0 = FlowMask(Tensor(phi), Tensor(mu))
    fm1 = FlowMask(Tensor(2 * phi), Tensor(-mu))
    out = combine_levels(fm0, fm1)
    np.testing.assert_allclose(out.phi.data, 3 * phi, rtol=1e-6)
    np.testing.assert_allclose(out.mu_logits.data, 0.0, atol=1e-6)
    bad = FlowMask(Tensor(phi[:, :, :2]), Tensor(mu))
    with pytest.raises(ShapeError):
        combine_levels(fm0, bad)


def test_blend_formula_oracle(rng):
    i0 = Tensor(rng.random((1, 1, 6, 6), dtype=np.float32))
    i1 = Tensor(rng.random((1, 1, 6, 6), dtype=np.float32))
    mu = rng.standard_normal((1, 1, 6, 6)).astype(np.float32)
    fm = FlowMask(Tensor(np.zeros((1, 4, 6, 6), dtype=np.float32)), Tensor(mu))
    out = blend(i0, i1, fm).data
    m = 1 / (1 + np.exp(-mu))
    np.testing.assert_allclose(out, m * i0.data + (1 - m) * i1.data, rtol=1e-6)


def _fme_inputs(rng, level, vd=8, h=32, w=32):
    scale = 8 if level == 0 else 16
    alpha = Tensor(rng.standard_normal(
        (1, 4 * vd, h // scale, w // scale)).astype(np.float32))
    beta_ch = 2 if level == 0 else 4
    beta = Tensor(rng.random((1, beta_ch, h, w), dtype=np.float32))
    return alpha, beta


@pytest.mark.parametrize("level", [0, 1])
def test_fme_level_output_shapes(level, rng):
    fme = DlFmeLevel(level, 8, 16, np.random.default_rng(0))
    alpha, beta = _fme_inputs(rng, level)
    fm = fme(alpha, beta)
    assert fm.phi.shape == (1, 4, 32, 32)
    assert fm.mu_logits.shape == (1, 1, 32, 32)


@pytest.mark.parametrize("level", [0, 1])
def test_fme_zero_init_head_gives_zero_flow(level, rng):
    fme = DlFmeLevel(level, 8, 16, np.random.default_rng(0))
    alpha, beta = _fme_inputs(rng, level)
    fm = fme(alpha, beta)
    np.testing.assert_array_equal(fm.phi.data, 0.0)
    np.testing.assert_array_equal(fm.mu_logits.data, 0.0)


def test_fme_rejects_wrong_beta_channels(rng):
    fme = DlFmeLevel(0, 8, 16, np.random.default_rng(0))
    alpha, _ = _fme_inputs(rng, 0)
    bad_beta = Tensor(np.zeros((1, 4, 32, 32), dtype=np.float32))
    with pytest.raises(ShapeError, match="beta"):
        fme(alpha, bad_beta)


def test_fme_level_validation():
    with pytest.raises(ValueError):
        DlFmeLevel(2, 8, 16, np.random.default_rng(0))


def _warp_fixture(rng, c=4, vd=8, h=32, w=32):
    i0 = Tensor(rng.random((1, 1, h, w), dtype=np.float32))
    i1 = Tensor(rng.random((1, 1, h, w), dtype=np.float32))
    pyr = PyramidFeatures(*[
        Tensor(rng.standard_normal((1, c << i, h >> i, w >> i)).astype(np.float32))
        for i in range(4)
    ])
    s0p = Tensor(rng.standard_normal((1, vd, h // 16, w // 16)).astype(np.float32))
    s1p = Tensor(rng.standard_normal((1, vd, h // 16, w // 16)).astype(np.float32))
    phi = Tensor((rng.standard_normal((1, 4, h, w)) * 0.5).astype(np.float32))
    mu = Tensor(rng.standard_normal((1, 1, h, w)).astype(np.float32))
    return i0, i1, pyr, s0p, s1p, FlowMask(phi, mu)


def test_warp_all_shapes_and_flow_rescaling(rng):
    i0, i1, pyr, s0p, s1p, fm = _warp_fixture(rng)
    ws = warp_all(i0, i1, pyr, pyr, s0p, s1p, fm)
    assert ws.warped_i0.shape == i0.shape
    for lvl, got in zip(pyr.levels(), ws.pyr0):
        assert got.shape == lvl.shape
    assert ws.s0p.shape == s0p.shape
    # constant integer flow on a constant feature map stays constant
    const = PyramidFeatures(*[Tensor(np.full(l.shape, 3.25, dtype=np.float32))
                              for l in pyr.levels()])
    flow = FlowMask(Tensor(np.full((1, 4, 32, 32), 8.0, dtype=np.float32)),
                    fm.mu_logits)
    ws2 = warp_all(i0, i1, const, const, s0p, s1p, flow)
    np.testing.assert_allclose(ws2.pyr0[2].data, 3.25, rtol=1e-6)


def test_refiner_residual_zero_at_init(rng):
    vd, c = 8, 4
    ref = Refiner(c, vd, np.random.default_rng(0), widths=(8, 8, 16, 16))
    i0, i1, pyr, s0p, s1p, fm = _warp_fixture(rng, c=c, vd=vd)
    ws = warp_all(i0, i1, pyr, pyr, s0p, s1p, fm)
    o_t = T.concat([i0, i1, ws.warped_i0, ws.warped_i1, fm.phi, fm.mu_logits],
                   axis=1)
    blended = blend(i0, i1, fm, warped=(ws.warped_i0, ws.warped_i1))
    out = ref(o_t, ws, blended)
    assert out.shape == i0.shape
    # zero-init output head: the refiner passes the blended frame through
    np.testing.assert_array_equal(
        out.data, np.clip(blended.data, 0.0, 1.0))


def test_refiner_deep_structs_changes_wiring(rng):
    vd, c = 8, 4
    base = Refiner(c, vd, np.random.default_rng(0), widths=(8, 8, 16, 16))
    deep = Refiner(c, vd, np.random.default_rng(0), widths=(8, 8, 16, 16),
                   deep_structs=True)
    # the 1/8-scale fuse consumes structural features instead of pyramid l3
    assert (deep.fuses[2].weight.shape[1]
            != base.fuses[2].weight.shape[1])
    i0, i1, pyr, s0p, s1p, fm = _warp_fixture(rng, c=c, vd=vd)
    ws = warp_all(i0, i1, pyr, pyr, s0p, s1p, fm)
    o_t = T.concat([i0, i1, ws.warped_i0, ws.warped_i1, fm.phi, fm.mu_logits],
                   axis=1)
    blended = blend(i0, i1, fm)
    # both wirings run end to end
    assert base(o_t, ws, blended).shape == i0.shape
    assert deep(o_t, ws, blended).shape == i0.shape


def test_refiner_rejects_mismatched_skip(rng):
    vd, c = 8, 4
    ref = Refiner(c, vd, np.random.default_rng(0), widths=(8, 8, 16, 16))
    i0, i1, pyr, s0p, s1p, fm = _warp_fixture(rng, c=c, vd=vd)
    ws = warp_all(i0, i1, pyr, pyr, s0p, s1p, fm)
    ws.pyr0[1] = Tensor(np.zeros((1, c * 2, 8, 8), dtype=np.float32))
    o_t = T.concat([i0, i1, ws.warped_i0, ws.warped_i1, fm.phi, fm.mu_logits],
                   axis=1)
    with pytest.raises(ShapeError, match="skip"):
        ref(o_t, ws, blend(i0, i1, fm))
