"""Decoding stack: time mapping, dual-layer flow/mask estimation, warping,
mask blending and UNet refinement.

The 1/8-path level runs first; its blended frame and mask feed the 1/16-path
level, and the two flow/mask predictions are summed (masks in logit space).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .nn import Conv2d, Module, ModuleList, PReLU
from .tensor import ShapeError, Tensor

__all__ = ["FlowMask", "WarpedSet", "time_map", "combine_levels", "blend",
           "warp_all", "DlFmeLevel", "Refiner"]


@dataclass
class FlowMask:
    """Bidirectional flow (ch 0-1: t->0, ch 2-3: t->1, pixels) + mask logits."""

    phi: Tensor
    mu_logits: Tensor


@dataclass
class WarpedSet:
    warped_i0: Tensor
    warped_i1: Tensor
    pyr0: list
    pyr1: list
    s0p: Tensor
    s1p: Tensor


def time_map(m0, m1, t):
    """Scale the general motion features to time step t (linear motion)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time step t={t} outside [0, 1]")
    return T.scale(m0, t), T.scale(m1, 1.0 - t)


def combine_levels(fm0, fm1):
    if fm0.phi.shape != fm1.phi.shape or fm0.mu_logits.shape != fm1.mu_logits.shape:
        raise ShapeError("combine_levels: level outputs disagree in shape")
    return FlowMask(phi=T.add(fm0.phi, fm1.phi),
                    mu_logits=T.add(fm0.mu_logits, fm1.mu_logits))


def _split_flow(phi):
    n, _, h, w = phi.shape
    f0 = T.crop(phi, (slice(None), slice(0, 2)))
    f1 = T.crop(phi, (slice(None), slice(2, 4)))
    return f0, f1


def blend(i0, i1, fm, warped=None):
    """Mask-blended backward warping of the two endpoint frames.

    Pass `warped` = (warp(i0), warp(i1)) to reuse already-computed warps.
    """
    if warped is None:
        f0, f1 = _split_flow(fm.phi)
        w0 = T.bilinear_warp(i0, f0)
        w1 = T.bilinear_warp(i1, f1)
    else:
        w0, w1 = warped
    m = T.sigmoid(fm.mu_logits)
    one_minus = T.add_scalar(T.neg(m), 1.0)
    return T.add(T.mul(m, w0), T.mul(one_minus, w1))


def _warp_scaled(feat, flow_full):
    """Warp a feature at scale 1/s with the full-res flow resized and rescaled."""
    h, w = feat.shape[2], feat.shape[3]
    hf, wf = flow_full.shape[2], flow_full.shape[3]
    if (h, w) == (hf, wf):
        return T.bilinear_warp(feat, flow_full)
    flow = T.scale(T.bilinear_resize(flow_full, h, w), h / hf)
    return T.bilinear_warp(feat, flow)


def warp_all(i0, i1, pyr0, pyr1, s0p, s1p, fm):
    f0, f1 = _split_flow(fm.phi)
    return WarpedSet(
        warped_i0=T.bilinear_warp(i0, f0),
        warped_i1=T.bilinear_warp(i1, f1),
        pyr0=[_warp_scaled(l, f0) for l in pyr0.levels()],
        pyr1=[_warp_scaled(l, f1) for l in pyr1.levels()],
        s0p=_warp_scaled(s0p, f0),
        s1p=_warp_scaled(s1p, f1),
    )


class DlFmeLevel(Module):
    """One flow/mask estimation level.

    level 0: alpha at 1/8 (shuffled x2 to 1/4), beta = concat(I0, I1);
    level 1: alpha at 1/16 (shuffled x2 to 1/8), beta = concat(I0, I1,
             blended level-0 frame, level-0 mask).
    The head emits 5*u^2 channels at the working scale; pixel shuffle by the
    remaining factor u yields full resolution, and flow channels are scaled
    by u to convert to full-res pixel units.
    """

    def __init__(self, level, value_depth, width, rng):
        if level not in (0, 1):
            raise ValueError(f"level must be 0 or 1, got {level}")
        self.level = level
        self.beta_channels = 2 if level == 0 else 4
        self.up_factor = 4 if level == 0 else 8
        n_down = 2 if level == 0 else 3
        alpha_ch = 4 * value_depth          # M0t, M1t, S0, S1
        shuf_ch = alpha_ch // 4             # after pixel shuffle x2
        bw = 16
        downs = []
        ch = self.beta_channels
        for _ in range(n_down):
            downs.append(Conv2d(ch, bw, 3, rng, stride=2, padding=1))
            ch = bw
        self.beta_downs = ModuleList(downs)
        self.beta_acts = ModuleList([PReLU(bw) for _ in range(n_down)])
        self.merge = Conv2d(shuf_ch + bw, width, 3, rng, padding=1)
        self.merge_act = PReLU(width)
        self.blocks = ModuleList([Conv2d(width, width, 3, rng, padding=1) for _ in range(4)])
        self.block_acts = ModuleList([PReLU(width) for _ in range(4)])
        u = self.up_factor
        self.head = Conv2d(width, 5 * u * u, 3, rng, padding=1, zero_init=True)

    def forward(self, alpha, beta):
        if beta.shape[1] != self.beta_channels:
            raise ShapeError(
                f"dl_fme level {self.level}: beta must have {self.beta_channels} "
                f"channels, got {beta.shape[1]}"
            )
        x = T.pixel_shuffle(alpha, 2)
        b = beta
        for conv, act in zip(self.beta_downs, self.beta_acts):
            b = act(conv(b))
        if b.shape[2:] != x.shape[2:]:
            raise ShapeError(
                f"dl_fme level {self.level}: beta downsampled to {b.shape[2:]} "
                f"but alpha upsampled to {x.shape[2:]}"
            )
        x = self.merge_act(self.merge(T.concat([x, b], axis=1)))
        for conv, act in zip(self.blocks, self.block_acts):
            x = T.add(x, act(conv(x)))
        u = self.up_factor
        out = T.pixel_shuffle(self.head(x), u)
        phi = T.scale(T.crop(out, (slice(None), slice(0, 4))), float(u))
        mu = T.crop(out, (slice(None), slice(4, 5)))
        return FlowMask(phi=phi, mu_logits=mu)


class Refiner(Module):
    """Simplified UNet producing a residual on top of the blended frame.

    Encoder stages concatenate the warped pyramid level of both frames at the
    matching scale; the bottleneck takes the warped 1/16-path structural
    features. With deep_structs=True, the 1/8-scale stage consumes the
    upsampled structural features instead of the deepest pyramid level.
    """

    def __init__(self, base_channels, value_depth, rng, widths=(32, 64, 128, 256),
                 deep_structs=False):
        c = base_channels
        self.deep_structs = deep_structs
        in_ch = 9 + 2 * c                    # O_t (9) + warped L0 of both frames
        w0 = widths[0]
        self.stem = Conv2d(in_ch, w0, 3, rng, padding=1)
        self.stem_act = PReLU(w0)
        skip_ch = [2 * 2 * c, 2 * 4 * c, 2 * 8 * c, 2 * value_depth]
        if deep_structs:
            skip_ch[2] = 2 * value_depth
        downs, fuses, acts_d, acts_f = [], [], [], []
        prev = w0
        for i, wch in enumerate(widths):
            downs.append(Conv2d(prev, wch, 3, rng, stride=2, padding=1))
            acts_d.append(PReLU(wch))
            fuses.append(Conv2d(wch + skip_ch[i], wch, 3, rng, padding=1))
            acts_f.append(PReLU(wch))
            prev = wch
        self.downs = ModuleList(downs)
        self.down_acts = ModuleList(acts_d)
        self.fuses = ModuleList(fuses)
        self.fuse_acts = ModuleList(acts_f)
        ups, acts_u, merges, acts_m = [], [], [], []
        skips = [w0] + list(widths[:-1])
        for i in range(len(widths) - 1, -1, -1):
            out_w = skips[i]
            ups.append(Conv2d(widths[i], 4 * out_w, 3, rng, padding=1))
            acts_u.append(PReLU(4 * out_w))
            merges.append(Conv2d(2 * out_w, out_w, 3, rng, padding=1))
            acts_m.append(PReLU(out_w))
        self.ups = ModuleList(ups)
        self.up_acts = ModuleList(acts_u)
        self.merges = ModuleList(merges)
        self.merge_acts = ModuleList(acts_m)
        self.out_head = Conv2d(w0, 1, 3, rng, padding=1, zero_init=True)

    def forward(self, o_t, warped, blended):
        c_l0 = T.concat([o_t, warped.pyr0[0], warped.pyr1[0]], axis=1)
        x = self.stem_act(self.stem(c_l0))
        skips = [x]
        for i in range(4):
            x = self.down_acts[i](self.downs[i](x))
            if i < 3:
                if i == 2 and self.deep_structs:
                    h, w = x.shape[2], x.shape[3]
                    extra = [
                        T.bilinear_resize(warped.s0p, h, w),
                        T.bilinear_resize(warped.s1p, h, w),
                    ]
                else:
                    extra = [warped.pyr0[i + 1], warped.pyr1[i + 1]]
            else:
                extra = [warped.s0p, warped.s1p]
            for e in extra:
                if e.shape[2:] != x.shape[2:]:
                    raise ShapeError(
                        f"refiner stage {i}: skip feature at {e.shape[2:]} does not "
                        f"match stage resolution {x.shape[2:]}"
                    )
            x = self.fuse_acts[i](self.fuses[i](T.concat([x] + extra, axis=1)))
            if i < 3:
                skips.append(x)
        for j in range(4):
            x = T.pixel_shuffle(self.up_acts[j](self.ups[j](x)), 2)
            skip = skips[3 - j]
            x = self.merge_acts[j](self.merges[j](T.concat([x, skip], axis=1)))
        residual = self.out_head(x)
        return T.clamp(T.add(blended, residual), 0.0, 1.0)
