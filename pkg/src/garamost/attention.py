"""Multi-granularity motion/structure extraction via lambda-style linear attention.

Queries come from one frame's fused features and keys/values from the other
(relative attention). A global softmax-normalized key summary gives the
content term; a local r x r embedding kernel over the values gives the
position term. No n x n attention map is ever materialized: interaction
state is |k| x |v| per batch element plus per-position local aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ChannelLayerNorm, Conv2d, Module, PReLU, kaiming_normal
from .tensor import ShapeError, Tensor

__all__ = [
    "GranularityConfig",
    "MotionStructSet",
    "position_map",
    "LambdaCrossAttention",
    "StructureHead",
    "MgMsfe",
]


@dataclass(frozen=True)
class GranularityConfig:
    """Local context scope per fusion path; both must be odd and >= 3."""

    r_path_a: int = 7
    r_path_b: int = 7

    SUPPORTED = (7, 15, 21, 29)

    def __post_init__(self):
        for r in (self.r_path_a, self.r_path_b):
            if r < 3 or r % 2 == 0:
                raise ValueError(f"granularity must be an odd int >= 3, got {r}")


@dataclass
class MotionStructSet:
    """Structure (S) and motion (M) features for both frames at both scales."""

    s0: Tensor
    s1: Tensor
    m0: Tensor
    m1: Tensor
    s0p: Tensor
    s1p: Tensor
    m0p: Tensor
    m1p: Tensor


def position_map(h, w, k, dtype=None):
    """Parameter-free coordinate ramps: even channels sweep rows from -1 (top)
    to +1 (bottom), odd channels sweep columns left to right. Shape (1,k,h,w)."""
    if h < 1 or w < 1:
        raise ShapeError("position_map: h and w must be >= 1")
    if k % 2:
        raise ShapeError(f"position_map: channel depth must be even, got {k}")
    if dtype is None:
        dtype = T.default_dtype()
    row = np.linspace(-1.0, 1.0, h, dtype=dtype) if h > 1 else np.zeros(1, dtype=dtype)
    col = np.linspace(-1.0, 1.0, w, dtype=dtype) if w > 1 else np.zeros(1, dtype=dtype)
    out = np.empty((1, k, h, w), dtype=dtype)
    out[:, 0::2] = row[:, None]
    out[:, 1::2] = col[None, :]
    return Tensor(out)


class LambdaCrossAttention(Module):
    """One direction-shared lambda attention head for a single fusion path."""

    def __init__(self, model_dim, key_depth, value_depth, r, rng):
        if r < 1 or r % 2 == 0:
            raise ValueError(f"scope r must be odd and >= 1, got {r}")
        self.r = r
        self.key_depth = key_depth
        self.value_depth = value_depth
        d = model_dim
        self.w_q = Tensor(kaiming_normal(rng, (d, key_depth), d), requires_grad=True)
        self.w_k = Tensor(kaiming_normal(rng, (d, key_depth), d), requires_grad=True)
        self.w_v = Tensor(kaiming_normal(rng, (d, value_depth), d), requires_grad=True)
        # Local position-embedding kernel: key_depth values per r x r offset.
        e = kaiming_normal(rng, (key_depth, 1, r, r), r * r)
        self.embed = Tensor(e, requires_grad=True)

    def forward(self, src, tgt):
        """src supplies queries, tgt supplies keys/values. Returns (S_att, M),
        both N x value_depth x h x w."""
        if src.shape != tgt.shape:
            raise ShapeError(f"lambda attention: src {src.shape} != tgt {tgt.shape}")
        n_batch, d, h, w = src.shape
        r, kd, vd = self.r, self.key_depth, self.value_depth
        if r > 2 * max(h, w) - 1:
            raise ShapeError(
                f"granularity r={r} exceeds 2*max(h,w)-1={2 * max(h, w) - 1} "
                f"for a {h}x{w} map"
            )
        n = h * w

        def flatten(x):
            return T.reshape(T.transpose(x, (0, 2, 3, 1)), (n_batch, n, d))

        xs = flatten(src)
        xt = flatten(tgt)
        q = T.matmul(xs, self.w_q)                      # (N, n, k)
        k = T.matmul(xt, self.w_k)                      # (N, n, k)
        v = T.matmul(xt, self.w_v)                      # (N, n, v)
        k_bar = T.softmax(k, axis=1)
        lam_c = T.matmul(T.transpose(k_bar, (0, 2, 1)), v)  # (N, k, v)

        # Position lambdas: grouped conv of V's spatial layout with the shared
        # r x r kernel, one key_depth stack per value channel.
        v_map = T.transpose(T.reshape(v, (n_batch, h, w, vd)), (0, 3, 1, 2))
        kernel = T.concat([self.embed] * vd, axis=0)     # (v*k, 1, r, r)
        local = T.conv2d(v_map, kernel, padding=r // 2, groups=vd)
        lam_p = T.reshape(
            T.transpose(T.reshape(local, (n_batch, vd, kd, h, w)), (0, 3, 4, 2, 1)),
            (n_batch, n, kd, vd),
        )                                                # (N, n, k, v)

        pos = position_map(h, w, kd, dtype=src.dtype)
        p_flat = Tensor(
            np.broadcast_to(
                pos.data.reshape(1, kd, n).transpose(0, 2, 1), (n_batch, n, kd)
            ).copy()
        )

        def apply_lambdas(queries):
            content = T.matmul(queries, lam_c)           # (N, n, v)
            local_term = T.tsum(T.mul(T.expand(queries, 3, vd), lam_p), axis=2)
            return T.add(content, local_term)

        def to_map(x):
            return T.transpose(T.reshape(x, (n_batch, h, w, vd)), (0, 3, 1, 2))

        return to_map(apply_lambdas(q)), to_map(apply_lambdas(p_flat))


class StructureHead(Module):
    """Residual + pre-norm MLP head producing the final structural features."""

    def __init__(self, model_dim, value_depth, rng):
        if model_dim != value_depth:
            self.proj = Conv2d(model_dim, value_depth, 1, rng)
        else:
            self.proj = None
        self.norm = ChannelLayerNorm(value_depth)
        self.fc1 = Conv2d(value_depth, 2 * value_depth, 1, rng)
        self.act = PReLU(2 * value_depth)
        self.fc2 = Conv2d(2 * value_depth, value_depth, 1, rng)

    def forward(self, src_fused, s_att):
        base = self.proj(src_fused) if self.proj is not None else src_fused
        if base.shape != s_att.shape:
            raise ShapeError(
                f"structure_head: fused {base.shape} vs attention {s_att.shape}"
            )
        x = T.add(base, s_att)
        return T.add(x, self.fc2(self.act(self.fc1(self.norm(x)))))


class _Path(Module):
    def __init__(self, model_dim, key_depth, value_depth, r, rng, share_directions=True):
        self.attn = LambdaCrossAttention(model_dim, key_depth, value_depth, r, rng)
        self.attn_rev = (
            None if share_directions
            else LambdaCrossAttention(model_dim, key_depth, value_depth, r, rng)
        )
        self.head = StructureHead(model_dim, value_depth, rng)

    def forward(self, f0, f1):
        s_att0, m0 = self.attn(f0, f1)
        rev = self.attn if self.attn_rev is None else self.attn_rev
        s_att1, m1 = rev(f1, f0)
        return self.head(f0, s_att0), self.head(f1, s_att1), m0, m1


class MgMsfe(Module):
    def __init__(self, model_dim, key_depth, value_depth, granularity, rng,
                 share_directions=True):
        self.granularity = granularity
        self.pathA = _Path(model_dim, key_depth, value_depth, granularity.r_path_a,
                           rng, share_directions)
        self.pathB = _Path(model_dim, key_depth, value_depth, granularity.r_path_b,
                           rng, share_directions)

    def forward(self, fused):
        s0, s1, m0, m1 = self.pathA(fused.i00, fused.i10)
        s0p, s1p, m0p, m1p = self.pathB(fused.i01, fused.i11)
        return MotionStructSet(s0=s0, s1=s1, m0=m0, m1=m1,
                               s0p=s0p, s1p=s1p, m0p=m0p, m1p=m1p)
