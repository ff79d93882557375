"""Feature encoder: four-level pyramid extraction and cross-scale fusion.

Both input frames go through the same weights. Fusion runs two parallel
paths: path A merges pyramid levels 0-2 down to 1/8 scale, path B merges
levels 1-3 down to 1/16. Each member level is mapped to the target scale by
a bank of dilated 3x3 convolutions (the n-th with dilation = padding = n),
concatenated and projected to the model dim by a 1x1 conv.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .nn import ChannelLayerNorm, Conv2d, Module, ModuleList, PReLU
from .tensor import ShapeError, Tensor

__all__ = ["PyramidFeatures", "FusedPair", "MultiScaleExtractor", "CrossScaleFusion", "Encoder"]


@dataclass
class PyramidFeatures:
    """Per-frame feature maps at scales 1/1, 1/2, 1/4, 1/8."""

    l0: Tensor
    l1: Tensor
    l2: Tensor
    l3: Tensor

    def levels(self):
        return [self.l0, self.l1, self.l2, self.l3]


@dataclass
class FusedPair:
    """Cross-scale fusion features: path A at 1/8, path B at 1/16, both frames."""

    i00: Tensor
    i10: Tensor
    i01: Tensor
    i11: Tensor


class MultiScaleExtractor(Module):
    """Stride-1 stem then three stride-2 stages, channels doubling per level."""

    def __init__(self, base_channels, rng):
        c = base_channels
        self.stem = Conv2d(1, c, 3, rng, padding=1)
        self.stem_act = PReLU(c)
        downs = []
        for i in range(3):
            downs.append(Conv2d(c << i, c << (i + 1), 3, rng, stride=2, padding=1))
        self.downs = ModuleList(downs)
        self.down_acts = ModuleList([PReLU(c << (i + 1)) for i in range(3)])

    def forward(self, frame):
        if frame.ndim != 4 or frame.shape[1] != 1:
            raise ShapeError(f"extract_pyramid: expected N x 1 x H x W, got {frame.shape}")
        h, w = frame.shape[2], frame.shape[3]
        if h % 16 or w % 16:
            raise ShapeError(
                f"extract_pyramid: spatial dims {h}x{w} must be divisible by 16; "
                "pad the input (reflect) before encoding"
            )
        levels = [self.stem_act(self.stem(frame))]
        for conv, act in zip(self.downs, self.down_acts):
            levels.append(act(conv(levels[-1])))
        return PyramidFeatures(*levels)


class _FusionPath(Module):
    """Dilated-conv bank fusing three pyramid levels to one target scale."""

    # Downsample factors for the three members, finest first.
    FACTORS = (8, 4, 2)

    def __init__(self, member_channels, model_dim, rng):
        convs = []
        concat_ch = 0
        for ch, f in zip(member_channels, self.FACTORS):
            bank = []
            for n in range(1, f // 2 + 1):
                bank.append(
                    Conv2d(ch, ch, 3, rng, stride=f, dilation=n, padding=n, bias=False)
                )
                concat_ch += ch
            convs.append(ModuleList(bank))
        self.banks = ModuleList(convs)
        self.proj = Conv2d(concat_ch, model_dim, 1, rng, bias=True)
        self.concat_channels = concat_ch

    def forward(self, members):
        if len(members) != 3:
            raise ShapeError("fuse_path: expected exactly three member levels")
        h_ref, w_ref = members[0].shape[2], members[0].shape[3]
        for m, f in zip(members, self.FACTORS):
            if m.shape[2] * 8 != h_ref * f or m.shape[3] * 8 != w_ref * f:
                raise ShapeError(
                    f"fuse_path: member at {m.shape[2]}x{m.shape[3]} inconsistent with "
                    f"expected downsample factor {f}"
                )
        pieces = []
        for m, bank in zip(members, self.banks):
            for conv in bank:
                pieces.append(conv(m))
        return self.proj(T.concat(pieces, axis=1))


class CrossScaleFusion(Module):
    """Both fusion paths plus the channel layer-norm feeding the attention."""

    def __init__(self, base_channels, model_dim, rng):
        c = base_channels
        self.path_a = _FusionPath((c, 2 * c, 4 * c), model_dim, rng)
        self.path_b = _FusionPath((2 * c, 4 * c, 8 * c), model_dim, rng)
        self.norm_a = ChannelLayerNorm(model_dim)
        self.norm_b = ChannelLayerNorm(model_dim)

    def forward(self, pyr):
        fa = self.norm_a(self.path_a([pyr.l0, pyr.l1, pyr.l2]))
        fb = self.norm_b(self.path_b([pyr.l1, pyr.l2, pyr.l3]))
        return fa, fb


class Encoder(Module):
    def __init__(self, base_channels, model_dim, rng):
        self.msfe = MultiScaleExtractor(base_channels, rng)
        self.csfcf = CrossScaleFusion(base_channels, model_dim, rng)

    def encode_pair(self, frame0, frame1):
        if frame0.shape != frame1.shape:
            raise ShapeError(
                f"encode_pair: frame shapes differ: {frame0.shape} vs {frame1.shape}"
            )
        pyr0 = self.msfe(frame0)
        pyr1 = self.msfe(frame1)
        i00, i01 = self.csfcf(pyr0)
        i10, i11 = self.csfcf(pyr1)
        return pyr0, pyr1, FusedPair(i00=i00, i10=i10, i01=i01, i11=i11)

    forward = encode_pair
