"""Small layer library on top of the tensor engine.

Modules register parameters under dotted names; those names are the
checkpoint contract, so renaming a module attribute is a format change.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "Module",
    "ModuleList",
    "Conv2d",
    "PReLU",
    "ChannelLayerNorm",
    "layer_norm",
    "kaiming_normal",
]

LN_EPS = 1e-6


def kaiming_normal(rng, shape, fan_in):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(T.default_dtype())


class Module:
    def __setattr__(self, name, value):
        if isinstance(value, (Tensor, Module)):
            self.__dict__.setdefault("_members", {})[name] = value
        object.__setattr__(self, name, value)

    def _members_dict(self):
        return self.__dict__.get("_members", {})

    def named_parameters(self, prefix=""):
        out = {}
        for name, member in self._members_dict().items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(member, Tensor):
                out[full] = member
            else:
                out.update(member.named_parameters(full))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast all parameters in place (used to flip between fp32 and fp64)."""
        for name, member in self._members_dict().items():
            if isinstance(member, Tensor):
                cast = Tensor(member.data.astype(dtype), requires_grad=member.requires_grad)
                setattr(self, name, cast)
            else:
                member.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules):
        self.items = list(modules)
        for i, m in enumerate(self.items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, rng, stride=1, dilation=1, padding=0,
                 groups=1, bias=True, zero_init=False):
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        self.groups = groups
        cg = in_ch // groups
        if cg * groups != in_ch:
            raise ShapeError(f"Conv2d: in_ch {in_ch} not divisible by groups {groups}")
        fan_in = cg * k * k
        if zero_init:
            w = np.zeros((out_ch, cg, k, k), dtype=T.default_dtype())
        else:
            w = kaiming_normal(rng, (out_ch, cg, k, k), fan_in)
        self.weight = Tensor(w, requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_ch, dtype=T.default_dtype()), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        return T.conv2d(
            x, self.weight, self.bias,
            stride=self.stride, dilation=self.dilation,
            padding=self.padding, groups=self.groups,
        )


class PReLU(Module):
    def __init__(self, n_channels=1, init=0.25):
        shape = () if n_channels == 1 else (n_channels,)
        self.slope = Tensor(np.full(shape, init, dtype=T.default_dtype()), requires_grad=True)

    def forward(self, x):
        return T.prelu(x, self.slope)


def _affine_channel(xn, gain, shift, axis):
    """Apply per-channel gain/shift along `axis` by explicit expansion."""
    shape = xn.shape
    g = gain
    s = shift
    for ax in range(len(shape)):
        if ax == axis:
            continue
        g = T.expand(g, ax if ax < axis else ax, shape[ax])
        s = T.expand(s, ax if ax < axis else ax, shape[ax])
    return T.add(T.mul(xn, g), s)


def layer_norm(x, gain, shift, axis, eps=LN_EPS):
    """Normalize to zero mean / unit variance along `axis`, then affine."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"layer_norm: axis {axis} out of range for ndim {x.ndim}")
    axis = axis % x.ndim
    if gain.shape != (x.shape[axis],) or shift.shape != (x.shape[axis],):
        raise ShapeError(
            f"layer_norm: gain/shift must have shape ({x.shape[axis]},), "
            f"got {gain.shape} and {shift.shape}"
        )
    m = T.tmean(x, axis=axis, keepdims=True)
    c = T.sub(x, T.expand(T.reshape(m, _drop_axis(m.shape, axis)), axis, x.shape[axis]))
    v = T.tmean(T.mul(c, c), axis=axis, keepdims=True)
    inv = T.sqrt(T.add_scalar(v, eps))
    inv = T.expand(T.reshape(inv, _drop_axis(inv.shape, axis)), axis, x.shape[axis])
    xn = T.mul(c, _recip(inv))
    return _affine_channel(xn, gain, shift, axis)


def _drop_axis(shape, axis):
    return tuple(s for i, s in enumerate(shape) if i != axis)


def _recip(t):
    # 1/t via exp(-log t) would lose precision; do it directly on data with
    # a recorded backward instead.
    data = 1.0 / t.data

    def bw(g, acc):
        acc(t, -g * data * data)

    return T._make(data, (t,), bw)


class ChannelLayerNorm(Module):
    """LayerNorm across the channel axis (axis 1) of an NCHW tensor."""

    def __init__(self, channels):
        self.gain = Tensor(np.ones(channels, dtype=T.default_dtype()), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=T.default_dtype()), requires_grad=True)

    def forward(self, x):
        return layer_norm(x, self.gain, self.shift, axis=1)
