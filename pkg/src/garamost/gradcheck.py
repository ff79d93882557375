"""Finite-difference gradient checking for the tensor engine."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor, backward

__all__ = ["grad_check"]


def grad_check(fn, inputs, eps=1e-5, max_coords_per_input=None, rng=None,
               floor=1e-12):
    """Compare analytic gradients of a scalar-valued fn against central differences.

    Returns the max over sampled coordinates of
    |analytic - numeric| / (|analytic| + |numeric| + floor).

    `floor` acts like an absolute tolerance: gradients much smaller than it
    are compared absolutely rather than relatively, which keeps plain
    floating-point noise on near-zero gradients from dominating the result.

    Inputs should be float64 tensors with requires_grad=True (build the model
    under ``precision("float64")``). With max_coords_per_input set, a random
    subset of coordinates per input is checked, which is how the full-module
    checks stay fast.
    """
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError("grad_check inputs must be Tensors")
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.zero_grad()

    loss = fn(*inputs)
    if loss.size != 1:
        raise ValueError("grad_check: fn must be scalar-valued")
    backward(loss)
    analytic = [
        np.zeros_like(t.data) if t.grad is None else np.array(t.grad, copy=True)
        for t in inputs
    ]

    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        n = t.size
        if max_coords_per_input is not None and n > max_coords_per_input:
            coords = rng.choice(n, size=max_coords_per_input, replace=False)
        else:
            coords = np.arange(n)
        flat = t.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            lp = float(fn(*inputs).data)
            flat[c] = orig - eps
            lm = float(fn(*inputs).data)
            flat[c] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError("non-finite intermediate during grad_check")
            numeric = (lp - lm) / (2.0 * eps)
            a = float(ga.reshape(-1)[c])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + floor)
            worst = max(worst, err)
    return worst
