"""Synthetic rotating-vessel phantoms with a continuous time parameter.

The phantom mimics a subtracted angiographic scene: a handful of curved
vessels (cubic-spline centerlines with Gaussian cross sections) filled by an
advancing contrast bolus, the whole vessel tree rotating rigidly about the
image centre, over a smooth static background with a little fixed texture.
Because `render(t)` accepts any real t in [0, 1], ground-truth frames exist
at arbitrary intermediate times, which is what interpolation training needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

__all__ = ["Phantom", "InterpSample", "synth_sequence", "make_samples",
           "random_samples"]


class _Vessel:
    """One spline centerline with width, contrast and bolus timing."""

    def __init__(self, rng, h, w):
        n_ctrl = int(rng.integers(4, 7))
        # Control points wander across the frame; parameterised on [0, 1].
        u = np.linspace(0.0, 1.0, n_ctrl)
        start = rng.uniform(0.1, 0.9, size=2) * (h, w)
        end = rng.uniform(0.1, 0.9, size=2) * (h, w)
        pts = np.linspace(start, end, n_ctrl)
        pts += rng.normal(scale=0.12 * min(h, w), size=pts.shape)
        pts = np.clip(pts, 2.0, (h - 3.0, w - 3.0))
        self.spline = CubicSpline(u, pts, axis=0)
        self.sigma = rng.uniform(0.5, 2.0)          # Gaussian half-width, px
        self.contrast = rng.uniform(0.35, 0.7)
        self.bolus_start = rng.uniform(-0.3, 0.2)   # arc fraction filled at t=0
        self.bolus_speed = rng.uniform(0.8, 1.6)    # arc fractions per unit t
        self.bolus_edge = rng.uniform(0.05, 0.15)   # softness of the front

        # Dense arc-length samples, spacing ~0.5 px, reused for every render.
        coarse = self.spline(np.linspace(0.0, 1.0, 256))
        seg = np.linalg.norm(np.diff(coarse, axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        total = max(arc[-1], 1.0)
        n_samp = max(int(total / 0.5), 32)
        # Invert arc length so samples are uniform along the curve.
        u_of_s = np.interp(np.linspace(0.0, total, n_samp), arc,
                           np.linspace(0.0, 1.0, 256))
        self.points = self.spline(u_of_s)           # (n_samp, 2) as (y, x)
        self.arc_frac = np.linspace(0.0, 1.0, n_samp)
        self.step = total / (n_samp - 1)

    def splat(self, canvas, t, rot):
        """Add this vessel's contrast at time t onto `canvas` (subtractive)."""
        h, w = canvas.shape
        front = self.bolus_start + self.bolus_speed * t
        amp = self.contrast / (
            1.0 + np.exp((self.arc_frac - front) / self.bolus_edge)
        )
        pts = self.points @ rot.T
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        pts = pts + np.array([cy, cx]) - np.array([cy, cx]) @ rot.T

        half = max(int(np.ceil(3.0 * self.sigma)), 2)
        # Normalise so the tube amplitude is width-independent: each splat is
        # a 2-D Gaussian; the line integral along the curve has mass
        # step / (sigma * sqrt(2 pi)) per unit cross-section Gaussian.
        norm = self.step / (self.sigma * np.sqrt(2.0 * np.pi))
        inv2s2 = 1.0 / (2.0 * self.sigma * self.sigma)
        ys = pts[:, 0]
        xs = pts[:, 1]
        for py, px, a in zip(ys, xs, amp):
            if a < 1e-3:
                continue
            iy0 = int(np.floor(py)) - half
            ix0 = int(np.floor(px)) - half
            iy1 = iy0 + 2 * half + 1
            ix1 = ix0 + 2 * half + 1
            if iy1 <= 0 or ix1 <= 0 or iy0 >= h or ix0 >= w:
                continue
            ya, yb = max(iy0, 0), min(iy1, h)
            xa, xb = max(ix0, 0), min(ix1, w)
            gy = np.arange(ya, yb) - py
            gx = np.arange(xa, xb) - px
            g = np.exp(-(gy[:, None] ** 2 + gx[None, :] ** 2) * inv2s2)
            canvas[ya:yb, xa:xb] += a * norm * g


class Phantom:
    """A renderable scene; `render(t)` gives the frame at any t in [0, 1]."""

    def __init__(self, height=128, width=128, n_vessels=4, rotation_deg=15.0,
                 noise=0.01, seed=0, bolus_speed=None):
        if int(n_vessels) < 1:
            raise ValueError(f"n_vessels must be >= 1, got {n_vessels}")
        rng = np.random.default_rng(seed)
        self.height = int(height)
        self.width = int(width)
        self.rotation = np.deg2rad(float(rotation_deg))
        self.vessels = [_Vessel(rng, self.height, self.width)
                        for _ in range(int(n_vessels))]
        if bolus_speed is not None:
            for v in self.vessels:
                v.bolus_speed = float(bolus_speed)

        yy = np.linspace(-1.0, 1.0, self.height)[:, None]
        xx = np.linspace(-1.0, 1.0, self.width)[None, :]
        a, b, c = rng.uniform(-0.08, 0.08, size=3)
        self.background = 0.82 + a * yy + b * xx + c * yy * xx
        texture = rng.normal(scale=1.0, size=(self.height, self.width))
        self.background += noise * gaussian_filter(texture, sigma=2.0)
        self.background = self.background.astype(np.float64)

    def render(self, t):
        """Frame at time t (any real in [0, 1]) as float32 H x W in [0, 1]."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"render time t={t} outside [0, 1]")
        angle = self.rotation * t
        rot = np.array([[np.cos(angle), -np.sin(angle)],
                        [np.sin(angle), np.cos(angle)]])
        tube = np.zeros((self.height, self.width), dtype=np.float64)
        for v in self.vessels:
            v.splat(tube, t, rot)
        frame = self.background - tube
        return np.clip(frame, 0.0, 1.0).astype(np.float32)


def synth_sequence(n_frames, height=128, width=128, seed=0, **kwargs):
    """Render an equally spaced sequence; deterministic in `seed`."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    ph = Phantom(height=height, width=width, seed=seed, **kwargs)
    ts = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.array([0.0])
    return np.stack([ph.render(t) for t in ts]), ts


@dataclass
class InterpSample:
    """One interpolation task: endpoints plus ground-truth interior frames."""

    i0: np.ndarray                      # (H, W)
    i1: np.ndarray                      # (H, W)
    t_list: list = field(default_factory=list)
    targets: np.ndarray = None          # (n_interp, H, W)


def make_samples(frames, n_interp):
    """Sliding-window samples from a frame stack.

    Endpoints sit `n_interp + 1` frames apart; the interior frames become
    targets at the canonical times t = k / (n_interp + 1). A stack of F
    frames yields F - n_interp - 1 samples.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError(f"frames must be (F, H, W), got shape {frames.shape}")
    if n_interp < 1:
        raise ValueError(f"n_interp must be >= 1, got {n_interp}")
    stride = n_interp + 1
    if len(frames) < stride + 1:
        raise ValueError(
            f"need at least {stride + 1} frames for n_interp={n_interp}, "
            f"got {len(frames)}")
    t_list = [k / stride for k in range(1, stride)]
    return [InterpSample(frames[s], frames[s + stride], t_list,
                         frames[s + 1:s + stride])
            for s in range(len(frames) - stride)]


def random_samples(n_samples, n_interp, height=128, width=128, seed=0,
                   span=0.35, **kwargs):
    """Training/eval samples: endpoint pair plus n_interp interior targets.

    Each sample comes from a fresh random phantom. The endpoints sit a random
    `span`-long window apart in phantom time and the targets at the canonical
    interior steps t_k = k / (n_interp + 1). Returns
    (i0, i1, targets, t_list): i0/i1 are (B, 1, H, W) float32, targets is
    (n_interp, B, 1, H, W).
    """
    if n_samples < 1 or n_interp < 1:
        raise ValueError("n_samples and n_interp must be >= 1")
    rng = np.random.default_rng(seed)
    t_list = [k / (n_interp + 1) for k in range(1, n_interp + 1)]
    i0 = np.empty((n_samples, 1, height, width), dtype=np.float32)
    i1 = np.empty_like(i0)
    targets = np.empty((n_interp,) + i0.shape, dtype=np.float32)
    for b in range(n_samples):
        ph = Phantom(height=height, width=width,
                     seed=int(rng.integers(0, 2**63 - 1)), **kwargs)
        a = rng.uniform(0.0, 1.0 - span)
        i0[b, 0] = ph.render(a)
        i1[b, 0] = ph.render(a + span)
        for k, tk in enumerate(t_list):
            targets[k, b, 0] = ph.render(a + span * tk)
    return i0, i1, targets, t_list
