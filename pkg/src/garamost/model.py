"""The full interpolation model: encoder runs once, any number of time steps
decode from the shared features (direct multi-frame interpolation)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import GranularityConfig, MgMsfe
from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import DlFmeLevel, Refiner, blend, combine_levels, time_map, warp_all
from .encoder import CrossScaleFusion, FusedPair, MultiScaleExtractor
from .nn import Module
from .tensor import ShapeError, Tensor

__all__ = ["ModelConfig", "GaraMoSt"]


@dataclass
class ModelConfig:
    base_channels: int = 16
    model_dim: int = 64
    key_depth: int = 16
    value_depth: int = 64
    granularity: GranularityConfig = field(default_factory=GranularityConfig)
    share_directions: bool = True
    fme_width: int = 64
    refiner_widths: tuple = (16, 32, 64, 128)
    deep_structs: bool = False
    seed: int = 0


class _FmePair(Module):
    def __init__(self, value_depth, width, rng):
        self.level0 = DlFmeLevel(0, value_depth, width, rng)
        self.level1 = DlFmeLevel(1, value_depth, width, rng)


class GaraMoSt(Module):
    def __init__(self, config=None):
        cfg = config or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.msfe = MultiScaleExtractor(cfg.base_channels, rng)
        self.csfcf = CrossScaleFusion(cfg.base_channels, cfg.model_dim, rng)
        self.mgmsfe = MgMsfe(cfg.model_dim, cfg.key_depth, cfg.value_depth,
                             cfg.granularity, rng, cfg.share_directions)
        self.fme = _FmePair(cfg.value_depth, cfg.fme_width, rng)
        self.refiner = Refiner(cfg.base_channels, cfg.value_depth, rng,
                               widths=cfg.refiner_widths,
                               deep_structs=cfg.deep_structs)
        self.reset_stats()

    def reset_stats(self):
        self.stats = {"encoder_calls": 0, "time_encoder": 0.0,
                      "time_attention": 0.0, "time_decode": []}

    # -- persistence --------------------------------------------------------

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(
                f"parameter name mismatch: missing {missing}, unexpected {unexpected}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def save(self, path):
        save_checkpoint(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(load_checkpoint(path))

    # -- forward ------------------------------------------------------------

    def encode(self, i0, i1):
        """One shared feature-extraction pass for a frame pair."""
        t0 = time.perf_counter()
        if i0.shape != i1.shape:
            raise ShapeError(f"frame shapes differ: {i0.shape} vs {i1.shape}")
        pyr0 = self.msfe(i0)
        pyr1 = self.msfe(i1)
        i00, i01 = self.csfcf(pyr0)
        i10, i11 = self.csfcf(pyr1)
        fused = FusedPair(i00=i00, i10=i10, i01=i01, i11=i11)
        t1 = time.perf_counter()
        mset = self.mgmsfe(fused)
        t2 = time.perf_counter()
        self.stats["encoder_calls"] += 1
        self.stats["time_encoder"] += t1 - t0
        self.stats["time_attention"] += t2 - t1
        return pyr0, pyr1, mset

    def decode(self, i0, i1, pyr0, pyr1, mset, t):
        """Produce the frame at time t from the shared encoder features."""
        t_start = time.perf_counter()
        m0t, m1t = time_map(mset.m0, mset.m1, t)
        alpha0 = T.concat([m0t, m1t, mset.s0, mset.s1], axis=1)
        fm0 = self.fme.level0(alpha0, T.concat([i0, i1], axis=1))
        blended0 = blend(i0, i1, fm0)
        mu0 = T.sigmoid(fm0.mu_logits)
        m0tp, m1tp = time_map(mset.m0p, mset.m1p, t)
        alpha1 = T.concat([m0tp, m1tp, mset.s0p, mset.s1p], axis=1)
        fm1 = self.fme.level1(alpha1, T.concat([i0, i1, blended0, mu0], axis=1))
        fm = combine_levels(fm0, fm1)
        warped = warp_all(i0, i1, pyr0, pyr1, mset.s0p, mset.s1p, fm)
        blended = blend(i0, i1, fm, warped=(warped.warped_i0, warped.warped_i1))
        o_t = T.concat([i0, i1, warped.warped_i0, warped.warped_i1,
                        fm.phi, fm.mu_logits], axis=1)
        out = self.refiner(o_t, warped, blended)
        self.stats["time_decode"].append(time.perf_counter() - t_start)
        return out

    def interpolate(self, i0, i1, t_list):
        """Interpolate frames at every t in t_list from one encoder pass.

        Accepts Tensors or numpy arrays of shape N x 1 x H x W (or H x W).
        Arbitrary sizes are reflect-padded to multiples of 16 and cropped back.
        """
        if not t_list:
            raise ValueError("t_list must be non-empty")
        for t in t_list:
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"time step t={t} outside [0, 1]")
        i0 = _as_frame(i0)
        i1 = _as_frame(i1)
        h, w = i0.shape[2], i0.shape[3]
        pad_h = (-h) % 16
        pad_w = (-w) % 16
        if pad_h or pad_w:
            i0 = T.pad_reflect2d(i0, (0, pad_h, 0, pad_w))
            i1 = T.pad_reflect2d(i1, (0, pad_h, 0, pad_w))
        pyr0, pyr1, mset = self.encode(i0, i1)
        outs = []
        for t in t_list:
            frame = self.decode(i0, i1, pyr0, pyr1, mset, float(t))
            if pad_h or pad_w:
                frame = T.crop(frame, (slice(None), slice(None), slice(0, h), slice(0, w)))
            outs.append(frame)
        return outs


def _as_frame(x):
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(np.asarray(x))
    if t.ndim == 2:
        t = T.reshape(t, (1, 1) + t.shape)
    if t.ndim != 4 or t.shape[1] != 1:
        raise ShapeError(f"frames must be N x 1 x H x W, got {t.shape}")
    return t
