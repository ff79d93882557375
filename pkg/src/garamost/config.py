"""Training configuration and the flat key=value config-file format.

Files are plain text, one `key = value` per line, `#` starts a comment.
Unknown keys are an error (catches typos early). Defaults follow the
published recipe: AdamW with betas 0.9/0.999, weight decay 6e-5, learning
rate warmed up linearly to 6e-5 over 1000 steps then cosine-decayed to 6e-6;
batch size 10/6/4 for 1/2/3 interpolated frames.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

__all__ = ["TrainConfig", "parse_config_text", "load_config",
           "default_batch_size", "default_granularity"]

_BATCH_BY_N = {1: 10, 2: 6, 3: 4}
_GRAN_BY_N = {1: (7, 7), 2: (7, 29), 3: (7, 29)}


def default_batch_size(n_interp):
    return _BATCH_BY_N.get(n_interp, 4)


def default_granularity(n_interp):
    return _GRAN_BY_N.get(n_interp, (7, 29))


@dataclass
class TrainConfig:
    n_interp: int = 1
    epochs: int = 100
    steps_per_epoch: int = 20
    steps: int = 0                 # 0 -> epochs * steps_per_epoch
    batch_size: int = 0            # 0 -> pick by n_interp (10/6/4)
    warmup_steps: int = 1000
    lr_peak: float = 6e-5
    lr_final: float = 6e-6
    weight_decay: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 1.0
    height: int = 128
    width: int = 128
    granularity_a: int = 0         # 0 -> pick by n_interp
    granularity_b: int = 0
    deep_structs: bool = False
    seed: int = 0
    eval_every: int = 200
    eval_samples: int = 8
    log_every: int = 20
    data: str = ""                 # sequence dir(s) of frame_0000.pgm ...;
                                   # empty -> synthetic phantoms on the fly
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.n_interp < 1:
            raise ValueError(f"n_interp must be >= 1, got {self.n_interp}")
        if self.batch_size == 0:
            self.batch_size = default_batch_size(self.n_interp)
        ga, gb = default_granularity(self.n_interp)
        if self.granularity_a == 0:
            self.granularity_a = ga
        if self.granularity_b == 0:
            self.granularity_b = gb
        if self.steps == 0:
            if self.epochs < 1 or self.steps_per_epoch < 1:
                raise ValueError("epochs and steps_per_epoch must be >= 1")
            self.steps = self.epochs * self.steps_per_epoch
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 <= self.warmup_steps:
            raise ValueError("warmup_steps must be >= 0")


def parse_config_text(text):
    """Flat key=value lines -> dict of raw string values."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if not key or not val:
            raise ValueError(f"line {lineno}: empty key or value in {raw!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    return values


def _coerce(field, raw):
    if field.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{field.name}: cannot parse {raw!r} as bool")
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw


def load_config(path=None, text=None, overrides=None):
    """Build a TrainConfig from a file and/or `key=value` override strings."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    if path is not None:
        with open(path) as f:
            text = f.read()
    if text is not None:
        values.update(parse_config_text(text))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, val = item.partition("=")
        values[key.strip()] = val.strip()
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise KeyError(f"unknown config keys: {unknown}; "
                       f"valid keys: {sorted(fields)}")
    kwargs = {k: _coerce(fields[k], v) for k, v in values.items()}
    return TrainConfig(**kwargs)
