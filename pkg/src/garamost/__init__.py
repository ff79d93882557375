"""Direct multi-frame interpolation for angiographic image sequences.

A small, self-contained numpy implementation: a dense tensor engine with
reverse-mode autodiff, a multi-scale feature encoder with cross-scale
fusion, multi-granularity lambda cross-attention for motion and structure,
and a dual-layer flow/mask decoder with a UNet refiner. One encoder pass
serves any number of interpolated time steps.
"""

from .attention import GranularityConfig, LambdaCrossAttention, MgMsfe, position_map
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .encoder import CrossScaleFusion, Encoder, MultiScaleExtractor
from .metrics import aggregate, psnr, ssim
from .model import GaraMoSt, ModelConfig
from .phantom import (InterpSample, Phantom, make_samples, random_samples,
                      synth_sequence)
from .pgm import PgmError, read_pgm, write_pgm
from .tensor import (GraphCycleError, NonFiniteError, ShapeError, Tensor,
                     no_grad, precision)
from .train import (AdamW, bench_model, evaluate_model, load_dataset,
                    load_sequence_dir, lr_schedule, train_model)

__version__ = "0.1.0"

__all__ = [
    "GranularityConfig", "LambdaCrossAttention", "MgMsfe", "position_map",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "load_config",
    "CrossScaleFusion", "Encoder", "MultiScaleExtractor",
    "aggregate", "psnr", "ssim",
    "GaraMoSt", "ModelConfig",
    "InterpSample", "Phantom", "make_samples", "random_samples",
    "synth_sequence",
    "PgmError", "read_pgm", "write_pgm",
    "GraphCycleError", "NonFiniteError", "ShapeError", "Tensor",
    "no_grad", "precision",
    "AdamW", "bench_model", "evaluate_model", "load_dataset",
    "load_sequence_dir", "lr_schedule", "train_model",
    "__version__",
]
