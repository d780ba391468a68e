"""Trainable encoder-decoder segmentation engine for annular structures.

Pure numpy implementation: hand-written layer forward/backward passes,
soft-Jaccard training objective, Adam, on-the-fly geometric augmentation,
a synthetic phantom dataset generator, bit-exact file formats, and a CLI.
"""

from .augment import AugmentConfig, TransformSpec, apply_transform, \
    augment_pair, bspline_sample, sample_transform
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataio import Case, load_cases, read_manifest, read_volume, \
    write_overlay, write_pgm, write_volume
from .model import Network, NetworkConfig, backward, build_unet, forward, \
    parameter_count, predict_mask
from .objective import LossValue, dice_coefficient, dice_loss, jaccard_loss, \
    mae, mse
from .optim import AdamState, TrainPlan, adam_step, evaluate, init_adam, \
    split_cases, train_epoch
from .phantom import PhantomConfig, generate_dataset, generate_phantom
from .tensor import RngStream, create, derive_stream

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AugmentConfig", "Case", "Checkpoint", "LossValue",
    "Network", "NetworkConfig", "PhantomConfig", "RngStream",
    "TrainPlan", "TransformSpec", "adam_step", "apply_transform",
    "augment_pair", "backward", "bspline_sample", "build_unet", "create",
    "derive_stream", "dice_coefficient", "dice_loss", "evaluate", "forward",
    "generate_dataset", "generate_phantom", "init_adam", "jaccard_loss",
    "load_cases", "load_checkpoint", "mae", "mse", "parameter_count",
    "predict_mask", "read_manifest", "read_volume", "sample_transform",
    "save_checkpoint", "split_cases", "train_epoch", "write_overlay",
    "write_pgm", "write_volume",
]
