"""Semi-supervised multi-organ segmentation with balanced subclass regularization.

A small numpy implementation: a tape-based autodiff engine, a dual-decoder
U-Net trained as a mean teacher, balanced subclass partitioning, the
consistency and conflict losses, a synthetic imbalanced dataset, and Dice
evaluation.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, grad_check  # noqa: E402
from .data import Dataset, SynthSpec, generate, read_container, write_container  # noqa: E402
from .evaluation import ablation_harness, dice_coefficient, evaluate  # noqa: E402
from .losses import LossWeights  # noqa: E402
from .partition import SubclassTable, balanced_kmeans, build_partition, pretrain_backbone  # noqa: E402
from .segnet import ModelState, NetConfig, build, inference, load_checkpoint, save_checkpoint  # noqa: E402
from .trainer import TrainConfig, fit  # noqa: E402

__all__ = [
    "Dataset",
    "LossWeights",
    "ModelState",
    "NetConfig",
    "SubclassTable",
    "SynthSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "ablation_harness",
    "backward",
    "balanced_kmeans",
    "build",
    "build_partition",
    "dice_coefficient",
    "evaluate",
    "fit",
    "generate",
    "grad_check",
    "inference",
    "load_checkpoint",
    "pretrain_backbone",
    "read_container",
    "save_checkpoint",
    "write_container",
]
