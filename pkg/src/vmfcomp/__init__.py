"""Compositional vMF-kernel representations for semi-supervised segmentation."""

from .data import default_domains, generate_benchmark, generate_sample, make_split
from .errors import VMFCompError
from .eval import EvalReport, channel_match, dice_score, evaluate, hausdorff
from .losses import cps_loss, dice_loss, reconstruction_loss, weak_loss
from .networks import ArchitectureConfig
from .trainers import TrainConfig, Trainer, build_model, train
from .vmf_core import (VMFKernelBank, clustering_loss, normalize_features, project_kernels,
                       recompose, vmf_activations)

__version__ = "0.1.0"
