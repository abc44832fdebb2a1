"""ConTNet: convolution blocks interleaved with patch-wise transformer encoders, on a numpy autograd core."""

from .analysis import (CostReport, count_flops, count_params, stage_shapes, ste_flops_formula,
                       ste_param_formula, summarize)
from .autograd import ShapeError, Tensor, backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_dataset, read_dataset, synth_dataset, write_dataset
from .gradcheck import grad_check
from .model import (ConTNet, ModelConfig, StageSpec, build_network, make_ablation_config, tiny_config,
                    variant_config)
from .patching import PatchGrid, PositionalEncoding, apply_ste_patchwise, merge_patches, split_patches
from .train import TrainConfig, cosine_lr, evaluate, label_smoothing_ce, train
from .transformer import STE

__version__ = "0.1.0"
