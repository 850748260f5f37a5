"""Token, width and depth adaptive Perceiver on a small numpy autodiff engine."""

from .attention import BlockMask, RopeParams, attend, block_masked_attention, create_block_mask, cross_attention, rope_rotate
from .costmodel import FlopsReport, flops_forward
from .data import ingest_dataset
from . import errors
from .matryoshka import hidden_kept, mat_ffn, mat_linear, slice_for_inference
from .model import AdaPerceiver, ConfigTuple, ModelConfig, load_checkpoint, save_checkpoint
from .policy import early_exit_infer, oracle_build, policy_net_forward, reinforce_update, run_policy
from .tensor import Tape, Tensor, backward, finite_diff_check, precision
from .training import TrainConfig, depth_loss, sample_widths, token_loss, train, train_step

__version__ = "0.1.0"

__all__ = [
    "AdaPerceiver", "BlockMask", "ConfigTuple", "FlopsReport", "ModelConfig", "RopeParams", "Tape", "Tensor",
    "TrainConfig", "attend", "backward", "block_masked_attention", "create_block_mask", "cross_attention",
    "depth_loss", "early_exit_infer", "errors", "finite_diff_check", "flops_forward", "hidden_kept",
    "ingest_dataset", "load_checkpoint", "mat_ffn", "mat_linear", "oracle_build", "policy_net_forward",
    "precision", "reinforce_update", "rope_rotate", "run_policy", "sample_widths", "save_checkpoint",
    "slice_for_inference", "token_loss", "train", "train_step",
]
