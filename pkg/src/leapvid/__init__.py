"""Action-conditioned stochastic video prediction on a synthetic camera world."""
from .autodiff import Value, backward, grad_check, no_grad, set_precision
from .causal import CausalLeap
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import MetricReport, action_l2, evaluate_model, feature_cosine, psnr
from .rafi import FrameAutoencoder, Rafi
from .vgleap import VGLeap
from .world import SequenceDataset, WorldConfig, generate_dataset, read_dataset, split_dataset, write_dataset

__all__ = [
    "Value", "backward", "grad_check", "no_grad", "set_precision",
    "VGLeap", "CausalLeap", "Rafi", "FrameAutoencoder",
    "MetricReport", "psnr", "feature_cosine", "action_l2", "evaluate_model",
    "WorldConfig", "SequenceDataset", "generate_dataset", "read_dataset", "write_dataset", "split_dataset",
    "save_checkpoint", "load_checkpoint",
]
