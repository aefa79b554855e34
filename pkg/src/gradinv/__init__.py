"""Gradient inversion attacks and defenses at desk scale, on a small numpy autodiff engine."""
from .attack import AttackConfig, ReconstructionReport, decode_encodings, invert, objective_at
from .cost import CostInputs, cost_table, estimate_hours
from .data_io import ExperimentConfig, load_cifar10, load_mnist, save_image_grid
from .defenses import DefenseConfig, EncodingRecord, encode_batch, grad_prune
from .labels import LabelGuess, infer_batch_labels, infer_single_label
from .metrics import MetricReport, match_batch, psnr, score, ssim
from .models import GradientPacket, Model, build_model, client_step

__version__ = "0.1.0"
