"""Teacher-feature drifting: one-step distillation of a toy diffusion teacher
with kernel drift fields on noised teacher features and an anchor-margin
coverage term."""

from .anchor import AnchorBank, anchor_margin_loss, generated_support, self_support
from .config import ConfigError, RunConfig
from .datasets import SyntheticSpec, mixture_log_density, sample_batch
from .distill import (AnchorConfig, DistillSetup, GeneratorNet, MetricsConfig, TrainConfig, distill,
                      init_student_from_teacher, sample)
from .drift import DriftConfig, drift_field, drift_loss, laplace_kernel, mean_shift_field, tfd_loss
from .metrics import budgeted_best, gaussian_frechet, mmd_squared, mode_coverage
from .numerics import ContractError, DimensionError, DivergenceError, NumericError, Tensor
from .teacher import FeatureSpec, NoiseSchedule, extract_features, train_teacher

__version__ = "0.1.0"
