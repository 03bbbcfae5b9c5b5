"""Domain conditioned adaptation on synthetic two-domain tasks.

A small residual CNN with per-domain channel attention routes and
MMD-corrected task-specific layers, built on a from-scratch reverse-mode
autodiff core so every gradient can be verified against finite differences.
"""

from .tensor import Tensor, backward
from .losses import (AblationFlags, KernelConfig, LossWeights, SubsetSample,
                     correction_alignment_loss, cross_entropy, mmd,
                     sample_subset, source_regularization_loss, target_entropy,
                     total_objective)
from .blocks import (DomainConditionedAttention, FeatureCorrectionBlock,
                     LinearLayer, ResidualBlock, correction_forward,
                     dca_forward, residual_block_forward, softmax_correction)
from .model import (DcanModel, ForwardRecord, LossBreakdown, ModelConfig,
                    Variant, build, forward, predict, step_losses)
from .data import (BatchStream, Dataset, DomainPair, DomainShiftSpec,
                   batch_iterator, generate_domain_pair, load, load_pair,
                   no_shift_spec, save, save_pair)
from .train import (MetricsRow, OptimizerState, TrainConfig, TrainingDiverged,
                    TrainResult, evaluate, lr_at, sgd_step, train)
from .analysis import (AblationReport, AttentionDiffReport,
                       attention_difference, run_ablation)

__all__ = [name for name in dir() if not name.startswith("_")]
