"""Low-resolution multi-label action recognition at desk scale.

Synthetic long-tailed dual-resolution benchmark, a numpy residual MLP with
hand-written backprop, BCE / distillation / asymmetric losses, AdamW with
warm-restart cosine scheduling, and ensemble fusion with calibrated
thresholds and group suppression.
"""

from .distill import (DistillTarget, TrainConfig, TrainReport, distill_student, extract_knowledge,
                      featurize, train_model)
from .fusion import (FusionConfig, ScoreMatrix, apply_thresholds, calibrate_thresholds,
                     ensemble_scores, f1_scores, group_suppress)
from .losses import LossValue, asl_loss, bce_loss, kd_loss, total_loss
from .net import MlpModel, backward, forward, init_model, predict_probs
from .optim import AdamWState, LrSchedule, adamw_step, lr_at
from .synthdata import (Dataset, DatasetSpec, LabeledSample, VideoTensor, balance_dataset,
                        flip_horizontal, generate_dataset, uniform_sample_indices)

__version__ = "0.1.0"
