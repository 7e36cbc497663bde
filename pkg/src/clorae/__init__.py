"""Collaborative multi-LoRA experts with an achievement-based multi-task loss."""

from .autodiff import Tensor, ShapeError, cross_entropy, matmul, no_grad, softmax
from .adapter import (CloraeLinear, ForwardContext, LoraFactors, RoutingStats,
                      count_trainable, routing_report)
from .achievement import (AchievementTracker, multitask_step_loss,
                          normalize_weights, raw_weight)
from .gradcheck import finite_diff_check
from .mim import VidHead, mim_loss
from .model import ModelConfig, Seq2SeqModel
from .nn import Module, Parameter, derive_rng
from .optim import Adam
from .taskgen import DatasetSpec, GeneratorSpec, LookupOracle, generate

__version__ = "0.1.0"
