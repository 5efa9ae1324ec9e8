"""Toy in-context-conditioned diffusion transformer with decoupled attention,
dynamic context-token selection, and step/layer context caching."""
from .attention import (AttentionInputs, SequenceLayout, attn_decoupled, attn_icc_full,
                        attn_masked_oracle)
from .caching import BIReport, LayerPlan, ProtocolError, SessionCache, bi_report, choose_layers
from .core import Rng
from .costs import CONFIGS, CostReport, CostSpec, analytic_cost, interaction_count, scaling_curve
from .kernels import backend_name, counting
from .model import (MODES, DiffusionState, ModelConfig, ToyDiT, fm_loss, sample, train_toy)
from .selection import ImportanceScorer, SelectionResult, select_topk
from .tasks import SyntheticTask

__version__ = "0.1.0"

__all__ = [
    "AttentionInputs", "SequenceLayout", "attn_decoupled", "attn_icc_full", "attn_masked_oracle",
    "BIReport", "LayerPlan", "ProtocolError", "SessionCache", "bi_report", "choose_layers", "Rng",
    "CONFIGS", "CostReport", "CostSpec", "analytic_cost", "interaction_count", "scaling_curve",
    "backend_name", "counting", "MODES", "DiffusionState", "ModelConfig", "ToyDiT", "fm_loss",
    "sample", "train_toy", "ImportanceScorer", "SelectionResult", "select_topk", "SyntheticTask",
]
