"""Continual online learning on drifting feature streams.

Gated-regularizer freezing, reconstruction-based memory selection, their
hybrid, and a MAS baseline around a small convolutional target model with a
fixed-capacity sample memory.
"""

__version__ = "0.1.0"

from .numerics import ContractViolation, FeatureGrid, MaskGrid, MaskKind, Rng
from .sample_memory import MemorySlot, SampleMemory, gate_unit_size_bits, unit_size_bits
from .target_model import LossConfig, TargetModel, TrainReport, forward, loss_and_grad, train_update
from .grcl import GateMap, GateMemory, ImportanceAccumulator, binarize, mas_penalty_grad
from .rmscl import LassoProblem, WorkingMemory, build_working_memory, select_lambda_aic, solve_nn_lasso
from .feature_stream import DriftStream, DriftStreamSpec, ManifestStream, SegmentSpec, build_drift_spec
from .trainer import Method, MethodConfig, RunResult, evaluate, forgetting_score, jaccard, run_stream
from .harness import ExperimentConfig, emit_plot_data, run_experiment, run_verification

__all__ = [
    "ContractViolation",
    "FeatureGrid",
    "MaskGrid",
    "MaskKind",
    "Rng",
    "MemorySlot",
    "SampleMemory",
    "unit_size_bits",
    "gate_unit_size_bits",
    "LossConfig",
    "TargetModel",
    "TrainReport",
    "forward",
    "loss_and_grad",
    "train_update",
    "GateMap",
    "GateMemory",
    "ImportanceAccumulator",
    "binarize",
    "mas_penalty_grad",
    "LassoProblem",
    "WorkingMemory",
    "build_working_memory",
    "select_lambda_aic",
    "solve_nn_lasso",
    "DriftStream",
    "DriftStreamSpec",
    "ManifestStream",
    "SegmentSpec",
    "build_drift_spec",
    "Method",
    "MethodConfig",
    "RunResult",
    "evaluate",
    "forgetting_score",
    "jaccard",
    "run_stream",
    "ExperimentConfig",
    "emit_plot_data",
    "run_experiment",
    "run_verification",
]
