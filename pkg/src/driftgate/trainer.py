"""The online training loop over a drift stream.

Per frame: predict with the current model; on the memory cadence insert the
feature with the thresholded prediction (self-training; frame 0 inserts the
given ground truth); on the update cadence retrain the model on the memory
under the active method:

    baseline  weighted loss on the full memory
    mas       baseline plus a soft importance-weighted pull to the previous
              weights
    grcl      freeze the overall-gate parameters, then binarize this
              update's importance into a new gate map
    rmscl     train on the reconstruction-selected working memory with its
              coefficients as sample weights
    hybrid    working memory and gate freeze together

Model snapshots are taken at the end of every segment; evaluating them on
per-segment holdouts yields the Jaccard matrix behind the retrospective and
forgetting scores.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .grcl import GateMemory, ImportanceAccumulator, binarize, mas_penalty
from .numerics import ContractViolation, MaskGrid, Rng
from .rmscl import build_working_memory
from .sample_memory import MemorySlot, SampleMemory
from .target_model import (
    LossConfig,
    TargetModel,
    TrainReport,
    WeightedSample,
    forward,
    pixel_weights,
    train_update,
)


class Method(Enum):
    BASELINE = "baseline"
    MAS = "mas"
    GRCL = "grcl"
    RMSCL = "rmscl"
    HYBRID = "hybrid"


@dataclass
class MethodConfig:
    method: Method = Method.BASELINE
    update_interval: int = 1  # frames between model updates
    memory_interval: int = 1  # frames between memory inserts
    memory_capacity: int = 32
    model_out_channels: int = 1
    model_init_scale: float = 0.01
    loss: LossConfig = field(default_factory=LossConfig)
    # gate regularizer
    gate_percentile: float = 99.5
    gate_clamp: tuple[float, float] = (0.1, 0.55)
    xi_lower: float = 0.07
    xi_upper: float = 0.15
    gate_capacity: Optional[int] = None  # fixed P; None = dynamic sizing
    # MAS baseline
    mas_gamma: float = 0.0
    prediction_threshold: float = 0.5
    record_update_weights: bool = False

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = Method(self.method)
        if self.update_interval < 1 or self.memory_interval < 1:
            raise ContractViolation("update and memory intervals must be positive")


@dataclass
class RunResult:
    config: MethodConfig
    seed: int
    reports: list[TrainReport]
    predictions: list[MaskGrid]
    snapshots: list[np.ndarray]  # model weights at each segment end
    snapshot_frames: list[int]
    duration_ms: float = 0.0

    @property
    def param_count(self) -> int:
        return int(self.snapshots[-1].size) if self.snapshots else 0


def jaccard(pred: MaskGrid, truth: MaskGrid) -> float:
    """Intersection over union of two binary masks; empty union scores 1."""
    a = pred.values > 0.5
    b = truth.values > 0.5
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def evaluate(snapshots, holdout_sets) -> np.ndarray:
    """Jaccard matrix J[i][s]: snapshot i scored on segment s's holdouts.

    ``snapshots`` are weight tensors; ``holdout_sets`` is a list per segment
    of (feature, truth-mask) pairs.
    """
    if not snapshots:
        raise ContractViolation("evaluate needs at least one snapshot")
    matrix = np.zeros((len(snapshots), len(holdout_sets)))
    for i, weights in enumerate(snapshots):
        model = TargetModel(np.array(weights))
        for s, frames in enumerate(holdout_sets):
            scores = [
                jaccard(forward(model, x).thresholded(0.5), y) for x, y in frames
            ]
            matrix[i, s] = float(np.mean(scores))
    return matrix


def forgetting_score(matrix: np.ndarray) -> float:
    """Mean over segments of (peak Jaccard - final Jaccard); lower is better."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 2:
        raise ContractViolation("forgetting score needs a matrix over >= 2 segments")
    return float(np.mean(m.max(axis=0) - m[-1]))


def retrospective_jaccard(matrix: np.ndarray) -> float:
    """Mean Jaccard of the final snapshot across all segments."""
    return float(np.asarray(matrix)[-1].mean())


def _memory_batch(mem: SampleMemory, decay_base: float) -> list[WeightedSample]:
    weights = mem.temporal_weights(decay_base)
    return [
        WeightedSample(
            feature=s.feature,
            target=s.mask,
            weight=float(w),
            pixel_weight=pixel_weights(s.mask),
            patches=s.patches(),
        )
        for s, w in zip(mem.slots, weights)
    ]


def _working_batch(entries) -> list[WeightedSample]:
    return [
        WeightedSample(
            feature=s.feature,
            target=s.mask,
            weight=float(w),
            pixel_weight=pixel_weights(s.mask),
            patches=s.patches(),
        )
        for s, w in entries
    ]


def run_stream(stream, cfg: MethodConfig, seed: int = 0) -> RunResult:
    """Drive one method across a stream; see the module docstring for the loop."""
    started = time.perf_counter()
    channels = stream.feature_dims[0]
    model = TargetModel.initial(
        cfg.model_out_channels, channels, Rng(seed).substream(100), cfg.model_init_scale
    )
    mem = SampleMemory(capacity=cfg.memory_capacity, update_interval=cfg.memory_interval)
    gate_mem = GateMemory(
        model.param_count,
        xi_lower=cfg.xi_lower,
        xi_upper=cfg.xi_upper,
        fixed_capacity=cfg.gate_capacity,
    )
    acc = ImportanceAccumulator.zeros(model.param_count)
    uses_gate = cfg.method in (Method.GRCL, Method.HYBRID)
    uses_working_memory = cfg.method in (Method.RMSCL, Method.HYBRID)

    reports: list[TrainReport] = []
    predictions: list[MaskGrid] = []
    snapshots: list[np.ndarray] = []
    snapshot_frames: list[int] = []
    segment_ends = {
        start + _segment_length(stream, i) - 1
        for i, start in enumerate(stream.segment_starts)
    }

    def do_update(frame_index: int, step: int) -> None:
        freeze = gate_mem.overall_gate() if uses_gate else None
        penalty = None
        if cfg.method is Method.MAS and cfg.mas_gamma:
            prev = model.weights.copy()
            omega = acc.running.reshape(model.weights.shape)
            penalty = lambda w: mas_penalty(w, prev, omega, cfg.mas_gamma)

        working = None
        if uses_working_memory:
            next_index = min(frame_index + 1, stream.frame_count - 1)
            working = build_working_memory(
                mem, stream.frame(next_index)[0], cfg.loss.temporal_decay_base
            )
            batch = _working_batch(working.entries)
        else:
            batch = _memory_batch(mem, cfg.loss.temporal_decay_base)

        report = train_update(
            model,
            batch,
            cfg.loss,
            freeze_mask=freeze.bits if freeze is not None else None,
            penalty=penalty,
            record_weights=cfg.record_update_weights,
        )
        report.update_step = step
        report.frame_index = frame_index
        if working is not None:
            report.working_memory_size = len(working)
            report.working_memory_fallback = working.fallback
            report.lasso_penalty = working.lasso_penalty

        if cfg.method is Method.MAS or uses_gate:
            acc.begin_update()
            acc.accumulate(report.data_grad_trace)
        if uses_gate:
            if acc.current.max() > 0.0:
                gate_mem.maintain(
                    binarize(acc.current, cfg.gate_percentile, cfg.gate_clamp, created_step=step)
                )
            report.gate_memory_size = len(gate_mem)
            report.gate_popcount = gate_mem.overall_gate().popcount
        reports.append(report)

    # Frame 0 carries the given ground truth: seed the memory and fit the
    # initial model on it (the gate map born here is the permanent anchor).
    x0, y0 = stream.frame(0)
    mem.insert(MemorySlot(feature=x0, mask=y0, frame_index=0, is_ground_truth=True))
    do_update(0, step=0)
    predictions.append(forward(model, x0).thresholded(cfg.prediction_threshold))
    if 0 in segment_ends:
        snapshots.append(model.weights.copy())
        snapshot_frames.append(0)

    step = 1
    for f in range(1, stream.frame_count):
        x, _ = stream.frame(f)
        pred = forward(model, x).thresholded(cfg.prediction_threshold)
        predictions.append(pred)
        if f % cfg.memory_interval == 0:
            mem.insert(MemorySlot(feature=x, mask=pred, frame_index=f))
        if f % cfg.update_interval == 0:
            do_update(f, step)
            step += 1
        if f in segment_ends:
            snapshots.append(model.weights.copy())
            snapshot_frames.append(f)

    return RunResult(
        config=cfg,
        seed=seed,
        reports=reports,
        predictions=predictions,
        snapshots=snapshots,
        snapshot_frames=snapshot_frames,
        duration_ms=(time.perf_counter() - started) * 1e3,
    )


def _segment_length(stream, segment_index: int) -> int:
    starts = stream.segment_starts
    if segment_index + 1 < len(starts):
        return starts[segment_index + 1] - starts[segment_index]
    return stream.frame_count - starts[segment_index]


def evaluate_run(stream, result: RunResult, holdouts_per_segment: int = 21) -> np.ndarray:
    """Jaccard matrix of a run's snapshots against the stream's holdouts."""
    holdout_sets = [
        stream.holdout_frames(s, holdouts_per_segment) for s in range(stream.segment_count)
    ]
    return evaluate(result.snapshots, holdout_sets)
