"""The small convolutional target model and its weighted training loop.

The model is a single 3x3 convolution whose output channels are summed into
one score map. Training minimizes, over the samples it is shown, the
weighted squared error

    sum_n w_n * sum_p W_n[p] * (Y_n[p] - C(X_n)[p])^2  +  l2_penalty * sum_k theta_k^2

by full-batch gradient descent with analytic gradients. ``w_n`` is the
per-sample weight (temporal decay or reconstruction coefficient), ``W_n``
the per-pixel class-balance weight; both enter the weighted norm linearly,
so doubling every w_n doubles the data term. The label encoder is the
identity, so targets are the stored masks themselves. Parameter freezing is
exact: a frozen weight is bit-identical before and after an update.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .numerics import ContractViolation, FeatureGrid, MaskGrid, MaskKind, Rng, conv2d, patch_matrix

WEIGHTS_MAGIC = b"DGTM"
WEIGHTS_VERSION = 1


@dataclass
class TargetModel:
    """Weights of shape (C_out, C_in, 3, 3); K = C_out * C_in * 9, no bias."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise ContractViolation(f"weights must be (C_out, C_in, 3, 3), got {w.shape}")
        self.weights = w

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def param_count(self) -> int:
        return self.weights.size

    def copy(self) -> "TargetModel":
        return TargetModel(self.weights.copy())

    @classmethod
    def initial(cls, out_channels: int, in_channels: int, rng: Rng, scale: float = 0.01) -> "TargetModel":
        return cls(rng.normal(0.0, scale, (out_channels, in_channels, 3, 3)))

    @classmethod
    def zeros(cls, out_channels: int, in_channels: int) -> "TargetModel":
        return cls(np.zeros((out_channels, in_channels, 3, 3)))


@dataclass
class LossConfig:
    """Knobs of the online training loop.

    ``gate_gamma`` records how the gate regularizer is interpreted: infinity
    means frozen parameters are masked out of the update exactly. Finite
    soft penalties exist only on the MAS baseline path.
    """

    l2_penalty: float = 150.0
    epochs_per_update: int = 3
    learning_rate: float = 3e-4
    temporal_decay_base: float = 0.85
    gate_gamma: float = float("inf")

    def __post_init__(self):
        if self.l2_penalty < 0:
            raise ContractViolation("l2_penalty must be nonnegative")
        if self.epochs_per_update < 1:
            raise ContractViolation("epochs_per_update must be positive")
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        if not 0.0 < self.temporal_decay_base <= 1.0:
            raise ContractViolation("temporal_decay_base must lie in (0, 1]")


class WeightedSample(NamedTuple):
    """One training sample: feature, target mask, sample weight, pixel weights."""

    feature: FeatureGrid
    target: MaskGrid
    weight: float
    pixel_weight: np.ndarray
    patches: Optional[np.ndarray] = None  # cached patch_matrix(feature.values)


@dataclass
class TrainReport:
    """Record of one model update; optional fields are filled by the trainer."""

    update_step: int = -1
    frame_index: int = -1
    losses: list[float] = field(default_factory=list)
    frozen_count: int = 0
    epochs: int = 0
    memory_size: int = 0
    working_memory_size: Optional[int] = None
    working_memory_fallback: bool = False
    gate_memory_size: Optional[int] = None
    gate_popcount: Optional[int] = None
    lasso_penalty: Optional[float] = None
    duration_ms: float = 0.0
    data_grad_trace: list = field(default_factory=list, repr=False)
    weights_before: Optional[np.ndarray] = field(default=None, repr=False)
    weights_after: Optional[np.ndarray] = field(default=None, repr=False)
    freeze_bits: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def to_record(self) -> dict:
        """JSON-safe dict (drops the gradient trace)."""
        return {
            "update_step": self.update_step,
            "frame_index": self.frame_index,
            "losses": self.losses,
            "frozen_count": self.frozen_count,
            "epochs": self.epochs,
            "memory_size": self.memory_size,
            "working_memory_size": self.working_memory_size,
            "working_memory_fallback": self.working_memory_fallback,
            "gate_memory_size": self.gate_memory_size,
            "gate_popcount": self.gate_popcount,
            "lasso_penalty": self.lasso_penalty,
            "duration_ms": self.duration_ms,
        }


def pixel_weights(mask: MaskGrid) -> np.ndarray:
    """Per-pixel weights W summing to H*W, splitting total weight evenly
    between target and background pixels when both classes are present."""
    m = mask.values > 0.5
    total = m.size
    n_target = int(m.sum())
    if n_target == 0 or n_target == total:
        return np.ones(mask.values.shape)
    w = np.empty(mask.values.shape)
    w[m] = total / (2.0 * n_target)
    w[~m] = total / (2.0 * (total - n_target))
    return w


def forward(model: TargetModel, x: FeatureGrid) -> MaskGrid:
    """Score map of the model on one feature: conv output summed over channels."""
    if x.channels != model.in_channels:
        raise ContractViolation(
            f"model expects {model.in_channels} channels, feature has {x.channels}"
        )
    return MaskGrid(conv2d(x, model.weights).values.sum(axis=0), MaskKind.SCORE_MAP)


def _stack_batch(batch: Sequence[WeightedSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a batch into (patches (n, HW, C*9), targets (n, HW), weights (n, HW)).

    ``weights`` is the pixelwise factor w_n * W_n[p] multiplying each squared
    residual in the weighted norm.
    """
    patches = np.stack([
        s.patches if s.patches is not None else patch_matrix(s.feature.values) for s in batch
    ])
    targets = np.stack([s.target.values.ravel() for s in batch])
    factors = np.stack([s.weight * s.pixel_weight.ravel() for s in batch])
    return patches, targets, factors


def _data_loss_grad(
    weights: np.ndarray,
    patches: np.ndarray,
    targets: np.ndarray,
    pixel_factors: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Data term of the loss and its gradient w.r.t. the full weight tensor.

    The channel-summed output makes every output slice receive the same
    gradient, so the per-slice gradient is computed once and broadcast.
    """
    c_out = weights.shape[0]
    n, hw, ck = patches.shape
    flat = patches.reshape(n * hw, ck)
    v = weights.sum(axis=0).reshape(ck)
    scores = (flat @ v).reshape(n, hw)
    resid = targets - scores
    loss = float(np.sum(pixel_factors * resid * resid))
    score_grad = (-2.0 * pixel_factors * resid).reshape(n * hw)
    grad_slice = (flat.T @ score_grad).reshape(weights.shape[1:])
    return loss, np.tile(grad_slice, (c_out, 1, 1, 1))


def loss_and_grad(
    model: TargetModel,
    batch: Sequence[WeightedSample],
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Full loss (data + l2) and its exact analytic gradient."""
    if len(batch) == 0:
        raise ContractViolation("loss_and_grad needs a nonempty batch")
    for s in batch:
        if s.feature.channels != model.in_channels:
            raise ContractViolation("batch feature channels do not match the model")
        if s.target.values.shape != s.feature.spatial_shape:
            raise ContractViolation("mask dimensions do not match the paired feature")
    patches, targets, factors = _stack_batch(batch)
    loss, grad = _data_loss_grad(model.weights, patches, targets, factors)
    loss += cfg.l2_penalty * float(np.sum(model.weights * model.weights))
    grad += 2.0 * cfg.l2_penalty * model.weights
    return loss, grad


def _freeze_bits(freeze_mask, param_count: int) -> Optional[np.ndarray]:
    if freeze_mask is None:
        return None
    bits = getattr(freeze_mask, "bits", freeze_mask)
    bits = np.asarray(bits, dtype=bool).reshape(-1)
    if bits.size != param_count:
        raise ContractViolation(
            f"freeze mask has {bits.size} bits, model has {param_count} parameters"
        )
    return bits


def train_update(
    model: TargetModel,
    memory_view: Sequence[WeightedSample],
    cfg: LossConfig,
    freeze_mask=None,
    penalty: Optional[Callable[[np.ndarray], tuple[float, np.ndarray]]] = None,
    record_weights: bool = False,
) -> TrainReport:
    """Run ``cfg.epochs_per_update`` full-batch gradient-descent epochs in place.

    ``freeze_mask`` (K bits, canonical layout) marks parameters that must not
    move; they are left bit-identical. ``penalty`` optionally returns an extra
    (loss, gradient) contribution evaluated at the current weights -- the MAS
    baseline's soft regularizer enters through it.

    The report's ``data_grad_trace`` holds one array per epoch: the data-term
    gradient actually applied (frozen entries zeroed), which is what gate
    importance accumulates from.
    """
    if len(memory_view) == 0:
        raise ContractViolation("train_update needs a nonempty memory view")
    start = time.perf_counter()
    bits = _freeze_bits(freeze_mask, model.param_count)
    frozen_count = int(bits.sum()) if bits is not None else 0
    bits_shaped = bits.reshape(model.weights.shape) if bits is not None else None

    patches, targets, factors = _stack_batch(memory_view)
    report = TrainReport(
        frozen_count=frozen_count,
        epochs=cfg.epochs_per_update,
        memory_size=len(memory_view),
    )
    if record_weights:
        report.weights_before = model.weights.copy()
        report.freeze_bits = bits.copy() if bits is not None else None
    weights = model.weights
    for _ in range(cfg.epochs_per_update):
        data_loss, data_grad = _data_loss_grad(weights, patches, targets, factors)
        loss = data_loss + cfg.l2_penalty * float(np.sum(weights * weights))
        grad = data_grad + 2.0 * cfg.l2_penalty * weights
        if penalty is not None:
            p_loss, p_grad = penalty(weights)
            loss += p_loss
            grad = grad + p_grad
        report.losses.append(loss)
        if bits_shaped is not None:
            applied_data_grad = np.where(bits_shaped, 0.0, data_grad)
            weights = np.where(bits_shaped, weights, weights - cfg.learning_rate * grad)
        else:
            applied_data_grad = data_grad
            weights = weights - cfg.learning_rate * grad
        report.data_grad_trace.append(applied_data_grad)
    model.weights = weights
    if record_weights:
        report.weights_after = weights.copy()

    final_data, _ = _data_loss_grad(weights, patches, targets, factors)
    final = final_data + cfg.l2_penalty * float(np.sum(weights * weights))
    if penalty is not None:
        final += penalty(weights)[0]
    report.losses.append(final)
    report.duration_ms = (time.perf_counter() - start) * 1e3
    return report


def save_weights(model: TargetModel, path) -> None:
    """Write weights as: "DGTM", version u32, C_out u32, C_in u32, K little-endian f64."""
    header = struct.pack(
        "<4sIII", WEIGHTS_MAGIC, WEIGHTS_VERSION, model.out_channels, model.in_channels
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(model.weights.astype("<f8").tobytes())


def load_weights(path) -> TargetModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, c_out, c_in = struct.unpack_from("<4sIII", raw, 0)
    if magic != WEIGHTS_MAGIC:
        raise ContractViolation(f"not a target-model weights file (magic {magic!r})")
    if version != WEIGHTS_VERSION:
        raise ContractViolation(f"unsupported weights version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=struct.calcsize("<4sIII"))
    expected = c_out * c_in * 9
    if body.size != expected:
        raise ContractViolation(f"expected {expected} weights, file holds {body.size}")
    return TargetModel(body.reshape(c_out, c_in, 3, 3).copy())
