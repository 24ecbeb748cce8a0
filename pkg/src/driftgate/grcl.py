"""Gated-regularizer continual learning and the MAS baseline.

Each model update yields per-parameter importance (summed gradient
magnitudes). Binarizing the normalized importance gives a gate map; the OR
of all stored maps marks parameters to freeze in the next update. The gate
memory is dynamically sized: when the overall gate's popcount exceeds an
upper bound proportional to the parameter count, the oldest maps are
dropped (the map from the very first, ground-truth update is kept forever).

The MAS baseline instead keeps one running importance total per parameter
and applies a soft quadratic pull toward the previous weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import ContractViolation, percentile

GATE_MAGIC = b"DGGM"
GATE_VERSION = 1

# Snap distance for keeping the binarization threshold strictly inside its
# clamp interval; ties at a bound must break deterministically.
_CLAMP_NUDGE = 1e-9


@dataclass(frozen=True)
class GateMap:
    """Immutable K-bit map aligned to the model's canonical parameter layout."""

    bits: np.ndarray
    created_step: int = 0

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool).reshape(-1)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def param_count(self) -> int:
        return self.bits.size

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


class GateMemory:
    """Ordered store of gate maps with dynamic or fixed capacity.

    Dynamic mode (``fixed_capacity`` unset) keeps the overall popcount at or
    below ``xi_upper * param_count`` by dropping the oldest maps, never the
    anchor map from the first update, and never the last remaining map. The
    lower ratio only marks the point below which the store should keep
    growing; nothing is dropped to reach it. Fixed mode is a plain FIFO ring
    of ``fixed_capacity`` maps.
    """

    def __init__(
        self,
        param_count: int,
        xi_lower: float = 0.07,
        xi_upper: float = 0.15,
        fixed_capacity: Optional[int] = None,
    ):
        if param_count < 1:
            raise ContractViolation("param_count must be positive")
        if not 0.0 <= xi_lower <= xi_upper <= 1.0:
            raise ContractViolation("need 0 <= xi_lower <= xi_upper <= 1")
        if fixed_capacity is not None and fixed_capacity < 1:
            raise ContractViolation("fixed_capacity must be positive when set")
        self.param_count = param_count
        self.xi_lower = xi_lower
        self.xi_upper = xi_upper
        self.fixed_capacity = fixed_capacity
        self.maps: list[GateMap] = []
        self._anchor: Optional[GateMap] = None

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def lower_bound(self) -> float:
        return self.xi_lower * self.param_count

    @property
    def upper_bound(self) -> float:
        return self.xi_upper * self.param_count

    def overall_gate(self) -> GateMap:
        """Bitwise OR of all stored maps; all-zeros when the store is empty."""
        acc = np.zeros(self.param_count, dtype=bool)
        step = 0
        for m in self.maps:
            if m.param_count != self.param_count:
                raise ContractViolation("stored gate map has a mismatched bit count")
            acc |= m.bits
            step = max(step, m.created_step)
        return GateMap(acc, created_step=step)

    def maintain(self, new_map: GateMap) -> None:
        """Append a map, then shrink per the capacity mode."""
        if new_map.param_count != self.param_count:
            raise ContractViolation(
                f"gate map has {new_map.param_count} bits, expected {self.param_count}"
            )
        if self._anchor is None:
            self._anchor = new_map
        self.maps.append(new_map)
        if self.fixed_capacity is not None:
            while len(self.maps) > self.fixed_capacity:
                self.maps.pop(0)
        else:
            while self.overall_gate().popcount > self.upper_bound and len(self.maps) > 1:
                oldest = 1 if self.maps[0] is self._anchor else 0
                self.maps.pop(oldest)


@dataclass
class ImportanceAccumulator:
    """Gradient-magnitude sums: ``current`` for the update in progress,
    ``running`` accumulated across all updates (the MAS importance)."""

    current: np.ndarray
    running: np.ndarray

    @classmethod
    def zeros(cls, param_count: int) -> "ImportanceAccumulator":
        return cls(np.zeros(param_count), np.zeros(param_count))

    def begin_update(self) -> None:
        self.current[:] = 0.0

    def accumulate(self, grad_trace: Sequence[np.ndarray]) -> None:
        """Add the summed absolute gradients of one update's epochs."""
        if not len(grad_trace):
            return
        delta = np.zeros_like(self.current)
        for g in grad_trace:
            flat = np.asarray(g, dtype=np.float64).reshape(-1)
            if flat.size != self.current.size:
                raise ContractViolation(
                    f"gradient has {flat.size} entries, expected {self.current.size}"
                )
            delta += np.abs(flat)
        self.current += delta
        self.running += delta


def binarize(
    importance: np.ndarray,
    pct: float = 99.5,
    clamp: tuple[float, float] = (0.1, 0.55),
    created_step: int = 0,
) -> GateMap:
    """Threshold max-normalized importance into a gate map.

    The cut is the nearest-rank ``pct`` percentile of the normalized values,
    snapped strictly inside the ``clamp`` interval; bits are set where the
    normalized importance strictly exceeds the cut.
    """
    u = np.asarray(importance, dtype=np.float64).reshape(-1)
    peak = u.max() if u.size else 0.0
    if u.size == 0 or peak <= 0.0:
        raise ContractViolation("no importance signal: all importance values are zero")
    lo, hi = clamp
    if not 0.0 <= lo < hi <= 1.0:
        raise ContractViolation("clamp must satisfy 0 <= lo < hi <= 1")
    normalized = u / peak
    cut = percentile(normalized, pct)
    cut = min(max(cut, lo + _CLAMP_NUDGE), hi - _CLAMP_NUDGE)
    return GateMap(normalized > cut, created_step=created_step)


def mas_penalty_grad(
    weights: np.ndarray,
    prev_weights: np.ndarray,
    importance: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Gradient of the MAS regularizer: 2 * gamma * importance * (w - w_prev)."""
    w = np.asarray(weights, dtype=np.float64)
    prev = np.asarray(prev_weights, dtype=np.float64).reshape(w.shape)
    imp = np.asarray(importance, dtype=np.float64).reshape(w.shape)
    return 2.0 * gamma * imp * (w - prev)


def mas_penalty(
    weights: np.ndarray,
    prev_weights: np.ndarray,
    importance: np.ndarray,
    gamma: float,
) -> tuple[float, np.ndarray]:
    """The MAS regularizer value and gradient, for the training penalty hook."""
    w = np.asarray(weights, dtype=np.float64)
    prev = np.asarray(prev_weights, dtype=np.float64).reshape(w.shape)
    imp = np.asarray(importance, dtype=np.float64).reshape(w.shape)
    diff = w - prev
    return gamma * float(np.sum(imp * diff * diff)), 2.0 * gamma * imp * diff


def save_gate_map(gate: GateMap, path) -> None:
    """Write a gate map: "DGGM", version u32, K u64, packed bits (LE), created_step u64."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", GATE_MAGIC, GATE_VERSION, gate.param_count))
        fh.write(np.packbits(gate.bits.astype(np.uint8), bitorder="little").tobytes())
        fh.write(struct.pack("<Q", gate.created_step))


def load_gate_map(path) -> GateMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, k = struct.unpack_from("<4sIQ", raw, 0)
    if magic != GATE_MAGIC:
        raise ContractViolation(f"not a gate-map file (magic {magic!r})")
    if version != GATE_VERSION:
        raise ContractViolation(f"unsupported gate-map version {version}")
    offset = struct.calcsize("<4sIQ")
    packed = np.frombuffer(raw, np.uint8, count=(k + 7) // 8, offset=offset)
    bits = np.unpackbits(packed, bitorder="little")[:k].astype(bool)
    (created_step,) = struct.unpack_from("<Q", raw, offset + packed.size)
    return GateMap(bits, created_step=int(created_step))
