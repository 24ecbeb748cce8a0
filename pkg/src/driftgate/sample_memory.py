"""Bounded sample memory: FIFO eviction with ground-truth protection.

Stores (feature, mask) pairs from the stream under a fixed slot budget. The
single ground-truth slot is never evicted; among the others, the oldest
insert goes first. Also exposes the memory-unit size arithmetic used to
compare feature storage against gate-map storage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import ContractViolation, FeatureGrid, MaskGrid, MaskKind, patch_matrix


@dataclass
class MemorySlot:
    """One stored sample plus bookkeeping; patches are cached on first use."""

    feature: FeatureGrid
    mask: MaskGrid
    frame_index: int
    insert_step: int = 0
    is_ground_truth: bool = False
    _patches: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def patches(self) -> np.ndarray:
        if self._patches is None:
            self._patches = patch_matrix(self.feature.values)
        return self._patches


class SampleMemory:
    """At most ``capacity`` slots; exactly one may be the ground-truth anchor."""

    def __init__(self, capacity: int = 32, update_interval: int = 1):
        if capacity < 1:
            raise ContractViolation("capacity must be positive")
        if update_interval < 1:
            raise ContractViolation("update_interval must be positive")
        self.capacity = capacity
        self.update_interval = update_interval
        self.slots: list[MemorySlot] = []
        self.steps = 0  # inserts performed so far

    def __len__(self) -> int:
        return len(self.slots)

    def insert(self, slot: MemorySlot) -> Optional[MemorySlot]:
        """Insert a slot, evicting the oldest non-ground-truth slot when full.

        Returns the evicted slot, or None when there was room.
        """
        if self.slots:
            ref = self.slots[0].feature
            if slot.feature.values.shape != ref.values.shape:
                raise ContractViolation(
                    f"slot feature shape {slot.feature.values.shape} does not match "
                    f"memory shape {ref.values.shape}"
                )
            if slot.mask.values.shape != slot.feature.spatial_shape:
                raise ContractViolation("slot mask does not match its feature spatially")
        if slot.is_ground_truth and any(s.is_ground_truth for s in self.slots):
            raise ContractViolation("memory already holds a ground-truth slot")

        evicted = None
        if len(self.slots) >= self.capacity:
            evictable = [i for i, s in enumerate(self.slots) if not s.is_ground_truth]
            if not evictable:
                raise ContractViolation("memory is full of protected slots")
            oldest = min(evictable, key=lambda i: self.slots[i].insert_step)
            evicted = self.slots.pop(oldest)
        slot.insert_step = self.steps
        self.steps += 1
        self.slots.append(slot)
        return evicted

    def ground_truth_slot(self) -> MemorySlot:
        for s in self.slots:
            if s.is_ground_truth:
                return s
        raise ContractViolation("memory holds no ground-truth slot")

    def temporal_weights(self, decay_base: float) -> np.ndarray:
        """Per-slot weights decay_base**age, ground-truth floored at the mean,
        normalized to sum 1. Age is counted in memory update steps."""
        if not self.slots:
            raise ContractViolation("temporal weights of an empty memory are undefined")
        if not 0.0 < decay_base <= 1.0:
            raise ContractViolation("decay_base must lie in (0, 1]")
        newest = max(s.insert_step for s in self.slots)
        raw = np.array([decay_base ** (newest - s.insert_step) for s in self.slots])
        floor = raw.mean()
        for i, s in enumerate(self.slots):
            if s.is_ground_truth and raw[i] < floor:
                raw[i] = floor
        return raw / raw.sum()


def unit_size_bits(
    feature_dims: Sequence[int], mask_dims: Sequence[int], float_bits: int
) -> int:
    """Bits in one sample-memory unit: feature floats plus a binary mask."""
    c, h, w = (int(d) for d in feature_dims)
    mh, mw = (int(d) for d in mask_dims)
    if min(c, h, w, mh, mw, float_bits) < 1:
        raise ContractViolation("dimensions and float width must be positive")
    return c * h * w * int(float_bits) + mh * mw


def gate_unit_size_bits(model_shape: Sequence[int]) -> int:
    """Bits in one gate-map unit: one bit per target-model parameter."""
    dims = [int(d) for d in model_shape]
    if not dims or min(dims) < 1:
        raise ContractViolation("model shape must have positive dimensions")
    return int(np.prod(dims, dtype=np.int64))


def dump_memory(mem: SampleMemory, path) -> None:
    """One binary record per slot: frame_index u64, insert_step u64,
    is_ground_truth u8, feature little-endian f64s, mask bits packed LE."""
    with open(path, "wb") as fh:
        for s in mem.slots:
            fh.write(np.uint64(s.frame_index).tobytes())
            fh.write(np.uint64(s.insert_step).tobytes())
            fh.write(np.uint8(1 if s.is_ground_truth else 0).tobytes())
            fh.write(s.feature.values.astype("<f8").tobytes())
            bits = (s.mask.values.ravel() > 0.5).astype(np.uint8)
            fh.write(np.packbits(bits, bitorder="little").tobytes())


def load_memory(path, channels: int, height: int, width: int, capacity: int = 32) -> SampleMemory:
    """Rebuild a memory from a dump; dimensions come from the caller (the
    record format itself is headerless)."""
    feat_bytes = channels * height * width * 8
    mask_bytes = (height * width + 7) // 8
    record = 8 + 8 + 1 + feat_bytes + mask_bytes
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % record != 0:
        raise ContractViolation(
            f"dump size {len(raw)} is not a multiple of the record size {record}"
        )
    mem = SampleMemory(capacity=max(capacity, len(raw) // record))
    for off in range(0, len(raw), record):
        frame_index = int(np.frombuffer(raw, "<u8", count=1, offset=off)[0])
        insert_step = int(np.frombuffer(raw, "<u8", count=1, offset=off + 8)[0])
        is_gt = bool(raw[off + 16])
        feat = np.frombuffer(raw, "<f8", count=channels * height * width, offset=off + 17)
        packed = np.frombuffer(raw, np.uint8, count=mask_bytes, offset=off + 17 + feat_bytes)
        bits = np.unpackbits(packed, bitorder="little")[: height * width]
        slot = MemorySlot(
            feature=FeatureGrid(feat.reshape(channels, height, width).copy()),
            mask=MaskGrid(bits.astype(np.float64).reshape(height, width), MaskKind.BINARY_LABEL),
            frame_index=frame_index,
            is_ground_truth=is_gt,
        )
        mem.insert(slot)
        mem.slots[-1].insert_step = insert_step  # preserve original ages
    mem.steps = max((s.insert_step for s in mem.slots), default=-1) + 1
    return mem
