import numpy as np
import pytest

from driftgate.numerics import ContractViolation, FeatureGrid, MaskGrid, MaskKind, Rng
from driftgate.sample_memory import (
    MemorySlot,
    SampleMemory,
    dump_memory,
    gate_unit_size_bits,
    load_memory,
    unit_size_bits,
)


def slot(frame, c=1, h=2, w=2, gt=False, rng=None):
    rng = rng or Rng(frame)
    feat = FeatureGrid(rng.normal(size=(c, h, w)))
    mask = MaskGrid((rng.uniform(size=(h, w)) > 0.5).astype(float), MaskKind.BINARY_LABEL)
    return MemorySlot(feature=feat, mask=mask, frame_index=frame, is_ground_truth=gt)


class TestInsertAndEviction:
    def test_fifo_trace_keeps_ground_truth(self):
        mem = SampleMemory(capacity=3)
        mem.insert(slot(0, gt=True))
        for f in range(1, 6):
            mem.insert(slot(f))
        frames = sorted(s.frame_index for s in mem.slots)
        assert frames == [0, 4, 5]
        assert mem.ground_truth_slot().frame_index == 0

    def test_insert_into_spare_capacity_evicts_nothing(self):
        mem = SampleMemory(capacity=4)
        assert mem.insert(slot(0, gt=True)) is None
        assert mem.insert(slot(1)) is None

    def test_eviction_returns_oldest_non_ground_truth(self):
        mem = SampleMemory(capacity=2)
        mem.insert(slot(0, gt=True))
        mem.insert(slot(1))
        evicted = mem.insert(slot(2))
        assert evicted is not None and evicted.frame_index == 1

    def test_ten_thousand_inserts_keep_fixed_footprint(self):
        mem = SampleMemory(capacity=32)
        mem.insert(slot(0, gt=True))
        rng = Rng(99)
        peak = 0
        for f in range(1, 10_000):
            mem.insert(slot(f, rng=rng))
            assert len(mem) <= 32
            peak = max(peak, len(mem))
        assert peak == 32
        assert any(s.is_ground_truth for s in mem.slots)

    def test_second_ground_truth_rejected(self):
        mem = SampleMemory(capacity=4)
        mem.insert(slot(0, gt=True))
        with pytest.raises(ContractViolation):
            mem.insert(slot(1, gt=True))

    def test_shape_mismatch_rejected(self):
        mem = SampleMemory(capacity=4)
        mem.insert(slot(0, gt=True))
        with pytest.raises(ContractViolation):
            mem.insert(slot(1, c=2))


class TestTemporalWeights:
    def test_no_decay_is_uniform(self):
        mem = SampleMemory(capacity=4)
        mem.insert(slot(0, gt=True))
        mem.insert(slot(1))
        mem.insert(slot(2))
        assert np.allclose(mem.temporal_weights(1.0), np.full(3, 1 / 3))

    def test_closed_form_two_slots_with_floor(self):
        mem = SampleMemory(capacity=4)
        mem.insert(slot(0, gt=True))
        mem.insert(slot(1))
        # ages 1 and 0 at base 0.5 give raw (0.5, 1.0); the ground-truth
        # floor (mean 0.75) lifts the old slot to (0.75, 1.0).
        w = mem.temporal_weights(0.5)
        assert np.allclose(w, [0.75 / 1.75, 1.0 / 1.75])

    def test_closed_form_two_slots_no_floor_binding(self):
        # Ground truth newest: raw weights (0.5, 1.0) stand, giving 1/3, 2/3.
        mem = SampleMemory(capacity=4)
        mem.insert(slot(0))
        mem.insert(slot(1, gt=True))
        assert np.allclose(mem.temporal_weights(0.5), [1 / 3, 2 / 3])

    def test_normalization_and_age_monotonicity(self):
        mem = SampleMemory(capacity=16)
        mem.insert(slot(0, gt=True))
        rng = Rng(5)
        for f in range(1, 12):
            mem.insert(slot(f, rng=rng))
        w = mem.temporal_weights(0.8)
        assert abs(w.sum() - 1.0) < 1e-12
        ages = [max(s.insert_step for s in mem.slots) - s.insert_step for s in mem.slots]
        for i in range(len(w)):
            for j in range(len(w)):
                if mem.slots[i].is_ground_truth or mem.slots[j].is_ground_truth:
                    continue
                if ages[i] > ages[j]:
                    assert w[i] <= w[j] + 1e-12

    def test_empty_memory_rejected(self):
        with pytest.raises(ContractViolation):
            SampleMemory(capacity=2).temporal_weights(0.9)


class TestUnitSizes:
    def test_full_scale_accounting(self):
        unit = unit_size_bits((512, 30, 52), (30, 52), 64)
        gate = gate_unit_size_bits((512, 16, 3, 3))
        assert unit == 51_119_640
        assert gate == 73_728
        assert abs(unit / gate - 693.35) <= 0.01

    def test_degenerate_unit(self):
        assert unit_size_bits((1, 1, 1), (1, 1), 1) == 2

    def test_matches_integer_arithmetic_oracle(self):
        rng = Rng(6)
        for _ in range(25):
            c, h, w = (int(v) for v in rng.integers(1, 64, size=3))
            bits = int(rng.integers(1, 128))
            expected = 0
            for _ in range(c):
                expected += h * w * bits
            expected += h * w
            assert unit_size_bits((c, h, w), (h, w), bits) == expected
            dims = [int(v) for v in rng.integers(1, 16, size=4)]
            prod = 1
            for d in dims:
                prod *= d
            assert gate_unit_size_bits(dims) == prod

    def test_nonpositive_dimensions_rejected(self):
        with pytest.raises(ContractViolation):
            unit_size_bits((0, 2, 2), (2, 2), 32)
        with pytest.raises(ContractViolation):
            gate_unit_size_bits((0,))


class TestDumpFormat:
    def test_roundtrip_bit_identical(self, tmp_path):
        mem = SampleMemory(capacity=4)
        mem.insert(slot(0, c=3, h=4, w=5, gt=True))
        mem.insert(slot(7, c=3, h=4, w=5))
        path = tmp_path / "memory.bin"
        dump_memory(mem, path)
        loaded = load_memory(path, channels=3, height=4, width=5, capacity=4)
        assert len(loaded) == 2
        for a, b in zip(mem.slots, loaded.slots):
            assert a.frame_index == b.frame_index
            assert a.insert_step == b.insert_step
            assert a.is_ground_truth == b.is_ground_truth
            assert np.array_equal(a.feature.values, b.feature.values)
            assert np.array_equal(a.mask.values, b.mask.values)

    def test_record_size(self, tmp_path):
        mem = SampleMemory(capacity=2)
        mem.insert(slot(0, c=2, h=3, w=3, gt=True))
        path = tmp_path / "memory.bin"
        dump_memory(mem, path)
        # u64 + u64 + u8 + 18 floats + 2 packed mask bytes
        assert path.stat().st_size == 8 + 8 + 1 + 18 * 8 + 2

    def test_truncated_dump_rejected(self, tmp_path):
        path = tmp_path / "memory.bin"
        path.write_bytes(b"\x00" * 13)
        with pytest.raises(ContractViolation):
            load_memory(path, channels=2, height=3, width=3)
