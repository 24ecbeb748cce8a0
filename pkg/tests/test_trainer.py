import numpy as np
import pytest

from driftgate.feature_stream import DriftStream, build_drift_spec
from driftgate.grcl import GateMemory, ImportanceAccumulator, binarize
from driftgate.numerics import ContractViolation, FeatureGrid, MaskGrid, MaskKind, Rng
from driftgate.sample_memory import MemorySlot, SampleMemory
from driftgate.target_model import LossConfig, TargetModel, WeightedSample, pixel_weights, train_update
from driftgate.trainer import (
    Method,
    MethodConfig,
    evaluate,
    evaluate_run,
    forgetting_score,
    jaccard,
    retrospective_jaccard,
    run_stream,
)


def tiny_stream(seed=3, segments=2, frames=8, dims=(4, 8, 8)):
    return DriftStream(build_drift_spec(seed=seed, n_segments=segments,
                                        frames_per_segment=frames, feature_dims=dims))


def mask_from(arr):
    return MaskGrid(np.asarray(arr, dtype=float), MaskKind.BINARY_LABEL)


class TestJaccard:
    def test_identical_masks(self):
        m = mask_from(Rng(0).uniform(size=(5, 5)) > 0.5)
        assert jaccard(m, m) == 1.0

    def test_complement_masks(self):
        a = np.zeros((4, 4))
        a[:2] = 1.0
        assert jaccard(mask_from(a), mask_from(1.0 - a)) == 0.0

    def test_empty_union_scores_one(self):
        empty = mask_from(np.zeros((3, 3)))
        assert jaccard(empty, empty) == 1.0

    def test_matches_set_oracle(self):
        rng = Rng(1)
        for _ in range(20):
            a = rng.uniform(size=(4, 4)) > 0.5
            b = rng.uniform(size=(4, 4)) > 0.5
            sa = {(i, j) for i in range(4) for j in range(4) if a[i, j]}
            sb = {(i, j) for i in range(4) for j in range(4) if b[i, j]}
            want = 1.0 if not (sa | sb) else len(sa & sb) / len(sa | sb)
            assert jaccard(mask_from(a), mask_from(b)) == want


class TestForgettingScore:
    def test_constant_matrix_scores_zero(self):
        assert forgetting_score(np.full((3, 4), 0.7)) == 0.0

    def test_single_drop_contribution(self):
        # one segment drops 0.9 -> 0.2 (0.7 contribution), the other is flat
        m = np.array([[0.9, 0.5], [0.2, 0.5]])
        assert forgetting_score(m) == pytest.approx(0.35)

    def test_matches_direct_recomputation(self):
        m = Rng(2).uniform(size=(5, 4))
        want = float(np.mean([m[:, s].max() - m[-1, s] for s in range(4)]))
        assert forgetting_score(m) == pytest.approx(want, abs=1e-12)

    def test_needs_two_segments(self):
        with pytest.raises(ContractViolation):
            forgetting_score(np.ones((3, 1)))


class TestEvaluate:
    def test_matrix_shape_and_values(self):
        stream = tiny_stream()
        cfg = MethodConfig(method="baseline", update_interval=4, memory_interval=4,
                           memory_capacity=8)
        result = run_stream(stream, cfg, seed=0)
        matrix = evaluate_run(stream, result, holdouts_per_segment=3)
        assert matrix.shape == (2, 2)
        assert ((0.0 <= matrix) & (matrix <= 1.0)).all()
        assert retrospective_jaccard(matrix) == pytest.approx(matrix[-1].mean())

    def test_needs_snapshots(self):
        with pytest.raises(ContractViolation):
            evaluate([], [[]])


class TestCadence:
    def test_update_and_insert_schedule(self):
        stream = tiny_stream(frames=9)
        cfg = MethodConfig(method="baseline", update_interval=3, memory_interval=2,
                           memory_capacity=32)
        result = run_stream(stream, cfg, seed=0)
        frames = [r.frame_index for r in result.reports]
        assert frames[0] == 0  # the ground-truth initialization update
        assert frames[1:] == [f for f in range(1, stream.frame_count) if f % 3 == 0]
        # memory grows only on the insert cadence: at update frame f the
        # memory holds 1 + floor(f / 2) slots (capacity permitting)
        for r in result.reports:
            expected = 1 + r.frame_index // 2
            assert r.memory_size == min(expected, 32)

    def test_huge_update_interval_freezes_the_model_after_init(self):
        stream = tiny_stream(frames=10)
        cfg = MethodConfig(method="baseline", update_interval=10_000, memory_interval=1,
                           memory_capacity=32)
        result = run_stream(stream, cfg, seed=0)
        assert len(result.reports) == 1  # init only
        assert np.array_equal(result.snapshots[0], result.snapshots[-1])

    def test_prediction_count_matches_stream_length(self):
        stream = tiny_stream()
        for method in ("baseline", "grcl"):
            cfg = MethodConfig(method=method, update_interval=2, memory_interval=2,
                               memory_capacity=8)
            result = run_stream(stream, cfg, seed=1)
            assert len(result.predictions) == stream.frame_count
            windows = (stream.frame_count - 1) // 2
            assert len(result.reports) >= 1 + windows  # one per update window


class TestMethodEquivalences:
    def test_baseline_equals_mas_with_zero_gamma_bitwise(self):
        stream = tiny_stream(seed=5)
        a = run_stream(stream, MethodConfig(method="baseline", update_interval=2,
                                            memory_interval=2, memory_capacity=8), seed=3)
        b = run_stream(stream, MethodConfig(method="mas", mas_gamma=0.0, update_interval=2,
                                            memory_interval=2, memory_capacity=8), seed=3)
        assert np.array_equal(a.snapshots[-1], b.snapshots[-1])
        for pa, pb in zip(a.predictions, b.predictions):
            assert np.array_equal(pa.values, pb.values)

    def test_gate_derivation_is_shared_between_grcl_and_hybrid(self):
        # Identical gradient traces must yield identical freeze sets: the
        # hybrid loss reuses the gated term verbatim.
        rng = Rng(7)
        k = 90
        a = (GateMemory(k), ImportanceAccumulator.zeros(k))
        b = (GateMemory(k), ImportanceAccumulator.zeros(k))
        for step in range(10):
            trace = [rng.normal(size=k) for _ in range(3)]
            for mem, acc in (a, b):
                acc.begin_update()
                acc.accumulate(trace)
                mem.maintain(binarize(acc.current, created_step=step))
        assert np.array_equal(a[0].overall_gate().bits, b[0].overall_gate().bits)

    def test_all_ones_gate_freezes_the_model(self):
        # A fully saturated gate memory pins every parameter: training on
        # fresh samples leaves the model bit-identical.
        rng = Rng(8)
        model = TargetModel(rng.normal(size=(1, 3, 3, 3)))
        gate_mem = GateMemory(model.param_count, xi_upper=1.0)
        gate_mem.maintain(binarize(np.ones(model.param_count)))
        frozen = gate_mem.overall_gate()
        assert frozen.popcount == model.param_count
        before = model.weights.copy()
        mask = mask_from(rng.uniform(size=(5, 5)) > 0.5)
        batch = [WeightedSample(feature=FeatureGrid(rng.normal(size=(3, 5, 5))),
                                target=mask, weight=1.0, pixel_weight=pixel_weights(mask))]
        for _ in range(3):
            train_update(model, batch, LossConfig(), freeze_mask=frozen.bits)
            assert np.array_equal(model.weights, before)


class TestMethodBehaviors:
    def test_grcl_reports_gate_fields(self):
        stream = tiny_stream(seed=9)
        result = run_stream(stream, MethodConfig(method="grcl", update_interval=2,
                                                 memory_interval=2, memory_capacity=8), seed=2)
        gate_reports = [r for r in result.reports if r.gate_popcount is not None]
        assert gate_reports, "grcl must report gate sizes"
        k = result.param_count
        upper = 0.15 * k
        for r in gate_reports:
            if r.gate_memory_size and r.gate_memory_size >= 2:
                assert r.gate_popcount <= upper

    def test_freeze_compliance_across_a_run(self):
        stream = tiny_stream(seed=10, segments=2, frames=10)
        cfg = MethodConfig(method="grcl", update_interval=1, memory_interval=1,
                           memory_capacity=8, record_update_weights=True)
        result = run_stream(stream, cfg, seed=4)
        checked = 0
        for r in result.reports:
            if r.freeze_bits is None or not r.freeze_bits.any():
                continue
            frozen = r.freeze_bits.reshape(r.weights_before.shape)
            assert np.array_equal(r.weights_before[frozen], r.weights_after[frozen])
            checked += 1
        assert checked > 0

    def test_rmscl_working_memory_within_memory(self):
        stream = tiny_stream(seed=11)
        result = run_stream(stream, MethodConfig(method="rmscl", update_interval=2,
                                                 memory_interval=2, memory_capacity=8), seed=5)
        for r in result.reports:
            assert r.working_memory_size is not None
            assert r.working_memory_size <= r.memory_size
            assert r.lasso_penalty is not None

    def test_hybrid_reports_both_mechanisms(self):
        stream = tiny_stream(seed=12)
        result = run_stream(stream, MethodConfig(method="hybrid", update_interval=2,
                                                 memory_interval=2, memory_capacity=8), seed=6)
        assert all(r.working_memory_size is not None for r in result.reports)
        assert all(r.gate_popcount is not None for r in result.reports)

    def test_method_accepts_enum_or_string(self):
        assert MethodConfig(method="grcl").method is Method.GRCL
        assert MethodConfig(method=Method.RMSCL).method is Method.RMSCL

    def test_bad_intervals_rejected(self):
        with pytest.raises(ContractViolation):
            MethodConfig(update_interval=0)
