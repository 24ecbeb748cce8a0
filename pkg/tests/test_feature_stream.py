import numpy as np
import pytest

from driftgate.feature_stream import (
    DriftStream,
    DriftStreamSpec,
    ManifestStream,
    build_drift_spec,
    export_manifest,
)
from driftgate.numerics import ContractViolation, MaskGrid, MaskKind, patch_matrix
from driftgate.trainer import jaccard


def tiny_spec(seed=3, segments=2, frames=6, dims=(4, 8, 8), **kw):
    return build_drift_spec(seed=seed, n_segments=segments, frames_per_segment=frames,
                            feature_dims=dims, **kw)


def ls_fit(stream, segment):
    fps = stream.spec.frames_per_segment
    pats, targs = [], []
    for i in range(fps):
        x, y = stream.frame(segment * fps + i)
        pats.append(patch_matrix(x.values))
        targs.append(y.values.ravel())
    v, *_ = np.linalg.lstsq(np.vstack(pats), np.concatenate(targs), rcond=None)
    return v


def probe_jaccard(stream, v, segment, per_segment=21):
    h, w = stream.frame(0)[0].spatial_shape
    scores = []
    for x, y in stream.holdout_frames(segment, per_segment):
        pred = MaskGrid((patch_matrix(x.values) @ v > 0.5).astype(float).reshape(h, w),
                        MaskKind.BINARY_LABEL)
        scores.append(jaccard(pred, y))
    return float(np.mean(scores))


class TestDeterminism:
    def test_noiseless_stream_is_a_pure_function_of_the_index(self):
        spec = tiny_spec(noise_sigma=0.0)
        a, b = DriftStream(spec), DriftStream(spec)
        for i in (0, 3, 7, 11):
            xa, ya = a.frame(i)
            xb, yb = b.frame(i)
            assert np.array_equal(xa.values, xb.values)
            assert np.array_equal(ya.values, yb.values)

    def test_full_regeneration_is_bit_identical(self):
        spec = tiny_spec()
        first = [f for f in DriftStream(spec)]
        second = [f for f in DriftStream(spec)]
        assert len(first) == spec.frame_count
        for (xa, ya), (xb, yb) in zip(first, second):
            assert np.array_equal(xa.values, xb.values)
            assert np.array_equal(ya.values, yb.values)

    def test_random_access_equals_streaming(self):
        spec = tiny_spec(seed=9)
        stream = DriftStream(spec)
        streamed = list(stream)
        for i in (0, 5, spec.frame_count - 1):
            x, y = stream.frame(i)
            assert np.array_equal(x.values, streamed[i][0].values)
            assert np.array_equal(y.values, streamed[i][1].values)


class TestStructure:
    def test_generator_kernels_pairwise_distinct(self):
        spec = tiny_spec(segments=4, dims=(8, 12, 12))
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.array_equal(
                    spec.segments[i].generator_kernel, spec.segments[j].generator_kernel
                )

    def test_duplicate_kernels_rejected(self):
        spec = tiny_spec()
        with pytest.raises(ContractViolation):
            DriftStreamSpec(
                segments=[spec.segments[0], spec.segments[0]],
                frames_per_segment=4,
                feature_dims=spec.feature_dims,
                noise_sigma=0.1,
                seed=1,
            )

    def test_exhausted_stream_signals_end(self):
        stream = DriftStream(tiny_spec())
        it = iter(stream)
        for _ in range(stream.frame_count):
            next(it)
        with pytest.raises(StopIteration):
            next(it)

    def test_out_of_range_frame_rejected(self):
        stream = DriftStream(tiny_spec())
        with pytest.raises(ContractViolation):
            stream.frame(stream.frame_count)


class TestHoldouts:
    def test_counts(self):
        stream = DriftStream(tiny_spec(segments=3))
        assert sum(len(stream.holdout_frames(s, 1)) for s in range(3)) == 3
        assert len(stream.holdout_frames(0)) == 21  # paper's labelled-frame count

    def test_repeatable(self):
        spec = tiny_spec(seed=21)
        a = DriftStream(spec).holdout_frames(1, 5)
        b = DriftStream(spec).holdout_frames(1, 5)
        for (xa, ya), (xb, yb) in zip(a, b):
            assert np.array_equal(xa.values, xb.values)
            assert np.array_equal(ya.values, yb.values)

    def test_distinct_noise_from_stream_frames(self):
        spec = tiny_spec(seed=4)
        stream = DriftStream(spec)
        (x_hold, _), = stream.holdout_frames(0, 1)
        mid = stream.frame(spec.frames_per_segment // 2)[0]
        assert not np.array_equal(x_hold.values, mid.values)


class TestMaskBalance:
    def test_every_default_frame_is_two_sided(self):
        stream = DriftStream(build_drift_spec())
        for i in range(stream.frame_count):
            frac = stream.frame(i)[1].values.mean()
            assert 0.05 <= frac <= 0.95


class TestSeparability:
    def test_default_spec_probe_matrix(self):
        # Least-squares probes fit on one segment must almost solve it and
        # stay near chance elsewhere (the drift actually changes the task).
        stream = DriftStream(build_drift_spec())
        probes = [ls_fit(stream, s) for s in range(stream.segment_count)]
        for i, v in enumerate(probes):
            for t in range(stream.segment_count):
                j = probe_jaccard(stream, v, t)
                if i == t:
                    assert j >= 0.9, f"probe {i} scored {j:.3f} on its own segment"
                else:
                    assert j <= 0.5, f"probe {i} scored {j:.3f} on segment {t}"

    def test_orthogonal_segments_do_not_transfer(self):
        # With no shared signature component a model fit to segment 0
        # scores at chance on segment 1's first frame. The probe is
        # ridge-regularized so it cannot memorize noise directions.
        spec = tiny_spec(seed=6, segments=2, frames=12, dims=(6, 12, 12),
                         shared_fraction=0.0, noise_sigma=0.1)
        stream = DriftStream(spec)
        pats, targs = [], []
        for i in range(spec.frames_per_segment):
            x, y = stream.frame(i)
            pats.append(patch_matrix(x.values))
            targs.append(y.values.ravel())
        a = np.vstack(pats)
        b = np.concatenate(targs)
        v = np.linalg.solve(a.T @ a + 5.0 * np.eye(a.shape[1]), a.T @ b)
        x, y = stream.frame(spec.frames_per_segment)  # first drifted frame
        pred = MaskGrid((patch_matrix(x.values) @ v > 0.5).astype(float).reshape(12, 12),
                        MaskKind.BINARY_LABEL)
        assert jaccard(pred, y) <= 0.5
        assert probe_jaccard(stream, v, 0, per_segment=7) >= 0.85


class TestManifest:
    def test_roundtrip(self, tmp_path):
        spec = tiny_spec(seed=8)
        stream = DriftStream(spec)
        manifest = export_manifest(stream, tmp_path, name="probe", holdouts_per_segment=4)
        loaded = ManifestStream(manifest)
        assert loaded.frame_count == stream.frame_count
        assert loaded.segment_starts == stream.segment_starts
        for i in range(stream.frame_count):
            xs, ys = stream.frame(i)
            xl, yl = loaded.frame(i)
            assert np.array_equal(xs.values, xl.values)
            assert np.array_equal(ys.values, yl.values)
        for seg in range(stream.segment_count):
            src = stream.holdout_frames(seg, 4)
            got = loaded.holdout_frames(seg, 4)
            for (xa, ya), (xb, yb) in zip(src, got):
                assert np.array_equal(xa.values, xb.values)
                assert np.array_equal(ya.values, yb.values)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("version = 99\nchannels = 1\nheight = 1\nwidth = 1\n"
                        'frame_count = 0\nsegment_starts = [0]\nrecords = "x"\n')
        with pytest.raises(ContractViolation):
            ManifestStream(path)

    def test_missing_holdouts_flagged(self, tmp_path):
        spec = tiny_spec(seed=10)
        stream = DriftStream(spec)
        manifest = export_manifest(stream, tmp_path, name="probe", holdouts_per_segment=2)
        loaded = ManifestStream(manifest)
        with pytest.raises(ContractViolation):
            loaded.holdout_frames(0, 10)  # more than stored
