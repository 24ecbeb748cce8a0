"""Synthetic drift streams and file-based stream ingestion.

A stream emits (feature, mask) frames. Features are a translated object
pattern over a zero background plus Gaussian noise; masks come from a hidden
per-segment generator kernel thresholded over the noisy feature. At segment
boundaries the object signature and kernel switch abruptly (optionally
blended for gradual drift), which is what drives forgetting downstream.

Frames are pure functions of (spec, frame index): every frame's noise comes
from its own seeded substream, so random access equals streaming and two
streams with equal seeds are bit-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .numerics import ContractViolation, FeatureGrid, MaskGrid, MaskKind, Rng, conv2d

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

MANIFEST_VERSION = 1

# Substream tags; frame noise must never share draws with structure.
_TAG_STRUCTURE = 0
_TAG_FRAME_NOISE = 1
_TAG_HOLDOUT_NOISE = 2


@dataclass
class SegmentSpec:
    """One drift segment: hidden mask generator, object pattern, motion."""

    generator_kernel: np.ndarray  # (C_gen, C, 3, 3)
    object_pattern: np.ndarray  # (C, H, W), noiseless, at offset (0, 0)
    translation_path: list[tuple[int, int]]  # per-frame (dy, dx), wrapped
    threshold: float

    def __post_init__(self):
        self.generator_kernel = np.asarray(self.generator_kernel, dtype=np.float64)
        self.object_pattern = np.asarray(self.object_pattern, dtype=np.float64)
        if self.generator_kernel.ndim != 4 or self.generator_kernel.shape[2:] != (3, 3):
            raise ContractViolation("generator kernel must be (C_gen, C, 3, 3)")
        if self.generator_kernel.shape[1] != self.object_pattern.shape[0]:
            raise ContractViolation("generator kernel channels do not match the pattern")


@dataclass
class DriftStreamSpec:
    segments: list[SegmentSpec]
    frames_per_segment: int
    feature_dims: tuple[int, int, int]  # (C, H, W)
    noise_sigma: float
    seed: int
    gradual: bool = False

    def __post_init__(self):
        if not self.segments:
            raise ContractViolation("a drift stream needs at least one segment")
        if self.frames_per_segment < 1:
            raise ContractViolation("frames_per_segment must be positive")
        if self.noise_sigma < 0:
            raise ContractViolation("noise_sigma must be nonnegative")
        for a in range(len(self.segments)):
            for b in range(a + 1, len(self.segments)):
                if np.array_equal(
                    self.segments[a].generator_kernel, self.segments[b].generator_kernel
                ):
                    raise ContractViolation("segment generator kernels must be pairwise distinct")

    @property
    def frame_count(self) -> int:
        return len(self.segments) * self.frames_per_segment


def _orthonormal_vectors(rng: Rng, n: int, channels: int) -> np.ndarray:
    """n orthonormal channel vectors via Gram-Schmidt on seeded draws."""
    if n > channels:
        raise ContractViolation(f"cannot draw {n} orthonormal vectors in {channels} channels")
    out: list[np.ndarray] = []
    attempts = 0
    while len(out) < n:
        v = rng.normal(size=channels)
        for u in out:
            v -= (v @ u) * u
        norm = np.linalg.norm(v)
        attempts += 1
        if attempts > 200 * n:
            raise ContractViolation("could not draw independent signature directions")
        if norm < 1e-6:
            continue
        out.append(v / norm)
    return np.stack(out)


def _draw_signatures(rng: Rng, n: int, channels: int, shared_fraction: float) -> np.ndarray:
    """Unit signatures sig_s = sqrt(shared) * u + sqrt(1-shared) * v_s.

    All pairs share the common direction u with cos = shared_fraction; the
    private parts v_s are mutually orthogonal. The shared component is what
    lets a model fitted on one segment partially detect the next segment's
    object (so self-training can re-ignite after a drift), while the private
    parts keep fitted models segment-specific.
    """
    if not 0.0 <= shared_fraction < 1.0:
        raise ContractViolation("shared_fraction must lie in [0, 1)")
    basis = _orthonormal_vectors(rng, n + 1, channels)
    shared, privates = basis[0], basis[1:]
    return np.sqrt(shared_fraction) * shared + np.sqrt(1.0 - shared_fraction) * privates


def build_drift_spec(
    seed: int = 7,
    n_segments: int = 4,
    frames_per_segment: int = 31,
    feature_dims: tuple[int, int, int] = (16, 16, 16),
    noise_sigma: float = 0.15,
    amplitude: float = 1.0,
    shared_fraction: float = 0.45,
    gradual: bool = False,
) -> DriftStreamSpec:
    """Deterministically construct a drift spec from a seed.

    Per segment: a unit signature vector paints a rectangle over a zero
    background; the hidden generator kernel is that signature times a 3x3
    averaging blur, so the noiseless in-object response equals ``amplitude``
    and the mask threshold sits at half of it. ``shared_fraction`` sets the
    cross-segment signature overlap (0 makes segments fully orthogonal).
    """
    c, h, w = feature_dims
    if h < 8 or w < 8:
        raise ContractViolation("stream spatial dims must be at least 8x8")
    if c <= n_segments:
        raise ContractViolation(
            f"{n_segments} segments need more than {n_segments} channels for "
            f"independent signatures; got {c}"
        )
    rng = Rng(seed).substream(_TAG_STRUCTURE)
    signatures = _draw_signatures(rng.substream(0), n_segments, c, shared_fraction)
    blur = np.full((3, 3), 1.0 / 9.0)

    segments = []
    for s in range(n_segments):
        seg_rng = rng.substream(1 + s)
        rect_h = int(seg_rng.integers(7, min(11, h)))
        rect_w = int(seg_rng.integers(7, min(11, w)))
        y0 = int(seg_rng.integers(0, h))
        x0 = int(seg_rng.integers(0, w))
        vel = (0, 0)
        while vel == (0, 0):
            vel = (int(seg_rng.integers(-2, 3)), int(seg_rng.integers(-2, 3)))

        pattern = np.zeros((c, h, w))
        rows = (y0 + np.arange(rect_h)) % h
        cols = (x0 + np.arange(rect_w)) % w
        # Amplitude ramp across the object: keeps every pixel's in-segment
        # response well above the mask threshold while guaranteeing that the
        # cross-segment response (scaled by the shared fraction) straddles
        # it, so a drifted model always detects part of the new object even
        # when ridge decay has depressed its gain.
        ramp = np.linspace(0.8, 1.45, rect_h)[:, None] * np.ones((1, rect_w))
        pattern[:, rows[:, None], cols[None, :]] = (
            amplitude * ramp[None, :, :] * signatures[s][:, None, None]
        )

        kernel = (signatures[s][None, :, None, None] * blur[None, None, :, :]).copy()
        path = [((vel[0] * l) % h, (vel[1] * l) % w) for l in range(frames_per_segment)]
        segments.append(
            SegmentSpec(
                generator_kernel=kernel,
                object_pattern=pattern,
                translation_path=path,
                threshold=0.5 * amplitude,
            )
        )
    return DriftStreamSpec(
        segments=segments,
        frames_per_segment=frames_per_segment,
        feature_dims=(c, h, w),
        noise_sigma=noise_sigma,
        seed=seed,
        gradual=gradual,
    )


class DriftStream:
    """Replayable synthetic stream over a DriftStreamSpec."""

    def __init__(self, spec: DriftStreamSpec):
        self.spec = spec
        self._noise_rng_root = Rng(spec.seed)
        self._cursor = 0

    @property
    def frame_count(self) -> int:
        return self.spec.frame_count

    @property
    def segment_count(self) -> int:
        return len(self.spec.segments)

    @property
    def segment_starts(self) -> list[int]:
        return [s * self.spec.frames_per_segment for s in range(self.segment_count)]

    @property
    def feature_dims(self) -> tuple[int, int, int]:
        return self.spec.feature_dims

    def segment_of(self, index: int) -> int:
        return index // self.spec.frames_per_segment

    def _base_pattern(self, index: int) -> tuple[np.ndarray, np.ndarray, float]:
        """Noiseless translated pattern, generator kernel, threshold at `index`."""
        spec = self.spec
        seg = self.segment_of(index)
        local = index % spec.frames_per_segment
        segment = spec.segments[seg]
        dy, dx = segment.translation_path[local]
        pattern = np.roll(segment.object_pattern, (dy, dx), axis=(1, 2))
        kernel = segment.generator_kernel
        if spec.gradual and seg + 1 < len(spec.segments):
            blend_window = max(1, spec.frames_per_segment // 5)
            into = local - (spec.frames_per_segment - blend_window)
            if into >= 0:
                alpha = (into + 1) / (blend_window + 1)
                nxt = spec.segments[seg + 1]
                nxt_pattern = np.roll(nxt.object_pattern, (dy, dx), axis=(1, 2))
                pattern = (1 - alpha) * pattern + alpha * nxt_pattern
                kernel = (1 - alpha) * kernel + alpha * nxt.generator_kernel
        return pattern, kernel, segment.threshold

    def _emit(self, index: int, noise_rng: Rng) -> tuple[FeatureGrid, MaskGrid]:
        pattern, kernel, threshold = self._base_pattern(index)
        noise = noise_rng.normal(0.0, self.spec.noise_sigma, pattern.shape)
        feature = FeatureGrid(pattern + noise)
        score = conv2d(feature, kernel).values.sum(axis=0)
        mask = MaskGrid((score > threshold).astype(np.float64), MaskKind.BINARY_LABEL)
        return feature, mask

    def frame(self, index: int) -> tuple[FeatureGrid, MaskGrid]:
        """Random access; regenerating any index is bit-identical to streaming."""
        if not 0 <= index < self.frame_count:
            raise ContractViolation(f"frame index {index} outside [0, {self.frame_count})")
        rng = self._noise_rng_root.substream(_TAG_FRAME_NOISE).substream(index)
        return self._emit(index, rng)

    def holdout_frames(self, segment: int, per_segment: int = 21) -> list[tuple[FeatureGrid, MaskGrid]]:
        """Deterministic held-out frames for one segment, with fresh noise draws."""
        if per_segment < 1:
            raise ContractViolation("per_segment must be >= 1")
        if not 0 <= segment < self.segment_count:
            raise ContractViolation(f"segment {segment} outside [0, {self.segment_count})")
        fps = self.spec.frames_per_segment
        if per_segment == 1:
            locals_ = [fps // 2]
        else:
            locals_ = [round(j * (fps - 1) / (per_segment - 1)) for j in range(per_segment)]
        frames = []
        for j, local in enumerate(locals_):
            rng = (
                self._noise_rng_root.substream(_TAG_HOLDOUT_NOISE)
                .substream(segment)
                .substream(j)
            )
            frames.append(self._emit(segment * fps + local, rng))
        return frames

    def __iter__(self) -> Iterator[tuple[FeatureGrid, MaskGrid]]:
        self._cursor = 0
        return self

    def __next__(self) -> tuple[FeatureGrid, MaskGrid]:
        if self._cursor >= self.frame_count:
            raise StopIteration
        out = self.frame(self._cursor)
        self._cursor += 1
        return out


def _write_record(fh, frame_index: int, is_gt: bool, feature: FeatureGrid, mask: MaskGrid):
    fh.write(np.uint64(frame_index).tobytes())
    fh.write(np.uint64(0).tobytes())
    fh.write(np.uint8(1 if is_gt else 0).tobytes())
    fh.write(feature.values.astype("<f8").tobytes())
    bits = (mask.values.ravel() > 0.5).astype(np.uint8)
    fh.write(np.packbits(bits, bitorder="little").tobytes())


def _read_records(path, channels: int, height: int, width: int):
    feat_bytes = channels * height * width * 8
    mask_bytes = (height * width + 7) // 8
    record = 17 + feat_bytes + mask_bytes
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % record != 0:
        raise ContractViolation(f"record file size {len(raw)} not a multiple of {record}")
    frames = []
    for off in range(0, len(raw), record):
        feat = np.frombuffer(raw, "<f8", count=channels * height * width, offset=off + 17)
        packed = np.frombuffer(raw, np.uint8, count=mask_bytes, offset=off + 17 + feat_bytes)
        bits = np.unpackbits(packed, bitorder="little")[: height * width]
        frames.append(
            (
                FeatureGrid(feat.reshape(channels, height, width).copy()),
                MaskGrid(bits.astype(np.float64).reshape(height, width), MaskKind.BINARY_LABEL),
            )
        )
    return frames


def export_manifest(stream: DriftStream, out_dir, name: str = "stream", holdouts_per_segment: int = 21) -> str:
    """Write a stream to disk as a manifest plus binary frame/holdout records.

    Records share the sample-memory dump layout. Returns the manifest path.
    """
    os.makedirs(out_dir, exist_ok=True)
    records_name = f"{name}.records"
    holdouts_name = f"{name}.holdouts"
    with open(os.path.join(out_dir, records_name), "wb") as fh:
        for i in range(stream.frame_count):
            feature, mask = stream.frame(i)
            _write_record(fh, i, i == 0, feature, mask)
    with open(os.path.join(out_dir, holdouts_name), "wb") as fh:
        for segment in range(stream.segment_count):
            for feature, mask in stream.holdout_frames(segment, holdouts_per_segment):
                _write_record(fh, segment, False, feature, mask)

    c, h, w = stream.feature_dims
    manifest_path = os.path.join(out_dir, f"{name}.toml")
    boundaries = ", ".join(str(b) for b in stream.segment_starts)
    with open(manifest_path, "w") as fh:
        fh.write(
            "\n".join(
                [
                    f"version = {MANIFEST_VERSION}",
                    f"channels = {c}",
                    f"height = {h}",
                    f"width = {w}",
                    f"frame_count = {stream.frame_count}",
                    f"segment_starts = [{boundaries}]",
                    f'records = "{records_name}"',
                    f'holdouts = "{holdouts_name}"',
                    f"holdouts_per_segment = {holdouts_per_segment}",
                    "",
                ]
            )
        )
    return manifest_path


class ManifestStream:
    """Stream ingested from a manifest file; same interface as DriftStream."""

    def __init__(self, manifest_path):
        with open(manifest_path, "rb") as fh:
            meta = tomllib.load(fh)
        if meta.get("version") != MANIFEST_VERSION:
            raise ContractViolation(f"unsupported manifest version {meta.get('version')}")
        base = os.path.dirname(os.path.abspath(manifest_path))
        c, h, w = int(meta["channels"]), int(meta["height"]), int(meta["width"])
        self.feature_dims = (c, h, w)
        self._frames = _read_records(os.path.join(base, meta["records"]), c, h, w)
        if len(self._frames) != int(meta["frame_count"]):
            raise ContractViolation("manifest frame_count does not match the record file")
        self.segment_starts = [int(b) for b in meta["segment_starts"]]
        if not self.segment_starts or self.segment_starts[0] != 0:
            raise ContractViolation("segment_starts must begin at 0")
        self._holdouts: Optional[list] = None
        self._holdouts_per_segment = int(meta.get("holdouts_per_segment", 0))
        if "holdouts" in meta and self._holdouts_per_segment > 0:
            flat = _read_records(os.path.join(base, meta["holdouts"]), c, h, w)
            per = self._holdouts_per_segment
            if len(flat) != per * self.segment_count:
                raise ContractViolation("holdout record count does not match the manifest")
            self._holdouts = [flat[s * per : (s + 1) * per] for s in range(self.segment_count)]
        self._cursor = 0

    @property
    def frame_count(self) -> int:
        return len(self._frames)

    @property
    def segment_count(self) -> int:
        return len(self.segment_starts)

    def segment_of(self, index: int) -> int:
        seg = 0
        for s, start in enumerate(self.segment_starts):
            if index >= start:
                seg = s
        return seg

    def frame(self, index: int) -> tuple[FeatureGrid, MaskGrid]:
        if not 0 <= index < self.frame_count:
            raise ContractViolation(f"frame index {index} outside [0, {self.frame_count})")
        return self._frames[index]

    def holdout_frames(self, segment: int, per_segment: int = 21):
        if self._holdouts is None:
            raise ContractViolation("this manifest carries no holdout records")
        stored = self._holdouts[segment]
        if per_segment > len(stored):
            raise ContractViolation(
                f"manifest stores {len(stored)} holdouts per segment, {per_segment} requested"
            )
        return stored[:per_segment]

    def __iter__(self):
        self._cursor = 0
        return self

    def __next__(self):
        if self._cursor >= self.frame_count:
            raise StopIteration
        out = self._frames[self._cursor]
        self._cursor += 1
        return out
