"""Dense-array primitives shared by every other module.

Feature/mask containers, 3x3 zero-padded convolution, channel max pooling,
nearest-rank percentiles, and a reproducible RNG. Everything here is a pure
function over immutable inputs; arrays are float64 and laid out row-major
(channel, row, column) so that file I/O is bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ContractViolation(ValueError):
    """Raised when an operation's preconditions are not met."""


class MaskKind(Enum):
    BINARY_LABEL = "binary-label"
    SCORE_MAP = "score-map"


def _as_float_array(values, shape) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64).reshape(shape)
    if not np.isfinite(arr).all():
        raise ContractViolation("values must be finite (no NaN/Inf)")
    return arr


@dataclass(frozen=True)
class FeatureGrid:
    """A C x H x W real-valued feature map. Treated as immutable."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ContractViolation(
                f"feature grid must be (C, H, W), got shape {self.values.shape}"
            )
        object.__setattr__(self, "values", _as_float_array(self.values, self.values.shape))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass(frozen=True)
class MaskGrid:
    """An H x W mask: binary labels or raw score maps."""

    values: np.ndarray
    kind: MaskKind = MaskKind.SCORE_MAP

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractViolation(
                f"mask grid must be (H, W), got shape {self.values.shape}"
            )
        arr = _as_float_array(self.values, self.values.shape)
        if self.kind is MaskKind.BINARY_LABEL and not np.isin(arr, (0.0, 1.0)).all():
            raise ContractViolation("binary-label mask must contain only 0 and 1")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def thresholded(self, cut: float = 0.5) -> "MaskGrid":
        """Binarize a score map at `cut` (strictly greater counts as target)."""
        return MaskGrid((self.values > cut).astype(np.float64), MaskKind.BINARY_LABEL)


class Rng:
    """Seeded random source; equal seeds give equal sequences on any platform.

    Thin wrapper over numpy's PCG64 generator. `substream(tag)` derives an
    independent child stream deterministically from (seed, tag), so separate
    concerns (stream noise, model init, ...) never share draws.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._spawn_key = _spawn_key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_spawn_key))
        )

    def substream(self, tag: int) -> "Rng":
        return Rng(self.seed, self._spawn_key + (int(tag),))

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)


def patch_matrix(values: np.ndarray) -> np.ndarray:
    """Unfold a (C, H, W) array into 3x3 zero-padded patches.

    Returns an (H*W, C*9) matrix whose row (i*W + j) holds the patch centered
    at pixel (i, j), ordered channel-major then kernel row, kernel column --
    the same order as a (C_out, C, 3, 3) kernel flattened to (C_out, C*9).
    """
    c, h, w = values.shape
    padded = np.pad(values, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(h * w, c * 9)


def conv2d(x: FeatureGrid, kernel: np.ndarray) -> FeatureGrid:
    """Cross-correlate `x` with a (C_out, C_in, 3, 3) kernel, zero padding 1.

    Output is (C_out, H, W); padding 1 preserves the spatial shape.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ContractViolation(f"kernel must be (C_out, C_in, 3, 3), got {kernel.shape}")
    if kernel.shape[1] != x.channels:
        raise ContractViolation(
            f"kernel expects {kernel.shape[1]} input channels, feature has {x.channels}"
        )
    c_out = kernel.shape[0]
    h, w = x.spatial_shape
    out = patch_matrix(x.values) @ kernel.reshape(c_out, -1).T  # (H*W, C_out)
    return FeatureGrid(out.T.reshape(c_out, h, w))


def channel_max_pool(x: FeatureGrid) -> FeatureGrid:
    """Collapse C x H x W to 1 x H x W by the per-pixel maximum over channels."""
    return FeatureGrid(x.values.max(axis=0, keepdims=True))


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ascending-sorted element at ceil(p/100 * n) - 1.

    The index is clamped to [0, n-1]; no interpolation.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ContractViolation("percentile of an empty list is undefined")
    if not 0.0 < p < 100.0:
        raise ContractViolation("p must lie in the open interval (0, 100)")
    idx = min(max(math.ceil(p / 100.0 * arr.size) - 1, 0), arr.size - 1)
    return float(np.sort(arr)[idx])
