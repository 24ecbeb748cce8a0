"""Reconstruction-based memory selection.

Before a model update, the upcoming frame's channel-max-pooled feature is
reconstructed as a nonnegative sparse combination of the pooled memory
features. The slots with positive coefficients form the working memory and
their coefficients replace the temporal weights in the training loss. The
sparsity penalty is chosen per update by AIC over a warm-started
log-spaced grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

try:
    from numba import njit
except ModuleNotFoundError:  # pragma: no cover - numba is a normal install
    njit = None

from .numerics import ContractViolation, FeatureGrid, channel_max_pool
from .sample_memory import MemorySlot, SampleMemory

MAX_SWEEPS = 10_000
COORD_TOL = 1e-8
RSS_FLOOR = 1e-300

# Default grid: 30 log-spaced penalties from the largest useful value down
# four decades; a floor weight of 10% of the largest selected coefficient
# keeps the ground-truth sample influential.
GRID_SIZE = 30
GRID_DECADES = 4
GROUND_TRUTH_WEIGHT_RATIO = 0.1


@dataclass
class LassoProblem:
    """min_psi 0.5 * ||target - dictionary @ psi||^2 + penalty * sum(psi), psi >= 0.

    ``dictionary`` is (dims, columns); each column is one flattened pooled
    memory feature.
    """

    dictionary: np.ndarray
    target: np.ndarray
    penalty: float

    def __post_init__(self):
        d = np.asarray(self.dictionary, dtype=np.float64)
        t = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if d.ndim != 2 or d.shape[1] < 1:
            raise ContractViolation("dictionary must be a (dims, columns) matrix")
        if d.shape[0] != t.size:
            raise ContractViolation(
                f"target has {t.size} dims, dictionary rows are {d.shape[0]}"
            )
        if not (np.isfinite(d).all() and np.isfinite(t).all()):
            raise ContractViolation("lasso inputs must be finite")
        if self.penalty < 0:
            raise ContractViolation("penalty must be nonnegative")
        self.dictionary = d
        self.target = t


def _cd_sweeps(gram, corr, z, lam, psi, tol, max_sweeps):
    """Cyclic sweeps over all coordinates; returns after the first sweep whose
    largest coordinate change is below tol, or after max_sweeps."""
    m = psi.size
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(m):
            zj = z[j]
            if zj <= 0.0:
                continue
            acc = 0.0
            for l in range(m):
                acc += gram[j, l] * psi[l]
            rho = corr[j] - acc + zj * psi[j]
            new = (rho - lam) / zj
            if new < 0.0:
                new = 0.0
            change = abs(new - psi[j])
            if change > biggest:
                biggest = change
            psi[j] = new
        if biggest < tol:
            break
    return psi


if njit is not None:
    _cd_sweeps = njit(cache=True)(_cd_sweeps)


def solve_nn_lasso(problem: LassoProblem, warm_start: Optional[np.ndarray] = None) -> np.ndarray:
    """Cyclic coordinate descent for the nonnegative LASSO.

    Each coordinate takes its exact minimizer max(0, (rho_j - penalty) / z_j)
    where rho_j is the partial-residual correlation and z_j the squared
    column norm. Zero-norm columns stay at 0. Stops when the largest
    coordinate change in a sweep falls below 1e-8, or after 10,000 sweeps.
    """
    d, y, lam = problem.dictionary, problem.target, problem.penalty
    m = d.shape[1]
    z = np.einsum("ij,ij->j", d, d)
    psi = np.zeros(m) if warm_start is None else np.array(warm_start, dtype=np.float64)
    if psi.size != m:
        raise ContractViolation("warm start length does not match the column count")
    psi[z == 0.0] = 0.0
    if not z.any():
        return psi

    gram = np.ascontiguousarray(d.T @ d)
    corr = d.T @ y
    return _cd_sweeps(gram, corr, z, float(lam), psi, COORD_TOL, MAX_SWEEPS)


def default_penalty_grid(dictionary: np.ndarray, target: np.ndarray) -> np.ndarray:
    """30 log-spaced penalties descending from max_j |D_j . target| over 4 decades."""
    top = float(np.max(np.abs(np.asarray(dictionary).T @ np.asarray(target))))
    if top <= 0.0:
        return np.array([0.0])
    return np.geomspace(top, top * 10.0 ** (-GRID_DECADES), GRID_SIZE)


def select_lambda_aic(
    dictionary: np.ndarray,
    target: np.ndarray,
    penalty_grid: Optional[Sequence[float]] = None,
) -> tuple[float, np.ndarray]:
    """Pick the penalty minimizing AIC = n*ln(RSS/n) + 2k along a warm-started path.

    k counts strictly positive coefficients; ties break toward the larger
    (sparser) penalty. RSS is floored at 1e-300 so exact reconstructions
    stay finite.
    """
    d = np.asarray(dictionary, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    grid = default_penalty_grid(d, y) if penalty_grid is None else np.asarray(penalty_grid, float)
    if grid.size == 0:
        raise ContractViolation("penalty grid must be nonempty")
    grid = np.sort(grid)[::-1]  # descending for warm starts

    n = y.size
    best_aic = math.inf
    best: tuple[float, np.ndarray] | None = None
    psi = np.zeros(d.shape[1])
    for lam in grid:
        psi = solve_nn_lasso(LassoProblem(d, y, float(lam)), warm_start=psi)
        resid = y - d @ psi
        rss = max(float(resid @ resid), RSS_FLOOR)
        k = int(np.count_nonzero(psi > 0.0))
        aic = n * math.log(rss / n) + 2.0 * k
        if aic < best_aic:
            best_aic = aic
            best = (float(lam), psi.copy())
    assert best is not None
    return best


@dataclass
class WorkingMemory:
    """Slots selected for one update, each paired with a positive weight."""

    entries: list[tuple[MemorySlot, float]]
    lasso_penalty: float
    fallback: bool = False

    def __len__(self) -> int:
        return len(self.entries)


def pooled_column(feature: FeatureGrid) -> np.ndarray:
    return channel_max_pool(feature).values.ravel()


def build_working_memory(
    mem: SampleMemory,
    next_feature: FeatureGrid,
    fallback_decay_base: float = 1.0,
) -> WorkingMemory:
    """Select and weight memory slots by reconstructing the upcoming feature.

    Slots with positive reconstruction coefficients are kept; the
    ground-truth slot is always included, at no less than 10% of the
    largest selected weight. If every coefficient is zero, the whole memory
    is returned with temporal-decay weights and the fallback is flagged.
    """
    if len(mem) == 0:
        raise ContractViolation("cannot build a working memory from an empty memory")
    dictionary = np.stack([pooled_column(s.feature) for s in mem.slots], axis=1)
    target = pooled_column(next_feature)
    lam, psi = select_lambda_aic(dictionary, target)

    if not (psi > 0.0).any():
        weights = mem.temporal_weights(fallback_decay_base)
        return WorkingMemory(
            entries=[(s, float(w)) for s, w in zip(mem.slots, weights)],
            lasso_penalty=lam,
            fallback=True,
        )

    floor = GROUND_TRUTH_WEIGHT_RATIO * float(psi.max())
    entries = []
    for slot, coef in zip(mem.slots, psi):
        if slot.is_ground_truth:
            entries.append((slot, max(float(coef), floor)))
        elif coef > 0.0:
            entries.append((slot, float(coef)))
    return WorkingMemory(entries=entries, lasso_penalty=lam)
