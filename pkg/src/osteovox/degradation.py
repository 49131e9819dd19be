"""Surface-resorption surrogate for month-by-month bone loss in microgravity.

Every month a fraction ``r(t) = r0 * exp(-decay * (t - 1))`` of the current
mineral voxels is removed, sampled uniformly from the mineral surface. The
decay constant is calibrated so the cumulative loss after a horizon matches
a target (35% over 36 months by default), with 2% loss in the first month.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .voxel import MARROW, MINERAL, DomainError, VoxelGrid

DEFAULT_R0 = 0.02
DEFAULT_TARGET_LOSS = 0.35
MAX_MONTHS = 36


def total_loss(r0: float, decay: float, months: int) -> float:
    """Cumulative relative loss ``1 - prod(1 - r0 * exp(-decay * (t - 1)))`` over ``months``."""
    t = np.arange(months, dtype=np.float64)
    return float(1.0 - np.prod(1.0 - r0 * np.exp(-decay * t)))


def calibrate_lambda(r0: float = DEFAULT_R0, target_total_loss: float = DEFAULT_TARGET_LOSS,
                     months: int = MAX_MONTHS, tol: float = 1e-12) -> float:
    """Decay constant giving ``target_total_loss`` after ``months`` (bisection)."""
    if not 0.0 < r0 < 1.0:
        raise DomainError(f"r0 must lie in (0, 1), got {r0}")
    if months < 1 or not 0.0 < target_total_loss < 1.0:
        raise DomainError(f"need months >= 1 and target in (0, 1), got {months}, {target_total_loss}")
    if months * r0 < target_total_loss:
        raise DomainError(f"target loss {target_total_loss} unreachable: months * r0 = {months * r0}")
    at_zero = total_loss(r0, 0.0, months)
    if math.isclose(at_zero, target_total_loss, rel_tol=0.0, abs_tol=1e-12):
        return 0.0
    if at_zero < target_total_loss:
        raise DomainError(f"target loss {target_total_loss} exceeds the constant-rate loss {at_zero:.6f}")
    lo, hi = 0.0, 1.0
    while total_loss(r0, hi, months) > target_total_loss:
        hi *= 2.0
    # loss is strictly decreasing in the decay constant
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if total_loss(r0, mid, months) > target_total_loss:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class DegradationParams:
    r0: float = DEFAULT_R0
    rate_decay: float = 0.0
    months: int = MAX_MONTHS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.r0 < 1.0:
            raise DomainError(f"r0 must lie in (0, 1), got {self.r0}")
        if self.rate_decay < 0:
            raise DomainError(f"rate_decay must be >= 0, got {self.rate_decay}")
        if not 0 <= self.months <= MAX_MONTHS:
            raise DomainError(f"months must lie in [0, {MAX_MONTHS}], got {self.months}")

    @classmethod
    def calibrated(cls, r0=DEFAULT_R0, target_total_loss=DEFAULT_TARGET_LOSS, months=MAX_MONTHS, seed=0,
                   calibration_months=MAX_MONTHS):
        """Parameters whose decay is fitted over ``calibration_months`` (36 by default)."""
        return cls(r0, calibrate_lambda(r0, target_total_loss, calibration_months), months, seed)

    def monthly_rate(self, t: int) -> float:
        return self.r0 * math.exp(-self.rate_decay * (t - 1))


@dataclass
class EvolutionSequence:
    frames: list
    params: DegradationParams | None = None
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise DomainError("an evolution sequence needs at least one frame")
        dims = self.frames[0].dims
        if any(f.dims != dims for f in self.frames):
            raise DomainError("all frames of a sequence must share dims")

    def __len__(self):
        return len(self.frames)

    @property
    def dims(self):
        return self.frames[0].dims

    @property
    def n_phases(self):
        return self.frames[0].n_phases

    def mineral_counts(self) -> list[int]:
        return [f.count(MINERAL) for f in self.frames]


def _surface_mask(labels: np.ndarray) -> np.ndarray:
    mineral = labels == MINERAL
    marrow = labels != MINERAL
    touch = np.zeros_like(mineral)
    touch[1:] |= marrow[:-1]
    touch[:-1] |= marrow[1:]
    touch[:, 1:] |= marrow[:, :-1]
    touch[:, :-1] |= marrow[:, 1:]
    touch[:, :, 1:] |= marrow[:, :, :-1]
    touch[:, :, :-1] |= marrow[:, :, 1:]
    return mineral & touch


def surface_voxels(grid: VoxelGrid) -> np.ndarray:
    """(M, 3) coordinates of mineral voxels with a face-adjacent non-mineral voxel.

    The domain boundary does not count as marrow.
    """
    return np.argwhere(_surface_mask(grid.array))


def remove_surface_voxels(grid: VoxelGrid, quota: int, rng: np.random.Generator) -> VoxelGrid:
    """Remove ``quota`` mineral voxels, uniformly from the current surface, in sub-rounds."""
    labels = grid.array.copy()
    remaining = int(quota)
    while remaining > 0:
        surf = np.flatnonzero(_surface_mask(labels))
        if surf.size == 0:
            break
        take = min(remaining, surf.size)
        labels.ravel()[rng.choice(surf, size=take, replace=False)] = MARROW
        remaining -= take
    return VoxelGrid(labels, grid.n_phases)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def degrade_step(grid: VoxelGrid, loss_fraction: float, rng: np.random.Generator) -> VoxelGrid:
    if not 0.0 <= loss_fraction < 1.0:
        raise DomainError(f"loss_fraction must lie in [0, 1), got {loss_fraction}")
    return remove_surface_voxels(grid, _round_half_up(loss_fraction * grid.count(MINERAL)), rng)


def simulate(initial: VoxelGrid, params: DegradationParams, source_id: str = "") -> EvolutionSequence:
    """Frames ``0..months``; the rounding remainder of each monthly quota carries over."""
    if initial.count(MINERAL) == 0:
        raise DomainError("initial grid has no mineral voxels")
    rng = np.random.default_rng(params.seed)
    frames = [initial]
    carry = 0.0
    for t in range(1, params.months + 1):
        prev = frames[-1]
        exact = params.monthly_rate(t) * prev.count(MINERAL) + carry
        quota = max(_round_half_up(exact), 0)
        carry = exact - quota
        frames.append(remove_surface_voxels(prev, quota, rng))
    return EvolutionSequence(frames, params, source_id)
