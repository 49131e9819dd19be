"""Cellular-automaton generator for heterogeneous voxel microstructures.

Each CSV row describes one microstructure. Seeds of every non-background
phase are scattered in an empty grid and grown with a probabilistic
von Neumann rule until each phase reaches its target volume fraction.
Optionally each phase is reduced to its largest cluster at the end.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .voxel import DomainError, VoxelGrid, connected_components

DEFAULT_DIMS = (150, 150, 150)
PROXIMITY_ATTEMPTS = 100


class ParamsError(ValueError):
    """A CSV record could not be parsed or violates a parameter invariant."""

    def __init__(self, message, line=None, column=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class GenerationParams:
    """Controls for one generated microstructure.

    Per-phase fields are tuples ordered by phase; phase ``p`` in these
    tuples is voxel label ``p + 1`` (label 0 is the background).
    """

    id: int
    n_phases: int
    target_vf: tuple[float, ...]
    n_initial_seeds: int
    seed_increment: int
    seed_frequency: int
    proximity_radius: tuple[int, ...]
    cluster_at_end: tuple[bool, ...]
    growth_decay: tuple[float, ...]
    growth_thresholds: tuple[float, ...]

    def __post_init__(self):
        self.validate()

    def validate(self):
        p = self.n_phases
        if p < 1:
            raise ParamsError(f"n_phases must be >= 1, got {p}")
        for name in ("target_vf", "proximity_radius", "cluster_at_end", "growth_decay", "growth_thresholds"):
            if len(getattr(self, name)) != p:
                raise ParamsError(f"{name} needs {p} entries, got {len(getattr(self, name))}")
        if any(not 0.0 < v < 1.0 for v in self.target_vf):
            raise ParamsError(f"target_vf entries must lie in (0, 1), got {self.target_vf}")
        if sum(self.target_vf) >= 1.0:
            raise ParamsError(f"sum of target_vf must be < 1, got {sum(self.target_vf)}")
        if self.n_initial_seeds < 0:
            raise ParamsError(f"n_initial_seeds must be >= 0, got {self.n_initial_seeds}")
        if self.seed_frequency < 1:
            raise ParamsError(f"seed_frequency must be >= 1, got {self.seed_frequency}")
        if any(r < 0 for r in self.proximity_radius):
            raise ParamsError(f"proximity_radius must be >= 0, got {self.proximity_radius}")
        if any(d < 0 for d in self.growth_decay):
            raise ParamsError(f"growth_decay must be >= 0, got {self.growth_decay}")
        if any(not 0.0 <= t <= 1.0 for t in self.growth_thresholds):
            raise ParamsError(f"growth_thresholds must lie in [0, 1], got {self.growth_thresholds}")

    def to_csv_row(self) -> str:
        fields = [self.id, self.n_phases, *self.target_vf, self.n_initial_seeds, self.seed_increment,
                  self.seed_frequency, *self.proximity_radius, *(int(c) for c in self.cluster_at_end),
                  *self.growth_decay, *self.growth_thresholds]
        return ",".join(repr(f) if isinstance(f, float) else str(f) for f in fields)


def _parse_int(tok, line, col):
    try:
        value = float(tok)
    except ValueError:
        raise ParamsError(f"expected an integer, got {tok!r}", line, col) from None
    if not value.is_integer():
        raise ParamsError(f"expected an integer, got {tok!r}", line, col)
    return int(value)


def _parse_float(tok, line, col):
    try:
        value = float(tok)
    except ValueError:
        raise ParamsError(f"expected a number, got {tok!r}", line, col) from None
    if not math.isfinite(value):
        raise ParamsError(f"expected a finite number, got {tok!r}", line, col)
    return value


def _parse_bool(tok, line, col):
    low = tok.strip().lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise ParamsError(f"expected a 0/1 flag, got {tok!r}", line, col)


def parse_params_csv(text: str) -> list[GenerationParams]:
    """Parse generator records, one per line.

    Column order: id, n_phases, target_vf x P, n_initial_seeds,
    seed_increment, seed_frequency, proximity_radius x P,
    cluster_at_end x P, growth_decay x P, growth_thresholds x P.
    Blank lines and lines starting with ``#`` are skipped. Columns in
    error messages are 1-based.
    """
    records = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        row = [tok.strip() for tok in row]
        if len(row) < 2:
            raise ParamsError("record too short", lineno, len(row) + 1)
        pid = _parse_int(row[0], lineno, 1)
        n = _parse_int(row[1], lineno, 2)
        if n < 1:
            raise ParamsError(f"n_phases must be >= 1, got {n}", lineno, 2)
        expected = 2 + n + 3 + 4 * n
        if len(row) != expected:
            raise ParamsError(f"expected {expected} columns for {n} phase(s), got {len(row)}",
                              lineno, min(len(row), expected) + 1)
        col = 2

        def take(count, parse):
            nonlocal col
            out = tuple(parse(row[col + k], lineno, col + k + 1) for k in range(count))
            col += count
            return out

        vf = take(n, _parse_float)
        seeds, inc, freq = take(3, _parse_int)
        radius = take(n, _parse_int)
        cluster = take(n, _parse_bool)
        decay = take(n, _parse_float)
        thresholds = take(n, _parse_float)
        checks = [
            (all(0 < v < 1 for v in vf) and sum(vf) < 1, 3, f"target_vf {vf} must lie in (0, 1) and sum below 1"),
            (seeds >= 0, 3 + n, f"n_initial_seeds must be >= 0, got {seeds}"),
            (freq >= 1, 5 + n, f"seed_frequency must be >= 1, got {freq}"),
            (all(r >= 0 for r in radius), 6 + n, f"proximity_radius must be >= 0, got {radius}"),
            (all(d >= 0 for d in decay), 6 + 3 * n, f"growth_decay must be >= 0, got {decay}"),
            (all(0 <= t <= 1 for t in thresholds), 6 + 4 * n, f"growth_thresholds must lie in [0, 1], got {thresholds}"),
        ]
        for ok, column, message in checks:
            if not ok:
                raise ParamsError(message, lineno, column)
        records.append(GenerationParams(pid, n, vf, seeds, inc, freq, radius, cluster, decay, thresholds))
    return records


@dataclass
class GeneratorState:
    grid: VoxelGrid
    iteration: int
    current_thresholds: tuple[float, ...]
    rng: np.random.Generator
    seeds_requested: int = 0
    seeds_placed: int = 0

    @property
    def placement_shortfall(self) -> int:
        return self.seeds_requested - self.seeds_placed


def initial_state(params: GenerationParams, dims=DEFAULT_DIMS, seed: int = 0) -> GeneratorState:
    return GeneratorState(
        grid=VoxelGrid.zeros(dims, params.n_phases + 1),
        iteration=0,
        current_thresholds=tuple(float(np.clip(t, 0.0, 1.0)) for t in params.growth_thresholds),
        rng=np.random.default_rng(seed),
    )


def decayed_thresholds(params: GenerationParams, iteration: int) -> tuple[float, ...]:
    return tuple(float(np.clip(t * math.exp(-d * iteration), 0.0, 1.0))
                 for t, d in zip(params.growth_thresholds, params.growth_decay))


def place_seeds(state: GeneratorState, params: GenerationParams, count: int, phases=None) -> GeneratorState:
    """Scatter ``count`` seeds of every phase (or of ``phases`` only) on background voxels.

    With a positive proximity radius a candidate is rejected when another voxel
    of the same phase lies within that Chebyshev radius; each seed gets
    ``PROXIMITY_ATTEMPTS`` candidates before it is given up.
    """
    if count <= 0:
        return state
    labels = state.grid.array.copy()
    rng = state.rng
    requested = placed = 0
    for p in range(params.n_phases) if phases is None else phases:
        label = p + 1
        r = params.proximity_radius[p]
        requested += count
        if r == 0:
            free = np.flatnonzero(labels == 0)
            k = min(count, free.size)
            if k:
                labels.ravel()[rng.choice(free, size=k, replace=False)] = label
            placed += k
            continue
        shape = np.array(labels.shape)
        for _ in range(count):
            for _attempt in range(PROXIMITY_ATTEMPTS):
                x, y, z = (int(v) for v in rng.integers(0, shape))
                if labels[x, y, z] != 0:
                    continue
                window = labels[max(x - r, 0):x + r + 1, max(y - r, 0):y + r + 1, max(z - r, 0):z + r + 1]
                if np.any(window == label):
                    continue
                labels[x, y, z] = label
                placed += 1
                break
    return replace(state, grid=VoxelGrid(labels, state.grid.n_phases),
                   seeds_requested=state.seeds_requested + requested,
                   seeds_placed=state.seeds_placed + placed)


def _face_neighbours(mask: np.ndarray) -> np.ndarray:
    """Voxels with at least one face-adjacent voxel in ``mask``."""
    out = np.zeros_like(mask)
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[:, :, 1:] |= mask[:, :, :-1]
    out[:, :, :-1] |= mask[:, :, 1:]
    return out


def grow_step(state: GeneratorState, params: GenerationParams, active=None, quota=None) -> GeneratorState:
    """One synchronous probabilistic growth update.

    A background voxel touching phase ``p`` through a face converts to ``p``
    with probability ``current_thresholds[p]``. When several phases claim a
    voxel the lowest phase index wins. ``active`` masks out frozen phases and
    ``quota`` caps the number of conversions per phase; excess successful
    candidates are dropped uniformly at random.
    """
    labels = state.grid.array
    background = labels == 0
    new = labels.copy()
    claimed = np.zeros_like(background)
    rng = state.rng
    for p in range(params.n_phases):
        if active is not None and not active[p]:
            continue
        theta = state.current_thresholds[p]
        if theta <= 0.0:
            continue
        cand = _face_neighbours(labels == p + 1) & background & ~claimed
        idx = np.flatnonzero(cand)
        if idx.size == 0:
            continue
        if theta < 1.0:
            idx = idx[rng.random(idx.size) < theta]
        if quota is not None and idx.size > quota[p]:
            idx = np.sort(rng.choice(idx, size=max(int(quota[p]), 0), replace=False))
        new.ravel()[idx] = p + 1
        claimed.ravel()[idx] = True
    iteration = state.iteration + 1
    return replace(state, grid=VoxelGrid(new, state.grid.n_phases), iteration=iteration,
                   current_thresholds=decayed_thresholds(params, iteration))


def apply_clustering(grid: VoxelGrid, phase: int) -> VoxelGrid:
    """Reassign every voxel of ``phase`` outside its largest 6-connected cluster to background."""
    comps = connected_components(grid, phase, 6)
    if not comps.component_sizes:
        raise DomainError(f"cannot cluster empty phase {phase}")
    labels = grid.array.copy()
    labels[(labels == phase) & (comps.labels != 1)] = 0
    return VoxelGrid(labels, grid.n_phases)


@dataclass
class GenerationResult:
    grid: VoxelGrid
    shortfall: bool
    iterations: int
    seeds_requested: int = 0
    seeds_placed: int = 0
    volume_fractions: tuple[float, ...] = field(default_factory=tuple)


def default_max_iterations(dims) -> int:
    return 10 * max(int(d) for d in dims)


def generate(params: GenerationParams, seed: int = 0, max_iterations: int | None = None,
             dims=DEFAULT_DIMS) -> GenerationResult:
    """Run the full seed/grow/cluster loop for one parameter record.

    Growth of a phase stops as soon as its voxel count reaches
    ``round(target_vf * n_voxels)``; the last step is trimmed so the target
    is met exactly. Phases flagged for clustering keep only their largest
    cluster and are then regrown from it (no new seeds, so the phase stays a
    single cluster) until the target is met again or the iteration budget
    runs out. Deterministic for a given ``(params, seed, dims)``.
    """
    dims = tuple(int(d) for d in dims)
    if max_iterations is None:
        max_iterations = default_max_iterations(dims)
    n_vox = int(np.prod(dims))
    targets = [int(round(v * n_vox)) for v in params.target_vf]
    state = initial_state(params, dims, seed)
    state = place_seeds(state, params, params.n_initial_seeds)

    def counts(st):
        return [int(np.count_nonzero(st.grid.array == p + 1)) for p in range(params.n_phases)]

    def run_growth(st, allow_seeds, budget):
        event = 0
        steps = 0
        while steps < budget:
            have = counts(st)
            active = [h < t for h, t in zip(have, targets)]
            if not any(active):
                break
            future_seeds = allow_seeds and (params.seed_increment > 0
                                            or params.n_initial_seeds + (event + 1) * params.seed_increment > 0)
            if not any(h > 0 for h, a in zip(have, active) if a) and not future_seeds:
                break
            quota = [t - h for h, t in zip(have, targets)]
            st = grow_step(st, params, active=active, quota=quota)
            steps += 1
            if allow_seeds and st.iteration % params.seed_frequency == 0:
                event += 1
                n_new = max(0, params.n_initial_seeds + event * params.seed_increment)
                have = counts(st)
                for p in range(params.n_phases):
                    room = targets[p] - have[p]
                    if room > 0 and n_new > 0:
                        st = place_seeds(st, params, min(n_new, room), phases=[p])
        return st, steps

    state, used = run_growth(state, True, max_iterations)
    for p in range(params.n_phases):
        if params.cluster_at_end[p] and np.any(state.grid.array == p + 1):
            state = replace(state, grid=apply_clustering(state.grid, p + 1))
    if any(params.cluster_at_end):
        state, more = run_growth(state, False, max_iterations - used)
        used += more
    final = counts(state)
    shortfall = any(f < t for f, t in zip(final, targets))
    return GenerationResult(
        grid=state.grid,
        shortfall=shortfall,
        iterations=state.iteration,
        seeds_requested=state.seeds_requested,
        seeds_placed=state.seeds_placed,
        volume_fractions=tuple(f / n_vox for f in final),
    )
