"""Evolution file format, sample curation, stratified splits and balanced sampling."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .degradation import EvolutionSequence
from .voxel import MINERAL, N_SYMMETRIES, DomainError, SymmetryElement, VoxelGrid, largest_component_fraction

log = logging.getLogger(__name__)

MAGIC = b"OVXE"
VERSION = 1
HEADER = struct.Struct("<4sIIIIII")  # magic, version, nx, ny, nz, n_timesteps, n_phases

TEST_FRACTION = 0.10
VAL_FRACTION = 0.15
CLUSTER_THRESHOLD = 0.95
MIN_BIN_SIZE = 3
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        super().__init__(f"{message} (at byte {offset})" if offset is not None else message)
        self.offset = offset


def encode_evolution(seq: EvolutionSequence) -> bytes:
    nx, ny, nz = seq.dims
    parts = [HEADER.pack(MAGIC, VERSION, nx, ny, nz, len(seq.frames), seq.n_phases)]
    parts.extend(f.tobytes() for f in seq.frames)
    return b"".join(parts)


def decode_evolution(buf: bytes, source_id: str = "") -> EvolutionSequence:
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", len(buf))
    magic, version, nx, ny, nz, nt, n_phases = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if min(nx, ny, nz) < 1:
        raise FormatError(f"non-positive dims {(nx, ny, nz)}", 8)
    if nt < 1:
        raise FormatError("file holds no frames", 20)
    if not 1 <= n_phases <= 256:
        raise FormatError(f"n_phases {n_phases} out of range", 24)
    frame = nx * ny * nz
    expected = HEADER.size + nt * frame
    if len(buf) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(buf)}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes", expected)
    payload = np.frombuffer(buf, dtype=np.uint8, offset=HEADER.size)
    bad = np.flatnonzero(payload >= n_phases)
    if bad.size:
        raise FormatError(f"label {payload[bad[0]]} >= n_phases {n_phases}", HEADER.size + int(bad[0]))
    frames = [VoxelGrid.from_flat(payload[k * frame:(k + 1) * frame], (nx, ny, nz), n_phases) for k in range(nt)]
    return EvolutionSequence(frames, source_id=source_id)


def write_evolution(seq: EvolutionSequence, path) -> None:
    Path(path).write_bytes(encode_evolution(seq))


def read_evolution(path) -> EvolutionSequence:
    path = Path(path)
    return decode_evolution(path.read_bytes(), source_id=path.stem)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read(HEADER.size)
    if len(buf) < HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, nx, ny, nz, nt, n_phases = HEADER.unpack(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    return {"version": version, "dims": (nx, ny, nz), "n_timesteps": nt, "n_phases": n_phases}


def quality_filter(seq: EvolutionSequence) -> bool:
    """True when over 95% of the initial mineral sits in one 6-connected cluster."""
    try:
        return largest_component_fraction(seq.frames[0], MINERAL, 6) > CLUSTER_THRESHOLD
    except DomainError:
        return False


def default_bin_edges(vfs, width: float = 0.05) -> list[float]:
    lo = math.floor(min(vfs) / width + 1e-9)
    hi = math.floor(max(vfs) / width + 1e-9) + 1
    return [round(k * width, 10) for k in range(lo, hi + 1)]


def vf_bin(vf: float, edges) -> int:
    """Index of the half-open bin ``[edges[i], edges[i+1])``; out-of-range values clamp."""
    n_bins = len(edges) - 1
    if n_bins < 1:
        raise DomainError("need at least two bin edges")
    return int(np.clip(np.searchsorted(edges, vf, side="right") - 1, 0, n_bins - 1))


@dataclass
class ManifestEntry:
    id: str
    file: str
    vf: float
    bin: int
    split: str
    timesteps: int


@dataclass
class DatasetManifest:
    entries: list
    bin_edges: list
    split_seed: int
    warnings: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict:
        return {s: len(self.split(s)) for s in SPLITS}

    def to_json(self) -> str:
        doc = {
            "bin_edges": self.bin_edges,
            "split_seed": self.split_seed,
            "warnings": self.warnings,
            "rejected": self.rejected,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls([ManifestEntry(**e) for e in doc["entries"]], doc["bin_edges"], doc["split_seed"],
                   doc.get("warnings", []), doc.get("rejected", []))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def _apportion(total: int, sizes: list) -> list:
    """Split ``total`` across groups in proportion to ``sizes`` (largest remainder)."""
    n = sum(sizes)
    if n == 0:
        return [0] * len(sizes)
    exact = [total * s / n for s in sizes]
    alloc = [math.floor(e) for e in exact]
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def _merge_small_bins(edges: list, vfs: list, warnings: list) -> list:
    edges = list(edges)
    while len(edges) > 2:
        counts = np.bincount([vf_bin(v, edges) for v in vfs], minlength=len(edges) - 1)
        small = [i for i, c in enumerate(counts) if c < MIN_BIN_SIZE]
        if not small:
            break
        i = small[0]
        # merge with the right neighbour, or the left one for the last bin
        drop = i + 1 if i + 1 < len(edges) - 1 else i
        warnings.append(f"bin [{edges[i]}, {edges[i + 1]}) has {counts[i]} entries; merged with neighbour "
                        f"(edge {edges[drop]} removed)")
        del edges[drop]
    return edges


def build_manifest(files, bin_edges=None, split_seed: int = 0) -> DatasetManifest:
    """Curate evolution files into a stratified train/val/test manifest.

    Files failing :func:`quality_filter` are rejected. Test takes 10% of the
    kept files and validation 15% of the rest (both rounded half up); every
    volume-fraction bin contributes proportionally to each split.
    """
    kept, rejected = [], []
    for path in sorted(str(f) for f in files):
        seq = read_evolution(path)
        if not quality_filter(seq):
            rejected.append(path)
            continue
        frame0 = seq.frames[0]
        kept.append((Path(path).stem, path, frame0.count(MINERAL) / frame0.size, len(seq)))
    if len(kept) < 10:
        raise DomainError(f"need at least 10 usable files, got {len(kept)}")
    warnings = [f"rejected by quality filter: {p}" for p in rejected]
    vfs = [k[2] for k in kept]
    edges = list(bin_edges) if bin_edges is not None else default_bin_edges(vfs)
    edges = _merge_small_bins(edges, vfs, warnings)
    for w in warnings:
        log.warning(w)
    bins = [vf_bin(v, edges) for v in vfs]
    n_bins = len(edges) - 1
    members = [[i for i, b in enumerate(bins) if b == k] for k in range(n_bins)]

    n = len(kept)
    n_test = _round_half_up(TEST_FRACTION * n)
    n_val = _round_half_up(VAL_FRACTION * (n - n_test))
    test_alloc = _apportion(n_test, [len(m) for m in members])
    val_alloc = _apportion(n_val, [len(m) - t for m, t in zip(members, test_alloc)])

    rng = np.random.default_rng(split_seed)
    split = [""] * n
    for m, nt, nv in zip(members, test_alloc, val_alloc):
        order = [m[i] for i in rng.permutation(len(m))]
        for j, idx in enumerate(order):
            split[idx] = "test" if j < nt else "val" if j < nt + nv else "train"
    entries = [ManifestEntry(k[0], k[1], float(k[2]), b, s, int(k[3])) for k, b, s in zip(kept, bins, split)]
    return DatasetManifest(entries, [float(e) for e in edges], int(split_seed), warnings, rejected)


@dataclass
class TrainingSample:
    input: VoxelGrid
    target: VoxelGrid
    t: int
    horizon: int
    source_id: str = ""
    symmetry: int = 0


class SequenceStore:
    """Read-through cache of evolution files."""

    def __init__(self, max_items: int = 256):
        self._load = lru_cache(maxsize=max_items)(read_evolution)

    def get(self, path) -> EvolutionSequence:
        return self._load(str(path))


_default_store = SequenceStore()


def make_sample(seq: EvolutionSequence, t: int, horizon: int, symmetry: int = 0) -> TrainingSample:
    if t < 0 or t + horizon > len(seq) - 1:
        raise DomainError(f"t={t}, horizon={horizon} outside a {len(seq)}-frame sequence")
    inp, tgt = seq.frames[t], seq.frames[t + horizon]
    if symmetry:
        s = SymmetryElement(symmetry)
        inp = VoxelGrid(s.apply_array(inp.array), inp.n_phases)
        tgt = VoxelGrid(s.apply_array(tgt.array), tgt.n_phases)
    return TrainingSample(inp, tgt, t, horizon, seq.source_id, symmetry)


def eligible_bins(manifest: DatasetManifest, split: str, horizon: int) -> dict:
    by_bin = {}
    for e in manifest.split(split):
        if e.timesteps - 1 >= horizon:
            by_bin.setdefault(e.bin, []).append(e)
    return dict(sorted(by_bin.items()))


def draw_entries(manifest: DatasetManifest, split: str, batch_size: int, horizon: int,
                 rng: np.random.Generator, augment: bool = False) -> list:
    """Balanced draws ``(entry, t, symmetry_index)`` without touching the files.

    A bin is picked uniformly, then an entry within it, then a month ``t``.
    """
    if not manifest.split(split):
        raise DomainError(f"split {split!r} is empty")
    by_bin = eligible_bins(manifest, split, horizon)
    if not by_bin:
        raise DomainError(f"horizon {horizon} exceeds every sequence in split {split!r}")
    keys = list(by_bin)
    draws = []
    for _ in range(batch_size):
        group = by_bin[keys[int(rng.integers(len(keys)))]]
        entry = group[int(rng.integers(len(group)))]
        t = int(rng.integers(entry.timesteps - horizon))
        sym = int(rng.integers(N_SYMMETRIES)) if augment else 0
        draws.append((entry, t, sym))
    return draws


def sample_batch(manifest: DatasetManifest, split: str, batch_size: int, horizon: int,
                 rng: np.random.Generator, augment: bool = False, store: SequenceStore | None = None) -> list:
    store = store or _default_store
    return [make_sample(store.get(e.file), t, horizon, sym)
            for e, t, sym in draw_entries(manifest, split, batch_size, horizon, rng, augment)]


def iter_pairs(manifest: DatasetManifest, split: str, horizon: int, store: SequenceStore | None = None):
    """Every ``(sample, t)`` pair of a split at the given horizon, without augmentation."""
    store = store or _default_store
    for e in manifest.split(split):
        seq = store.get(e.file)
        for t in range(len(seq) - horizon):
            yield make_sample(seq, t, horizon)
