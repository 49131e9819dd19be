"""Glue for producing synthetic corpora: generate, degrade, write, index."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, build_manifest, write_evolution
from .degradation import DegradationParams, simulate
from .hetmigen import GenerationParams, generate


def random_params(rng: np.random.Generator, vf_range=(0.2, 0.5), record_id: int = 0,
                  cluster: bool = True) -> GenerationParams:
    """A single-phase parameter record with a target vf drawn from ``vf_range``."""
    return GenerationParams(
        id=record_id,
        n_phases=1,
        target_vf=(float(rng.uniform(*vf_range)),),
        n_initial_seeds=int(rng.integers(4, 40)),
        seed_increment=int(rng.integers(0, 10)),
        seed_frequency=int(rng.integers(1, 6)),
        proximity_radius=(int(rng.integers(0, 4)),),
        cluster_at_end=(cluster,),
        growth_decay=(float(rng.uniform(0.0, 0.05)),),
        growth_thresholds=(float(rng.uniform(0.3, 1.0)),),
    )


def make_sequence(params: GenerationParams, dims, seed: int = 0, months: int = 36, source_id: str = ""):
    result = generate(params, seed=seed, dims=dims)
    deg = DegradationParams.calibrated(months=months, seed=seed)
    return simulate(result.grid, deg, source_id=source_id)


def build_corpus(directory, n: int, dims=(32, 32, 32), months: int = 36, seed: int = 0,
                 vf_range=(0.2, 0.5), split_seed: int = 0) -> DatasetManifest:
    """Write ``n`` evolution files under ``directory`` and return their manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    files = []
    for i in range(n):
        params = random_params(rng, vf_range, record_id=i)
        name = f"sample_{i:04d}"
        seq = make_sequence(params, dims, seed=seed * 100003 + i, months=months, source_id=name)
        path = directory / f"{name}.ovxe"
        write_evolution(seq, path)
        files.append(path)
    manifest = build_manifest(files, split_seed=split_seed)
    manifest.save(directory / "manifest.json")
    return manifest
