"""Optimisation loop, evaluation, checkpoint helpers and resolution transfer."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, SequenceStore, draw_entries, iter_pairs, make_sample
from .nn import backward, no_grad
from .nn.ops import resize_linear
from .nn.tensor import Tensor
from .transvnet import (ConfigError, ModelConfig, TransVNet, encode_input, forward, init_params, is_buffer,
                        loss_terms, no_decay, parameter_shapes, save_model)
from .voxel import MINERAL, dice, hausdorff

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_good):
        super().__init__(f"non-finite loss at step {step}; returning last good parameters")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 1
    steps_per_epoch: int | None = None
    batch_size: int = 2
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    horizon: int = 1
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")


@dataclass
class MetricsReport:
    split: str = ""
    dsc: float = float("nan")
    hd_max: float = float("nan")
    hd_average: float = float("nan")
    n_pairs: int = 0
    loss_curve: list = field(default_factory=list)  # (step, combined_loss, ce_loss)
    wall_clock: float = 0.0
    steps: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "combined_loss", "ce_loss"])
            w.writerows(self.loss_curve)

    def table_row(self, label: str) -> str:
        return f"{label}  DSC {self.dsc:.6f}, HD {self.hd_average:.6f} (max-HD {self.hd_max:.6f})"


class SGD:
    def __init__(self, params: dict, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.params, self.lr, self.momentum, self.weight_decay = params, lr, momentum, weight_decay
        self.velocity = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not no_decay(n):
                g = g + self.weight_decay * p.data
            v = self.velocity[n]
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype)


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not no_decay(n):
                g = g + self.weight_decay * p.data
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def make_optimizer(model: TransVNet, cfg: TrainConfig):
    params = model.trainable()
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)


class Trainer:
    """Single-owner optimisation state: model, optimiser and loss log."""

    def __init__(self, model: TransVNet, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.optimizer = make_optimizer(model, cfg)
        self.step_count = 0
        self.loss_curve = []

    def batch_loss(self, samples, training=True):
        logits = self.model([s.input for s in samples], [s.t for s in samples], training=training)
        return loss_terms(logits, [s.target for s in samples])

    def step(self, samples) -> tuple:
        for p in self.model.params.values():
            p.zero_grad()
        total, ce, _ = self.batch_loss(samples, training=True)
        value, ce_value = total.item(), ce.item()
        if not (math.isfinite(value) and math.isfinite(ce_value)):
            raise TrainingDiverged(self.step_count, None)
        backward(total)
        del total, ce
        self.optimizer.step()
        self.step_count += 1
        self.loss_curve.append((self.step_count, value, ce_value))
        return value, ce_value


def training_pairs(manifest: DatasetManifest, horizon: int) -> int:
    return sum(max(e.timesteps - horizon, 0) for e in manifest.split("train"))


def train(manifest: DatasetManifest, model_config: ModelConfig, train_config: TrainConfig,
          model: TransVNet | None = None, store: SequenceStore | None = None, callback=None):
    """Train on the manifest's train split with balanced sampling.

    Returns ``(model, MetricsReport)``. On a non-finite loss the loop stops and
    :class:`TrainingDiverged` is raised carrying the last good model.
    """
    cfg = train_config
    store = store or SequenceStore()
    if not manifest.split("train"):
        raise ValueError("train split is empty")
    model = model or TransVNet.create(model_config, cfg.seed)
    trainer = Trainer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    steps = cfg.steps_per_epoch or max(1, math.ceil(training_pairs(manifest, cfg.horizon) / cfg.batch_size))
    start = time.perf_counter()
    last_good = model.copy()
    for epoch in range(cfg.epochs):
        for _ in range(steps):
            draws = draw_entries(manifest, "train", cfg.batch_size, cfg.horizon, rng, cfg.augment)
            samples = [make_sample(store.get(e.file), t, cfg.horizon, sym) for e, t, sym in draws]
            try:
                value, ce_value = trainer.step(samples)
            except TrainingDiverged as exc:
                raise TrainingDiverged(trainer.step_count, last_good) from exc
            n = trainer.step_count
            if cfg.log_every and n % cfg.log_every == 0:
                log.info("epoch %d step %d loss %.6f ce %.6f", epoch, n, value, ce_value)
            if cfg.checkpoint_every and n % cfg.checkpoint_every == 0:
                last_good = model.copy()
                if cfg.checkpoint_dir:
                    save_model(model, Path(cfg.checkpoint_dir) / f"step{n:06d}")
            if callback is not None:
                callback(trainer)
    report = MetricsReport(split="train", loss_curve=list(trainer.loss_curve),
                           wall_clock=time.perf_counter() - start, steps=trainer.step_count)
    return model, report


def _worst_distance(dims) -> float:
    return float(math.sqrt(sum((d - 1) ** 2 for d in dims)))


def pair_metrics(pred, target) -> tuple:
    """(DSC, max HD, average HD) of the mineral phase; an empty set scores the grid diagonal."""
    d = dice(pred, target, MINERAL)
    if pred.count(MINERAL) == 0 or target.count(MINERAL) == 0:
        if pred.count(MINERAL) == target.count(MINERAL):
            return d, 0.0, 0.0
        worst = _worst_distance(pred.dims)
        return d, worst, worst
    return d, hausdorff(pred, target, MINERAL, "max"), hausdorff(pred, target, MINERAL, "average")


def evaluate(model, manifest: DatasetManifest, split: str = "test", horizon: int = 1,
             store: SequenceStore | None = None, batch_size: int = 4, max_pairs: int | None = None) -> MetricsReport:
    """Mean hard DSC and HD over every (sample, t) pair of a split.

    ``model`` is a :class:`TransVNet` or any callable mapping a
    :class:`TrainingSample` to a predicted grid (used for oracle stubs).
    """
    start = time.perf_counter()
    pairs = list(iter_pairs(manifest, split, horizon, store))
    if max_pairs is not None:
        pairs = pairs[:max_pairs]
    if not pairs:
        raise ValueError(f"split {split!r} has no pairs at horizon {horizon}")
    scores = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        if isinstance(model, TransVNet):
            preds = model.predict_batch([s.input for s in chunk], [s.t for s in chunk])
        else:
            preds = [model(s) for s in chunk]
        scores.extend(pair_metrics(p, s.target) for p, s in zip(preds, chunk))
    arr = np.array(scores)
    return MetricsReport(split=split, dsc=float(arr[:, 0].mean()), hd_max=float(arr[:, 1].mean()),
                         hd_average=float(arr[:, 2].mean()), n_pairs=len(pairs),
                         wall_clock=time.perf_counter() - start)


def evaluate_samples(model: TransVNet, samples) -> MetricsReport:
    preds = model.predict_batch([s.input for s in samples], [s.t for s in samples])
    arr = np.array([pair_metrics(p, s.target) for p, s in zip(preds, samples)])
    return MetricsReport(dsc=float(arr[:, 0].mean()), hd_max=float(arr[:, 1].mean()),
                         hd_average=float(arr[:, 2].mean()), n_pairs=len(samples))


def held_out_loss(model: TransVNet, samples, training: bool = False) -> float:
    with no_grad():
        logits = model([s.input for s in samples], [s.t for s in samples], training=training)
        return loss_terms(logits, [s.target for s in samples])[0].item()


@dataclass
class TransferReport:
    copied: list = field(default_factory=list)
    resampled: list = field(default_factory=list)
    new: list = field(default_factory=list)


_CORE_FIELDS = ("cnn_channels", "hidden_dim", "n_layers", "n_heads", "mlp_dim", "in_channels", "n_classes",
                "vit_only")


def transfer_weights(low: TransVNet | dict, low_config: ModelConfig, high_config: ModelConfig, seed: int = 0):
    """Initialise a higher-resolution model from a trained lower-resolution one.

    Shape-compatible tensors are copied, the position table is resampled
    trilinearly over the 3D token lattice and everything else is freshly
    initialised. Returns ``(TransVNet, TransferReport)``.
    """
    low_params = low.params if isinstance(low, TransVNet) else low
    mismatches = [(f, getattr(low_config, f), getattr(high_config, f)) for f in _CORE_FIELDS
                  if getattr(low_config, f) != getattr(high_config, f)]
    if low_config.patch_dim != high_config.patch_dim:
        mismatches.append(("patch_dim", low_config.patch_dim, high_config.patch_dim))
    if mismatches:
        raise ConfigError("incompatible configs: " + ", ".join(f"{n}: {a} vs {b}" for n, a, b in mismatches))
    fresh = init_params(high_config, seed)
    report = TransferReport()
    out = {}
    for name, target in parameter_shapes(high_config).items():
        src = low_params.get(name)
        if src is not None and tuple(src.shape) == tuple(target):
            out[name] = Tensor(np.array(src.data, copy=True), requires_grad=not is_buffer(name), name=name)
            report.copied.append(name)
        elif name == "embed.position" and src is not None:
            g_lo, g_hi = low_config.token_grid, high_config.token_grid
            d = src.shape[1]
            lattice = src.data.reshape(g_lo, g_lo, g_lo, d).transpose(3, 0, 1, 2)[None]
            with no_grad():
                res = resize_linear(Tensor(lattice, dtype=src.dtype), (g_hi,) * 3).data
            table = res[0].transpose(1, 2, 3, 0).reshape(g_hi ** 3, d)
            out[name] = Tensor(np.ascontiguousarray(table), requires_grad=True, name=name)
            report.resampled.append(name)
        else:
            out[name] = fresh[name]
            report.new.append(name)
    return TransVNet(high_config, out), report
