"""TransVNet: hybrid 3D-CNN + ViT encoder with a skip-connected 3D CNN decoder.

The encoder runs ``cnn_downscalings`` blocks of (conv-ReLU-BN) x 2 followed
by a stride-2 1x1x1 downsampling conv, keeping each block's pre-downsample
activation as a skip. The bottleneck features are cut into P^3 patches,
linearly embedded, summed with learnable position and time embeddings and
passed through L pre-norm transformer blocks. The decoder reshapes the
tokens back to a 3D grid and alternates trilinear x2 upsampling, skip
concatenation and a double conv until the input resolution is reached.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .nn import ops
from .nn.checkpoint import CheckpointError, load_tensors, save_tensors
from .nn.tensor import Tensor, concat, no_grad, reshape, transpose
from .voxel import DomainError, VoxelGrid


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_resolution: int = 160
    in_channels: int = 3
    n_classes: int = 2
    cnn_downscalings: int = 3
    cnn_channels: int = 32
    patch_size: int = 2
    hidden_dim: int = 768
    n_layers: int = 12
    n_heads: int = 12
    mlp_dim: int = 3072
    decoder_channels: tuple = ()
    t_max: int = 36
    vit_only: bool = False
    input_mode: str = "replicate"

    def __post_init__(self):
        if not self.decoder_channels:
            nb = self.n_upsample_blocks
            object.__setattr__(self, "decoder_channels", tuple(16 * 2 ** (nb - 1 - i) for i in range(nb)))
        else:
            object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        self.validate()

    @property
    def feature_resolution(self) -> int:
        return self.input_resolution if self.vit_only else self.input_resolution // 2 ** self.cnn_downscalings

    @property
    def token_grid(self) -> int:
        return self.feature_resolution // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.token_grid ** 3

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 3 * (self.in_channels if self.vit_only else self.cnn_channels)

    @property
    def n_upsample_blocks(self) -> int:
        return int(round(math.log2(self.input_resolution // max(self.token_grid, 1))))

    def encoder_channels(self) -> list:
        k = self.cnn_downscalings
        return [max(self.cnn_channels // 2 ** (k - 1 - i), 1) for i in range(k)]

    def skip_resolutions(self) -> list:
        if self.vit_only:
            return []
        return [self.input_resolution // 2 ** i for i in range(self.cnn_downscalings)]

    def validate(self):
        h, p = self.input_resolution, self.patch_size
        if self.input_mode not in ("replicate", "onehot"):
            raise ConfigError(f"input_mode must be 'replicate' or 'onehot', got {self.input_mode!r}")
        if self.input_mode == "onehot" and self.in_channels != self.n_classes:
            raise ConfigError("one-hot input needs in_channels == n_classes")
        if min(h, p, self.hidden_dim, self.n_heads, self.in_channels, self.n_classes) < 1 or self.n_layers < 0:
            raise ConfigError("sizes must be positive")
        if not self.vit_only and (self.cnn_downscalings < 1 or h % 2 ** self.cnn_downscalings):
            raise ConfigError(f"resolution {h} not divisible by 2^{self.cnn_downscalings}")
        if self.feature_resolution % p:
            raise ConfigError(f"feature resolution {self.feature_resolution} not divisible by patch size {p}")
        ratio = h // self.token_grid
        if ratio * self.token_grid != h or ratio & (ratio - 1):
            raise ConfigError(f"resolution {h} must be a power-of-two multiple of the token grid {self.token_grid}")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if len(self.decoder_channels) != self.n_upsample_blocks:
            raise ConfigError(f"decoder_channels needs {self.n_upsample_blocks} entries, got {self.decoder_channels}")

    def to_json(self) -> str:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        if "decoder_channels" in d:
            d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale hybrid configuration (32^3, 2 downscalings, P=2, D=64, L=2)."""
    base = dict(input_resolution=32, cnn_downscalings=2, cnn_channels=16, patch_size=2, hidden_dim=64,
                n_layers=2, n_heads=4, mlp_dim=128, decoder_channels=(32, 16, 16))
    base.update(overrides)
    return ModelConfig(**base)


def vit_only_config(**overrides) -> ModelConfig:
    """ViT-only ablation: patches taken from the raw input, no CNN, no skips."""
    base = dict(input_resolution=32, vit_only=True, patch_size=8, hidden_dim=64, n_layers=2, n_heads=4,
                mlp_dim=128, decoder_channels=(32, 16, 16))
    base.update(overrides)
    return ModelConfig(**base)


# parameters ---------------------------------------------------------------------

def _conv_shape(k_out, c_in, k):
    return (k_out, c_in, k, k, k)


def parameter_shapes(config: ModelConfig) -> dict:
    """Name -> shape for every learnable tensor and normalisation buffer."""
    shapes = {}

    def conv(name, c_in, c_out, k):
        shapes[f"{name}.weight"] = _conv_shape(c_out, c_in, k)
        shapes[f"{name}.bias"] = (c_out,)

    def bn(name, c):
        for suffix in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"{name}.{suffix}"] = (c,)

    skip_ch = []
    if not config.vit_only:
        c_in = config.in_channels
        for i, c in enumerate(config.encoder_channels()):
            conv(f"enc.{i}.conv1", c_in, c, 3)
            bn(f"enc.{i}.bn1", c)
            conv(f"enc.{i}.conv2", c, c, 3)
            bn(f"enc.{i}.bn2", c)
            skip_ch.append(c)
            c_next = config.encoder_channels()[i + 1] if i + 1 < config.cnn_downscalings else config.cnn_channels
            conv(f"enc.{i}.down", c, c_next, 1)
            c_in = c_next
    d = config.hidden_dim
    shapes["embed.patch.weight"] = (config.patch_dim, d)
    shapes["embed.patch.bias"] = (d,)
    shapes["embed.position"] = (config.n_tokens, d)
    shapes["embed.time.weight"] = (1, d)
    shapes["embed.time.bias"] = (d,)
    for layer in range(config.n_layers):
        pre = f"transformer.{layer}"
        for ln in ("ln1", "ln2"):
            shapes[f"{pre}.{ln}.gamma"] = (d,)
            shapes[f"{pre}.{ln}.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{pre}.attn.w{proj}"] = (d, d)
            shapes[f"{pre}.attn.b{proj}"] = (d,)
        shapes[f"{pre}.mlp.fc1.weight"] = (d, config.mlp_dim)
        shapes[f"{pre}.mlp.fc1.bias"] = (config.mlp_dim,)
        shapes[f"{pre}.mlp.fc2.weight"] = (config.mlp_dim, d)
        shapes[f"{pre}.mlp.fc2.bias"] = (d,)
    dec = config.decoder_channels
    conv("dec.proj", d, dec[0], 3)
    bn("dec.proj.bn", dec[0])
    prev = dec[0]
    for i, c in enumerate(dec):
        extra = _skip_channels_for_block(config, i, skip_ch)
        conv(f"dec.{i}.conv1", prev + extra, c, 3)
        bn(f"dec.{i}.bn1", c)
        conv(f"dec.{i}.conv2", c, c, 3)
        bn(f"dec.{i}.bn2", c)
        prev = c
    conv("head", prev, config.n_classes, 1)
    return shapes


def _decoder_plan(config: ModelConfig) -> list:
    """Per block: (output resolution, skip index or None, max-pool factor)."""
    skips = config.skip_resolutions()
    plan = []
    res = config.token_grid
    for _ in range(config.n_upsample_blocks):
        res *= 2
        if not skips:
            plan.append((res, None, 1))
        elif res in skips:
            plan.append((res, skips.index(res), 1))
        elif res < skips[-1]:
            plan.append((res, len(skips) - 1, skips[-1] // res))
        else:
            raise nn.ShapeError(f"no encoder feature matches decoder resolution {res}")
    return plan


def _skip_channels_for_block(config, i, skip_ch):
    _, idx, _ = _decoder_plan(config)[i]
    return 0 if idx is None else skip_ch[idx]


def is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def no_decay(name: str) -> bool:
    """Norm parameters, biases and embeddings are excluded from weight decay."""
    return (name.endswith((".bias", ".gamma", ".beta")) or name in ("embed.position", "embed.time.weight")
            or ".attn.b" in name)


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("running_var") or name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith("running_mean") or name.endswith(".beta") or name.endswith("bias") or ".attn.b" in name:
            arr = np.zeros(shape)
        elif name == "embed.position":
            arr = rng.normal(0.0, 0.02, shape)
        elif name == "embed.time.weight":
            arr = rng.normal(0.0, 0.02, shape)
        elif len(shape) == 5:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, shape)
        params[name] = Tensor(arr, requires_grad=not is_buffer(name), name=name)
    return params


def parameter_count(params: dict) -> int:
    return int(sum(t.size for n, t in params.items() if not is_buffer(n)))


# forward pieces -------------------------------------------------------------------

def _conv_relu_bn(x, params, conv_name, bn_name, training, padding=1):
    x = ops.conv3d(x, params[f"{conv_name}.weight"], params[f"{conv_name}.bias"], 1, padding)
    x = ops.relu(x)
    return ops.batch_norm(x, params[f"{bn_name}.gamma"], params[f"{bn_name}.beta"],
                          params[f"{bn_name}.running_mean"].data, params[f"{bn_name}.running_var"].data,
                          training)


def cnn_encode(x: Tensor, params: dict, config: ModelConfig, training: bool = False):
    """Hybrid encoder CNN stage; returns (features, skips) with skips finest first."""
    expected = (config.in_channels,) + (config.input_resolution,) * 3
    if x.ndim != 5 or tuple(x.shape[1:]) != expected:
        raise nn.ShapeError(f"encoder expects [B, {expected}], got {x.shape}")
    skips = []
    for i in range(config.cnn_downscalings):
        x = _conv_relu_bn(x, params, f"enc.{i}.conv1", f"enc.{i}.bn1", training)
        x = _conv_relu_bn(x, params, f"enc.{i}.conv2", f"enc.{i}.bn2", training)
        skips.append(x)
        x = ops.conv3d(x, params[f"enc.{i}.down.weight"], params[f"enc.{i}.down.bias"], 2, 0)
    return x, skips


def patchify(features: Tensor, patch: int) -> Tensor:
    """[B, C, G*P, G*P, G*P] -> [B, G^3, P^3*C] with tokens in (x, y, z) raster order."""
    b, c, s = features.shape[0], features.shape[1], features.shape[2]
    if s % patch or features.shape[3] != s or features.shape[4] != s:
        raise ConfigError(f"cubic features of side {s} not divisible by patch size {patch}")
    g = s // patch
    t = reshape(features, (b, c, g, patch, g, patch, g, patch))
    t = transpose(t, (0, 2, 4, 6, 3, 5, 7, 1))
    return reshape(t, (b, g ** 3, patch ** 3 * c))


def tokenize_and_embed(features: Tensor, t, params: dict, config: ModelConfig) -> Tensor:
    """z0 = patches @ E + position embedding + time embedding (t / t_max, broadcast to all tokens)."""
    tokens = patchify(features, config.patch_size)
    z = ops.linear(tokens, params["embed.patch.weight"], params["embed.patch.bias"])
    z = z + params["embed.position"]
    b = features.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)) / config.t_max
    time_in = Tensor(tt.reshape(b, 1, 1), dtype=z.dtype)
    time_emb = ops.linear(time_in, params["embed.time.weight"], params["embed.time.bias"])
    return z + time_emb


def transformer_encode(z: Tensor, params: dict, config: ModelConfig) -> Tensor:
    for layer in range(config.n_layers):
        pre = f"transformer.{layer}"
        h = ops.layer_norm(z, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
        attn = {k: params[f"{pre}.attn.{k}"] for k in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}
        z = z + ops.multi_head_self_attention(h, attn, config.n_heads)
        h = ops.layer_norm(z, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"])
        h = ops.gelu(ops.linear(h, params[f"{pre}.mlp.fc1.weight"], params[f"{pre}.mlp.fc1.bias"]))
        z = z + ops.linear(h, params[f"{pre}.mlp.fc2.weight"], params[f"{pre}.mlp.fc2.bias"])
    return z


def decode(z: Tensor, skips: list, params: dict, config: ModelConfig, training: bool = False) -> Tensor:
    b, n, d = z.shape
    g = config.token_grid
    if n != g ** 3:
        raise nn.ShapeError(f"{n} tokens do not form a {g}^3 grid")
    x = transpose(reshape(z, (b, g, g, g, d)), (0, 4, 1, 2, 3))
    x = _conv_relu_bn(x, params, "dec.proj", "dec.proj.bn", training)
    for i, (res, idx, pool) in enumerate(_decoder_plan(config)):
        x = ops.trilinear_upsample(x, 2)
        if idx is not None:
            skip = skips[idx]
            if pool > 1:
                skip = ops.max_pool3d(skip, pool)
            if skip.shape[2:] != x.shape[2:]:
                raise nn.ShapeError(f"skip {skip.shape} does not match decoder {x.shape}")
            x = concat([x, skip], axis=1)
        x = _conv_relu_bn(x, params, f"dec.{i}.conv1", f"dec.{i}.bn1", training)
        x = _conv_relu_bn(x, params, f"dec.{i}.conv2", f"dec.{i}.bn2", training)
    return ops.conv3d(x, params["head.weight"], params["head.bias"], 1, 0)


def forward(x: Tensor, t, params: dict, config: ModelConfig, training: bool = False) -> Tensor:
    """Logits ``[B, n_classes, H, H, H]`` for input ``[B, in_channels, H, H, H]``."""
    if config.vit_only:
        features, skips = x, []
    else:
        features, skips = cnn_encode(x, params, config, training)
    z = tokenize_and_embed(features, t, params, config)
    z = transformer_encode(z, params, config)
    return decode(z, skips, params, config, training)


def encode_input(grids, config: ModelConfig, dtype=None) -> Tensor:
    """Lift label grids to network input channels."""
    arr = np.stack([g.array if isinstance(g, VoxelGrid) else np.asarray(g) for g in grids])
    res = config.input_resolution
    if arr.shape[1:] != (res,) * 3:
        raise ConfigError(f"grid dims {arr.shape[1:]} do not match model resolution {res}")
    if config.input_mode == "onehot":
        x = np.stack([arr == c for c in range(config.n_classes)], axis=1)
    else:
        x = np.repeat((arr > 0)[:, None], config.in_channels, axis=1)
    return Tensor(x.astype(dtype or nn.get_default_dtype()))


# loss ---------------------------------------------------------------------------

def loss_terms(logits: Tensor, target) -> tuple:
    """(total, cross-entropy, soft Dice) averaged over the batch.

    Per sample: CE is the mean negative log-softmax of the true class and the
    soft Dice is computed on the foreground class probabilities (classes
    1..C-1, averaged). The total is ``(CE + 1 - soft Dice) / 2``.
    """
    target = np.stack([t.array if isinstance(t, VoxelGrid) else np.asarray(t) for t in target]) \
        if isinstance(target, (list, tuple)) else np.asarray(target)
    n_classes = logits.shape[1]
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise nn.ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise DomainError(f"target labels must lie in [0, {n_classes})")
    onehot = np.stack([target == c for c in range(n_classes)], axis=1).astype(logits.dtype)
    spatial = tuple(range(2, logits.ndim))
    logp = ops.log_softmax(logits, axis=1)
    n_vox = int(np.prod(logits.shape[2:]))
    ce = -(logp * onehot).sum(axis=(1,) + spatial) * (1.0 / n_vox)  # [B]
    probs = logp.exp()
    fg = slice(1, n_classes) if n_classes > 1 else slice(0, 1)
    inter = (probs * onehot)[:, fg].sum(axis=spatial)
    denom = probs[:, fg].sum(axis=spatial) + onehot[:, fg].sum(axis=spatial)
    soft_dice = ((inter * 2.0 + 1e-6) / (denom + 1e-6)).mean(axis=1)  # [B]
    total = (ce + (1.0 - soft_dice)) * 0.5
    return total.mean(), ce.mean(), soft_dice.mean()


def loss(logits: Tensor, target) -> Tensor:
    return loss_terms(logits, target)[0]


# model wrapper ---------------------------------------------------------------------

@dataclass
class TransVNet:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "TransVNet":
        return cls(config, init_params(config, seed))

    def __call__(self, grids, t, training: bool = False) -> Tensor:
        return forward(encode_input(grids, self.config), t, self.params, self.config, training)

    def trainable(self) -> dict:
        return {n: p for n, p in self.params.items() if not is_buffer(n)}

    def state(self) -> dict:
        return {n: p.data for n, p in self.params.items()}

    def copy(self) -> "TransVNet":
        return TransVNet(self.config, {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)
                                       for n, p in self.params.items()})

    def predict_logits(self, grids, t) -> np.ndarray:
        with no_grad():
            return self(grids, t, training=False).data

    def predict_batch(self, grids, t) -> list:
        logits = self.predict_logits(grids, t)
        labels = logits.argmax(axis=1).astype(np.uint8)  # ties -> lower class
        return [VoxelGrid(lab, self.config.n_classes) for lab in labels]


def predict(grid: VoxelGrid, t: int, model: TransVNet) -> VoxelGrid:
    if grid.dims != (model.config.input_resolution,) * 3:
        raise ConfigError(f"grid {grid.dims} does not match model resolution {model.config.input_resolution}")
    return model.predict_batch([grid], [t])[0]


def rollout(grid: VoxelGrid, t0: int, steps: int, model: TransVNet, horizon: int = 1):
    """Autoregressive prediction; each output is fed back with ``t += horizon``."""
    from .degradation import EvolutionSequence

    frames = [grid]
    t = t0
    for _ in range(steps):
        frames.append(predict(frames[-1], t, model))
        t += horizon
    return EvolutionSequence(frames, source_id="rollout", meta={"t0": t0, "horizon": horizon})


# checkpoints -----------------------------------------------------------------------

def save_checkpoint(model_or_params, path) -> None:
    params = model_or_params.params if isinstance(model_or_params, TransVNet) else model_or_params
    save_tensors({n: p.data if isinstance(p, Tensor) else p for n, p in params.items()}, path)


def load_checkpoint(path, config: ModelConfig | None = None) -> dict:
    """Load named tensors; with ``config``, names and shapes are validated."""
    arrays = load_tensors(path)
    if config is not None:
        expected = parameter_shapes(config)
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        wrong = sorted(n for n in set(expected) & set(arrays) if tuple(arrays[n].shape) != tuple(expected[n]))
        if missing or extra or wrong:
            raise CheckpointError(f"checkpoint does not match config: missing={missing} unexpected={extra} "
                                  f"wrong_shape={[(n, arrays[n].shape, expected[n]) for n in wrong]}")
    return {n: Tensor(a, requires_grad=not is_buffer(n), name=n) for n, a in arrays.items()}


def save_model(model: TransVNet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(model.config.to_json())
    save_checkpoint(model, directory / "model.ovxw")


def load_model(directory) -> TransVNet:
    directory = Path(directory)
    config = ModelConfig.from_json((directory / "config.json").read_text())
    return TransVNet(config, load_checkpoint(directory / "model.ovxw", config))
