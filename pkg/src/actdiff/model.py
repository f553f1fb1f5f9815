"""Denoising network: a 1-D U-Net over the horizon axis.

The horizon is only a handful of steps, so the "U" keeps the sequence length
fixed: encoder stages of residual blocks push skips, a middle block follows,
and decoder stages consume the skips by channel concatenation. Every residual
block receives the timestep embedding; an optional self-attention block
follows each encoder and decoder stage.

Checkpoints are ``.npz`` archives holding ``__format__`` (int), ``__kind__``
and ``__config__`` (JSON text) and one little-endian float64 array per
parameter name.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = 1


class CheckpointError(ValueError):
    pass


_ACTIVATIONS = {"mish": ad.mish, "silu": ad.silu}


def _groups_for(channels: int, max_groups: int = 8, min_group_size: int = 4) -> int:
    for g in range(max_groups, 0, -1):
        if channels % g == 0 and channels // g >= min_group_size:
            return g
    return 1


class Layer:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Layer):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((fan_in, fan_out)) if zero else rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        self.weight = _param(w)
        self.bias = _param(np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class Conv1d(Layer):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, zero: bool = False,
                 bias: bool = True):
        fan_in = cin * kernel
        w = np.zeros((cout, cin, kernel)) if zero else rng.standard_normal((cout, cin, kernel)) / np.sqrt(fan_in)
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias)


class GroupNorm(Layer):
    def __init__(self, channels: int):
        self.groups = _groups_for(channels)
        self.scale = _param(np.ones(channels))
        self.shift = _param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.scale, self.shift, self.groups)


class LayerNorm(Layer):
    def __init__(self, dim: int):
        self.scale = _param(np.ones(dim))
        self.shift = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.scale, self.shift)


class ResidualBlock(Layer):
    """[norm -> act -> conv] x2 with the timestep projection added after the first conv."""

    def __init__(self, cin: int, cout: int, time_dim: int, rng, activation: str = "mish", kernel: int = 3):
        self.act = _ACTIVATIONS[activation]
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv1d(cin, cout, kernel, rng)
        self.time_proj = Linear(time_dim, cout, rng)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv1d(cout, cout, kernel, rng)
        self.skip = Conv1d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        t = self.time_proj(self.act(temb))
        h = ad.add(h, ad.reshape(t, (t.shape[0], 1, t.shape[1])))
        h = self.conv2(self.act(self.norm2(h)))
        return ad.add(h, self.skip(x) if self.skip is not None else x)


class AttentionBlock(Layer):
    """Single-head self-attention over horizon positions, residual form.

    Query, key and value come from 1x1 convolutions of the input; the output
    is ``x + softmax(Q K^T / sqrt(d)) V`` over (B, T, C) features. The key projection has no bias:
    it would shift every score of a query equally and cancel in the softmax.
    """

    def __init__(self, channels: int, rng):
        self.query = Conv1d(channels, channels, 1, rng)
        self.key = Conv1d(channels, channels, 1, rng, bias=False)
        self.value = Conv1d(channels, channels, 1, rng)
        self.scale = 1.0 / np.sqrt(channels)

    def weights(self, x: Tensor) -> Tensor:
        """Attention matrix (B, query position, key position)."""
        q, k = self.query(x), self.key(x)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), self.scale)
        return ad.softmax(scores, axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, ad.matmul(self.weights(x), self.value(x)))


def sinusoidal_embedding(n, dim: int) -> np.ndarray:
    """[sin(n f_i) | cos(n f_i)] with f_i = 10000^(-i / (dim/2)); n scalar or (B,)."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    n = np.asarray(n, dtype=np.float64)
    if np.any(n < 0):
        raise ValueError("timestep must be >= 0")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = n[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


@dataclass
class DenoiserConfig:
    input_width: int
    horizon: int
    channels: list[int] = field(default_factory=lambda: [64, 128, 256])
    attention_enabled: bool = True
    time_embed_dim: int = 64
    activation: str = "mish"
    kernel_size: int = 3
    num_stages: int | None = None

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if self.num_stages is None:
            self.num_stages = len(self.channels)
        if self.num_stages < 1 or len(self.channels) != self.num_stages:
            raise ValueError(f"channels {self.channels} must list one width per stage ({self.num_stages})")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.input_width < 1 or self.horizon < 1:
            raise ValueError("input_width and horizon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class Denoiser(Layer):
    """Maps a noised plan matrix batch (B, T, W) and steps (B,) to an x0 estimate."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c, tdim, act = config.channels, config.time_embed_dim, config.activation
        k = config.kernel_size
        self.act = _ACTIVATIONS[act]
        self.time_in = Linear(tdim, 4 * tdim, rng)
        self.time_out = Linear(4 * tdim, tdim, rng)
        self.in_conv = Conv1d(config.input_width, c[0], k, rng)
        self.down = []
        self.down_attn = []
        prev = c[0]
        for width in c:
            self.down.append(ResidualBlock(prev, width, tdim, rng, act, k))
            self.down_attn.append(AttentionBlock(width, rng) if config.attention_enabled else None)
            prev = width
        self.mid = ResidualBlock(prev, prev, tdim, rng, act, k)
        self.up = []
        self.up_attn = []
        for width in reversed(c):
            self.up.append(ResidualBlock(prev + width, width, tdim, rng, act, k))
            self.up_attn.append(AttentionBlock(width, rng) if config.attention_enabled else None)
            prev = width
        self.out_norm = GroupNorm(prev)
        self.out_conv = Conv1d(prev, config.input_width, 1, rng, zero=True)

    def time_embed(self, n) -> Tensor:
        n = np.atleast_1d(np.asarray(n))
        t = Tensor(sinusoidal_embedding(n, self.config.time_embed_dim))
        return self.time_out(self.act(self.time_in(t)))

    def forward(self, x: Tensor, n) -> Tensor:
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.horizon, cfg.input_width):
            raise ValueError(f"input shape {x.shape} != (B, {cfg.horizon}, {cfg.input_width})")
        n = np.broadcast_to(np.asarray(n), (x.shape[0],))
        temb = self.time_embed(n)
        h = self.in_conv(x)
        skips = []
        for block, attn in zip(self.down, self.down_attn):
            h = block(h, temb)
            if attn is not None:
                h = attn(h)
            skips.append(h)
        h = self.mid(h, temb)
        for block, attn in zip(self.up, self.up_attn):
            h = block(ad.concat([h, skips.pop()], axis=-1), temb)
            if attn is not None:
                h = attn(h)
        return self.out_conv(self.act(self.out_norm(h)))

    __call__ = forward


def predict_x0(model: Denoiser, x_n, n) -> np.ndarray:
    """Inference-mode x0 estimate for a plan matrix (T, W) or batch (B, T, W)."""
    x_n = np.asarray(x_n, dtype=np.float64)
    single = x_n.ndim == 2
    batch = x_n[None] if single else x_n
    out = model.forward(Tensor(batch), n).data
    return out[0] if single else out


def attention_parameter_count(model: Denoiser) -> int:
    return int(sum(p.data.size for name, p in model.named_parameters() if "_attn." in name))


# --------------------------------------------------------------------------
# checkpoints


def save_parameters(path, layer: Layer, kind: str, config: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    arrays = {"__format__": np.array(CHECKPOINT_FORMAT, dtype="<i8"),
              "__kind__": np.array(kind),
              "__config__": np.array(json.dumps(config, sort_keys=True))}
    if extra:
        arrays["__extra__"] = np.array(json.dumps(extra, sort_keys=True))
    for name, p in layer.named_parameters():
        arrays[name] = np.ascontiguousarray(p.data, dtype="<f8")
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def read_checkpoint(path, kind: str) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return (config, parameters, extra) after format and integrity checks."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            names = list(z.files)
            for meta in ("__format__", "__kind__", "__config__"):
                if meta not in names:
                    raise CheckpointError(f"{path}: missing entry {meta!r}")
            fmt = int(z["__format__"])
            if fmt != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: format {fmt} != {CHECKPOINT_FORMAT}")
            found_kind = str(z["__kind__"])
            if found_kind != kind:
                raise CheckpointError(f"{path}: checkpoint kind {found_kind!r}, expected {kind!r}")
            config = json.loads(str(z["__config__"]))
            extra = json.loads(str(z["__extra__"])) if "__extra__" in names else {}
            params = {}
            for name in names:
                if name.startswith("__"):
                    continue
                try:
                    arr = z[name]
                except (ValueError, OSError, zipfile.BadZipFile, EOFError) as e:
                    raise CheckpointError(f"{path}: parameter {name!r} unreadable ({e})") from None
                if arr.dtype != np.dtype("<f8"):
                    raise CheckpointError(f"{path}: parameter {name!r} has dtype {arr.dtype}, expected <f8")
                params[name] = arr
    except CheckpointError:
        raise
    except FileNotFoundError:
        raise CheckpointError(f"{path}: file not found") from None
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as e:
        raise CheckpointError(f"{path}: corrupted checkpoint ({type(e).__name__}: {e})") from None
    return config, params, extra


def load_parameters_into(layer: Layer, params: dict[str, np.ndarray], path="checkpoint") -> None:
    expected = dict(layer.named_parameters())
    for name in params:
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
    for name, p in expected.items():
        if name not in params:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        arr = params[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {arr.shape}, expected {p.shape}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: parameter {name!r} contains non-finite values")
        p.assign(arr)


def save_denoiser(model: Denoiser, path, extra: dict | None = None) -> Path:
    return save_parameters(path, model, "denoiser", model.config.to_dict(), extra)


def load_denoiser(path) -> Denoiser:
    config, params, _ = read_checkpoint(path, "denoiser")
    try:
        model = Denoiser(DenoiserConfig(**config))
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid config echo ({e})") from None
    load_parameters_into(model, params, path)
    return model
