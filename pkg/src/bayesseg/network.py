"""Scaled-down Bayesian FC-DenseNet with a logit head and a softplus variance head."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .kvfile import ConfigError, coerce, format_kv, parse_kv
from .tensor import (
    RngStream,
    ShapeError,
    avg_pool2,
    concat_channels,
    conv2d,
    dropout,
    nearest_upsample2,
    relu,
    softplus,
)

CHECKPOINT_MAGIC = b"BFCDN1\n"
CONFIG_SENTINEL = b"CONFIG\n"


@dataclass
class NetworkConfig:
    num_classes: int = 5
    growth_rate: int = 8
    layers_per_dense_block: int = 2
    num_pool_levels: int = 2
    initial_channels: int = 16
    dropout_rate: float = 0.4
    kernel_size: int = 3
    # dropout on the raw image before the first convolution; 0 keeps the
    # dropout-off pass close to the MC average
    input_dropout_rate: float = 0.0

    def validate(self) -> "NetworkConfig":
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("growth_rate", "layers_per_dense_block", "initial_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_pool_levels < 0:
            raise ValueError(f"num_pool_levels must be >= 0, got {self.num_pool_levels}")
        for name in ("dropout_rate", "input_dropout_rate"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        return self

    @property
    def size_multiple(self) -> int:
        return 2 ** self.num_pool_levels

    def to_kv(self) -> dict:
        return {f"network.{k}": v for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, items: dict) -> "NetworkConfig":
        defaults = cls()
        kwargs = {}
        for f in fields(cls):
            key = f"network.{f.name}"
            if key in items:
                raw, line = items[key]
                kwargs[f.name] = coerce(raw, getattr(defaults, f.name), key, line)
        return cls(**kwargs).validate()


class ConvUnit(nn.Module):
    """A convolution preceded by its own dropout site."""

    def __init__(self, cin: int, cout: int, kernel_size: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(cout, cin, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x, drop):
        return conv2d(drop(x), self.weight, self.bias, padding="same")


class DenseBlock(nn.Module):
    """Each layer sees the concatenation of the block input and all earlier layer outputs."""

    def __init__(self, cin: int, n_layers: int, growth: int, kernel_size: int):
        super().__init__()
        self.cin = cin
        self.growth = growth
        self.layers = nn.ModuleList(
            ConvUnit(cin + i * growth, growth, kernel_size) for i in range(n_layers)
        )

    def forward(self, x, drop, keep_input: bool = True):
        features = x
        new = []
        for layer in self.layers:
            out = layer(relu(features), drop)
            new.append(out)
            features = concat_channels(features, out)
        if keep_input:
            return features
        return concat_channels(*new)


class TransitionDown(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = ConvUnit(channels, channels, 1)

    def forward(self, x, drop):
        return avg_pool2(self.conv(relu(x), drop))


class BFCDenseNet(nn.Module):
    """Encoder-decoder DenseNet returning logits ``z`` [N,C,H,W] and variance ``v`` [N,1,H,W]."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config.validate()
        k, g, m = config.kernel_size, config.growth_rate, config.layers_per_dense_block
        levels = config.num_pool_levels

        self.stem = ConvUnit(1, config.initial_channels, k)
        c = config.initial_channels
        skips = []
        self.down_blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for _ in range(levels):
            block = DenseBlock(c, m, g, k)
            self.down_blocks.append(block)
            c += m * g
            skips.append(c)
            self.transitions.append(TransitionDown(c))

        self.bottleneck = DenseBlock(c, m, g, k)
        if levels == 0:
            c += m * g
        else:
            c = m * g

        self.up_blocks = nn.ModuleList()
        for level in reversed(range(levels)):
            cin = c + skips[level]
            self.up_blocks.append(DenseBlock(cin, m, g, k))
            c = cin + m * g if level == 0 else m * g

        self.feature_channels = c
        self.logit_head = ConvUnit(c, config.num_classes, 1)
        self.variance_head = ConvUnit(c, 1, 1)

    def check_input(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected input of shape [N,1,H,W], got {tuple(x.shape)}")
        mult = self.config.size_multiple
        if x.shape[2] % mult or x.shape[3] % mult:
            raise ShapeError(
                f"input spatial dims {tuple(x.shape[2:])} must be divisible by {mult} "
                f"(num_pool_levels={self.config.num_pool_levels})"
            )

    def forward(self, x, dropout_enabled: bool = False, rng: RngStream | None = None,
                dropout_rate: float | None = None, shared_masks: bool = False):
        """``shared_masks`` applies one dropout mask per site to the whole batch."""
        self.check_input(x)
        rate = self.config.dropout_rate if dropout_rate is None else dropout_rate

        input_rate = self.config.input_dropout_rate if rate > 0 else 0.0

        def drop(t):
            return dropout(t, rate, rng, dropout_enabled, shared_masks)

        h = self.stem(x, lambda t: dropout(t, input_rate, rng, dropout_enabled, shared_masks))
        skips = []
        for block, down in zip(self.down_blocks, self.transitions):
            h = block(h, drop)
            skips.append(h)
            h = down(h, drop)

        levels = self.config.num_pool_levels
        h = self.bottleneck(h, drop, keep_input=(levels == 0))
        for i, block in enumerate(self.up_blocks):
            level = levels - 1 - i
            h = concat_channels(nearest_upsample2(h), skips[level])
            h = block(h, drop, keep_input=(level == 0))

        features = relu(h)
        z = self.logit_head(features, drop)
        v = softplus(self.variance_head(features, drop))
        return z, v


def _conv_params(cin: int, cout: int, k: int) -> int:
    return cout * cin * k * k + cout


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form parameter census of :class:`BFCDenseNet` for ``config``."""
    k, g, m = config.kernel_size, config.growth_rate, config.layers_per_dense_block
    levels = config.num_pool_levels

    def block(cin):
        return sum(_conv_params(cin + i * g, g, k) for i in range(m))

    total = _conv_params(1, config.initial_channels, k)
    c = config.initial_channels
    skips = []
    for _ in range(levels):
        total += block(c)
        c += m * g
        skips.append(c)
        total += _conv_params(c, c, 1)
    total += block(c)
    c = c + m * g if levels == 0 else m * g
    for level in reversed(range(levels)):
        cin = c + skips[level]
        total += block(cin)
        c = cin + m * g if level == 0 else m * g
    total += _conv_params(c, config.num_classes, 1) + _conv_params(c, 1, 1)
    return total


def build(config: NetworkConfig, seed: int = 0) -> BFCDenseNet:
    """He fan-in normal initialisation of all kernels, zero biases."""
    model = BFCDenseNet(config)
    gen = RngStream(seed, "init").torch
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("weight"):
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.copy_(torch.randn(p.shape, generator=gen) * np.sqrt(2.0 / fan_in))
            else:
                p.zero_()
    return model


def weights_checksum(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().float().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def save_checkpoint(path, model: BFCDenseNet, extra: dict | None = None) -> None:
    """Write the binary checkpoint; ``extra`` key/values are appended to the config text."""
    chunks = [CHECKPOINT_MAGIC]
    for name, tensor in model.state_dict().items():
        raw_name = name.encode("utf-8")
        arr = tensor.detach().cpu().float().numpy()
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    items = model.config.to_kv()
    items.update(extra or {})
    chunks.append(CONFIG_SENTINEL)
    chunks.append(format_kv(items).encode("utf-8"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[BFCDenseNet, dict]:
    """Read a checkpoint; returns the model and the raw ``{key: value}`` config items."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a BFCDN1 checkpoint (bad header)")
    pos = len(CHECKPOINT_MAGIC)
    tensors = {}
    try:
        while not data.startswith(CONFIG_SENTINEL, pos):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            tensors[name] = torch.from_numpy(values.reshape(dims).astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt parameter record at byte {pos}: {exc}") from None
    text = data[pos + len(CONFIG_SENTINEL):].decode("utf-8")
    try:
        items = parse_kv(text, source=f"{path} [CONFIG]")
        config = NetworkConfig.from_kv(items)
    except (ConfigError, ValueError) as exc:
        raise CheckpointError(str(exc)) from None
    model = BFCDenseNet(config)
    expected = model.state_dict()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        unexpected = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: parameter mismatch, missing={missing} unexpected={unexpected}")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"{path}: {name} has shape {tuple(t.shape)}, config implies {tuple(expected[name].shape)}"
            )
    model.load_state_dict(tensors)
    return model, {k: v for k, (v, _) in items.items()}
