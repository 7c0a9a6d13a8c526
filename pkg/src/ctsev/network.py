"""Network presets and the full classifier: stem conv, four residual stages,
and a pooled ReLU/dropout/dense head producing 3-class logits.

Presets fix total residual block counts of 16 (s50), 33 (s100) and 50
(s152); `nano` is the small configuration used for desk-scale experiments.
A `planar` build replaces every kernel with its depth-1 analog and disables
depth striding, yielding the 2D per-slice baseline from the same code path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    Conv3dLayer,
    DenseLayer,
    ResidualBlock3d,
    dropout_backward,
    dropout_forward,
    global_avg_pool3d,
    global_avg_pool3d_backward,
    relu_backward,
    relu_forward,
)
from .tensor import Tensor, active_dtype

N_CLASSES = 3
_HEAD_DROPOUT_LAYER_ID = 1


@dataclass(frozen=True)
class NetworkPreset:
    name: str
    blocks_per_stage: tuple[int, int, int, int]
    base_channels: int
    dropout_rate: float = 0.5

    def __post_init__(self):
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError(f"blocks_per_stage must be positive, got {self.blocks_per_stage}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def total_blocks(self) -> int:
        return sum(self.blocks_per_stage)


_PRESET_LAYOUTS: dict[str, tuple[tuple[int, int, int, int], int]] = {
    "nano": ((1, 1, 1, 1), 8),
    "s50": ((2, 4, 6, 4), 16),
    "s100": ((3, 8, 14, 8), 16),
    "s152": ((6, 12, 20, 12), 16),
}


def get_preset(
    name: str,
    base_channels: int | None = None,
    dropout_rate: float = 0.5,
) -> NetworkPreset:
    if name not in _PRESET_LAYOUTS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(_PRESET_LAYOUTS)}")
    blocks, default_base = _PRESET_LAYOUTS[name]
    return NetworkPreset(
        name=name,
        blocks_per_stage=blocks,
        base_channels=base_channels if base_channels is not None else default_base,
        dropout_rate=dropout_rate,
    )


def preset_descriptor(preset: NetworkPreset, planar: bool) -> dict:
    return {
        "name": preset.name,
        "blocks_per_stage": list(preset.blocks_per_stage),
        "base_channels": preset.base_channels,
        "dropout_rate": preset.dropout_rate,
        "planar": planar,
    }


def config_digest(preset: NetworkPreset, planar: bool) -> str:
    blob = json.dumps(preset_descriptor(preset, planar), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class Network:
    """Stem conv -> residual stages -> pool/ReLU/dropout/dense head."""

    def __init__(
        self,
        preset: NetworkPreset,
        stem: Conv3dLayer,
        blocks: list[ResidualBlock3d],
        head: DenseLayer,
        planar: bool = False,
    ) -> None:
        self.preset = preset
        self.stem = stem
        self.blocks = blocks
        self.head = head
        self.planar = planar

    @property
    def num_residual_blocks(self) -> int:
        return len(self.blocks)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """All trainable parameters in a fixed, serialization-stable order."""
        params: list[tuple[str, Tensor]] = [
            ("stem.weights", self.stem.weights),
            ("stem.bias", self.stem.bias),
        ]
        for i, block in enumerate(self.blocks):
            params.append((f"block{i}.conv1.weights", block.conv1.weights))
            params.append((f"block{i}.conv1.bias", block.conv1.bias))
            params.append((f"block{i}.conv2.weights", block.conv2.weights))
            params.append((f"block{i}.conv2.bias", block.conv2.bias))
            if block.projection is not None:
                params.append((f"block{i}.projection.weights", block.projection.weights))
                params.append((f"block{i}.projection.bias", block.projection.bias))
        params.append(("head.weights", self.head.weights))
        params.append(("head.bias", self.head.bias))
        return params

    def forward(
        self,
        batch: Tensor,
        mode: str = "infer",
        rng_key: tuple[int, int] | None = None,
    ) -> tuple[Tensor, dict]:
        """Run the network; returns logits [B, 3] and the backward cache.

        `mode` is "train" (dropout active, rng_key=(seed, step) required) or
        "infer" (dropout bypassed, deterministic).
        """
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown forward mode {mode!r}")
        if batch.rank != 5:
            raise ShapeError(f"network input must be [B, 1, D, H, W], got {batch.shape}")
        training = mode == "train"
        if training and rng_key is None:
            raise ConfigError("training forward requires an rng_key=(seed, step)")
        x, stem_cache = self.stem.forward(batch)
        block_caches = []
        for block in self.blocks:
            x, cache = block.forward(x)
            block_caches.append(cache)
        pooled, pool_cache = global_avg_pool3d(x)
        feat, relu_cache = relu_forward(pooled)
        if training:
            seed, step = rng_key  # type: ignore[misc]
            feat, drop_mask = dropout_forward(
                feat, self.preset.dropout_rate, (seed, _HEAD_DROPOUT_LAYER_ID, step), training=True
            )
        else:
            drop_mask = None
        logits, head_cache = self.head.forward(feat)
        cache = {
            "stem": stem_cache,
            "blocks": block_caches,
            "pool": pool_cache,
            "relu": relu_cache,
            "dropout_mask": drop_mask,
            "head": head_cache,
        }
        return logits, cache

    def backward(self, cache: dict, grad_logits: Tensor) -> list[Tensor]:
        """Gradients for every parameter, aligned with parameters()."""
        g, gw_head, gb_head = self.head.backward(cache["head"], grad_logits)
        g = dropout_backward(cache["dropout_mask"], g)
        g = relu_backward(cache["relu"], g)
        g = global_avg_pool3d_backward(cache["pool"], g)
        block_grads: list[list[Tensor]] = []
        for block, bcache in zip(reversed(self.blocks), reversed(cache["blocks"])):
            g, grads = block.backward(bcache, g)
            block_grads.append(grads)
        block_grads.reverse()
        _, gw_stem, gb_stem = self.stem.backward(cache["stem"], g)
        flat: list[Tensor] = [gw_stem, gb_stem]
        for grads in block_grads:
            flat.extend(grads)
        flat.extend([gw_head, gb_head])
        return flat


def network_forward(net: Network, batch: Tensor, mode: str, rng_key=None):
    return net.forward(batch, mode, rng_key)


def network_backward(net: Network, cache: dict, grad_logits: Tensor) -> list[Tensor]:
    return net.backward(cache, grad_logits)


def _he_tensor(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(active_dtype()))


def _make_conv(
    rng: np.random.Generator,
    in_ch: int,
    out_ch: int,
    kernel: tuple[int, int, int],
    stride: tuple[int, int, int],
    padding: tuple[int, int, int],
) -> Conv3dLayer:
    fan_in = in_ch * kernel[0] * kernel[1] * kernel[2]
    weights = _he_tensor(rng, (out_ch, in_ch, *kernel), fan_in)
    bias = Tensor(np.zeros(out_ch, dtype=active_dtype()))
    return Conv3dLayer(weights, bias, stride=stride, padding=padding)


def build_network(preset: NetworkPreset, seed: int, planar: bool = False) -> Network:
    """Construct a network with fan-in-scaled Gaussian conv weights, zero
    biases, and a zero-initialized classifier head.

    The zero head makes the initial prediction exactly uniform (first-batch
    loss ln 3) at any input scale; without normalization layers the residual
    sums grow activation variance with depth, so a Gaussian head would start
    with large, seed-dependent logits. Parameter draws happen in a fixed
    layer order from a PCG64 stream, so identical (preset, seed, planar)
    builds are bit-identical.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    if planar:
        k3, s2, p1 = (1, 3, 3), (1, 2, 2), (0, 1, 1)
    else:
        k3, s2, p1 = (3, 3, 3), (2, 2, 2), (1, 1, 1)
    s1 = (1, 1, 1)
    k1 = (1, 1, 1)
    p0 = (0, 0, 0)

    stem = _make_conv(rng, 1, preset.base_channels, k3, s2, p1)
    blocks: list[ResidualBlock3d] = []
    in_ch = preset.base_channels
    for stage, n_blocks in enumerate(preset.blocks_per_stage):
        out_ch = preset.base_channels * (2 ** (stage + 1))
        for b in range(n_blocks):
            first = b == 0
            stride = s2 if first else s1
            conv1 = _make_conv(rng, in_ch, out_ch, k3, stride, p1)
            conv2 = _make_conv(rng, out_ch, out_ch, k3, s1, p1)
            projection = None
            if first:  # channels double and the block downsamples
                projection = _make_conv(rng, in_ch, out_ch, k1, stride, p0)
            blocks.append(ResidualBlock3d(conv1, conv2, projection))
            in_ch = out_ch
    head = DenseLayer(
        Tensor(np.zeros((N_CLASSES, in_ch), dtype=active_dtype())),
        Tensor(np.zeros(N_CLASSES, dtype=active_dtype())),
    )
    return Network(preset=preset, stem=stem, blocks=blocks, head=head, planar=planar)
