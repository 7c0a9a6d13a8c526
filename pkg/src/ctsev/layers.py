"""Neural network layers with explicit forward and backward passes.

All activations and parameters are Tensors of shape [B, C, D, H, W] (or
[B, features] past the pooling head). Convolution uses the cross-correlation
convention (no kernel flip). Each backward pass returns exact analytic
gradients of its forward expression; the test suite verifies every layer
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, LabelError, ShapeError
from .tensor import Tensor, active_dtype

Triple = tuple[int, int, int]


def _out_extent(size: int, pad: int, k: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# -- 3D convolution ----------------------------------------------------------


class Conv3dLayer:
    """Strided, zero-padded 3D cross-correlation with bias."""

    def __init__(
        self,
        weights: Tensor,
        bias: Tensor,
        stride: Triple = (1, 1, 1),
        padding: Triple = (0, 0, 0),
    ) -> None:
        if weights.rank != 5:
            raise ShapeError(f"conv weights must be rank 5, got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ShapeError(
                f"bias shape {bias.shape} does not match out-channels {weights.shape[0]}"
            )
        self.weights = weights
        self.bias = bias
        self.stride = tuple(int(s) for s in stride)
        self.padding = tuple(int(p) for p in padding)
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ConfigError(f"invalid stride {stride} or padding {padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    def output_shape(self, input_shape) -> tuple[int, ...]:
        b, c, *spatial = input_shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv expects {self.in_channels} input channels, got input shape {tuple(input_shape)}"
            )
        kernel = self.weights.shape[2:]
        out = [_out_extent(n, p, k, s) for n, p, k, s in zip(spatial, self.padding, kernel, self.stride)]
        if any(e < 1 for e in out):
            raise ShapeError(
                f"conv output extent < 1 for input {tuple(input_shape)}, kernel {kernel}, "
                f"stride {self.stride}, padding {self.padding}"
            )
        return (b, self.out_channels, *out)

    def _padded_windows(self, x: np.ndarray) -> np.ndarray:
        pd, ph, pw = self.padding
        sd, sh, sw = self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        win = sliding_window_view(xp, self.weights.shape[2:], axis=(2, 3, 4))
        return win[:, :, ::sd, ::sh, ::sw]

    def forward(self, x: Tensor) -> tuple[Tensor, dict]:
        out_shape = self.output_shape(x.shape)
        win = self._padded_windows(x.array)
        # win: [B, C, D', H', W', kd, kh, kw] contracted with w: [O, C, kd, kh, kw]
        out = np.tensordot(win, self.weights.array, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out = np.moveaxis(out, -1, 1) + self.bias.array.reshape(1, -1, 1, 1, 1)
        out = np.ascontiguousarray(out, dtype=active_dtype())
        assert out.shape == out_shape
        cache = {"x": x.array, "out_shape": out_shape}
        return Tensor(out), cache

    def backward(self, cache: dict, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        x = cache["x"]
        if grad_out.shape != cache["out_shape"]:
            raise ShapeError(
                f"stale cache: grad shape {grad_out.shape} != forward output {cache['out_shape']}"
            )
        g = grad_out.array
        grad_bias = g.sum(axis=(0, 2, 3, 4), dtype=active_dtype())

        win = self._padded_windows(x)
        # contract over batch and output positions -> [C, kd, kh, kw, O]
        grad_w = np.tensordot(win, g, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        grad_w = np.ascontiguousarray(np.moveaxis(grad_w, -1, 0), dtype=active_dtype())

        pd, ph, pw = self.padding
        sd, sh, sw = self.stride
        b, c, d, h, w = x.shape
        _, o, do, ho, wo = g.shape
        kd, kh, kw = self.weights.shape[2:]
        gp = np.zeros((b, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=active_dtype())
        wt = self.weights.array
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    # [B, D', H', W', C] contribution of kernel tap (i, j, k)
                    contrib = np.tensordot(g, wt[:, :, i, j, k], axes=([1], [0]))
                    contrib = np.moveaxis(contrib, -1, 1)
                    gp[
                        :,
                        :,
                        i : i + sd * (do - 1) + 1 : sd,
                        j : j + sh * (ho - 1) + 1 : sh,
                        k : k + sw * (wo - 1) + 1 : sw,
                    ] += contrib
        grad_x = gp[:, :, pd : pd + d, ph : ph + h, pw : pw + w]
        return Tensor(grad_x), Tensor(grad_w), Tensor(grad_bias)

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]


def conv3d_forward(layer: Conv3dLayer, x: Tensor) -> tuple[Tensor, dict]:
    return layer.forward(x)


def conv3d_backward(layer: Conv3dLayer, cache: dict, grad_out: Tensor):
    return layer.backward(cache, grad_out)


def conv3d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride, padding) -> np.ndarray:
    """Direct-summation oracle: seven nested loops over the defining formula.

    Kept deliberately independent of the windowed implementation; used by
    the test suite as the equivalence reference.
    """
    sd, sh, sw = stride
    pd, ph, pw = padding
    bs, c, d, h, wd = x.shape
    o, _, kd, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    do = _out_extent(d, pd, kd, sd)
    ho = _out_extent(h, ph, kh, sh)
    wo = _out_extent(wd, pw, kw, sw)
    out = np.zeros((bs, o, do, ho, wo), dtype=np.float64)
    for bi in range(bs):
        for oi in range(o):
            for z in range(do):
                for y in range(ho):
                    for xq in range(wo):
                        acc = float(b[oi])
                        for ci in range(c):
                            for i in range(kd):
                                for j in range(kh):
                                    for k in range(kw):
                                        acc += (
                                            w[oi, ci, i, j, k]
                                            * xp[bi, ci, z * sd + i, y * sh + j, xq * sw + k]
                                        )
                        out[bi, oi, z, y, xq] = acc
    return out


# -- activation, dropout, pooling --------------------------------------------


def relu_forward(x: Tensor) -> tuple[Tensor, dict]:
    arr = x.array
    return Tensor(np.maximum(arr, 0)), {"positive": arr > 0}


def relu_backward(cache: dict, grad_out: Tensor) -> Tensor:
    # gradient at exactly 0 is defined as 0
    return Tensor(np.where(cache["positive"], grad_out.array, 0))


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _keyed_uniform(key: tuple[int, int, int], n: int) -> np.ndarray:
    """Counter-based uniforms in [0, 1): element i depends only on (key, i)."""
    seed, layer_id, step = (np.uint64(v & 0xFFFFFFFFFFFFFFFF) for v in key)
    with np.errstate(over="ignore"):  # wraparound is the point
        base = _splitmix64(seed * _GOLDEN + np.uint64(1))
        base = _splitmix64(base ^ _splitmix64(layer_id + _GOLDEN))
        base = _splitmix64(base ^ _splitmix64(step + (_GOLDEN * np.uint64(2))))
        idx = np.arange(n, dtype=np.uint64)
        bits = _splitmix64(base + (idx + np.uint64(1)) * _GOLDEN)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def dropout_forward(
    x: Tensor, rate: float, rng_key: tuple[int, int, int], training: bool = True
) -> tuple[Tensor, np.ndarray | None]:
    """Inverted dropout: keep with probability 1-rate, scale kept values by
    1/(1-rate). The mask is a pure function of rng_key, so training forwards
    replay bit-identically. Inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    u = _keyed_uniform(rng_key, x.size).reshape(x.shape)
    mask = (u >= rate).astype(active_dtype()) / active_dtype().type(1.0 - rate)
    return Tensor(x.array * mask), mask


def dropout_backward(mask: np.ndarray | None, grad_out: Tensor) -> Tensor:
    if mask is None:
        return grad_out
    return Tensor(grad_out.array * mask)


def global_avg_pool3d(x: Tensor) -> tuple[Tensor, dict]:
    """Mean over the spatial axes: [B, C, D, H, W] -> [B, C]."""
    if x.rank != 5:
        raise ShapeError(f"global pool expects rank-5 input, got shape {x.shape}")
    arr = x.array
    out = arr.mean(axis=(2, 3, 4), dtype=np.float64).astype(active_dtype())
    return Tensor(out), {"spatial_shape": arr.shape}


def global_avg_pool3d_backward(cache: dict, grad_out: Tensor) -> Tensor:
    b, c, d, h, w = cache["spatial_shape"]
    g = grad_out.array.reshape(b, c, 1, 1, 1) / active_dtype().type(d * h * w)
    return Tensor(np.broadcast_to(g, (b, c, d, h, w)).copy())


# -- dense head and loss ------------------------------------------------------


class DenseLayer:
    """Affine map y = x @ W.T + b with weights of shape [n_out, n_in]."""

    def __init__(self, weights: Tensor, bias: Tensor) -> None:
        if weights.rank != 2 or bias.shape != (weights.shape[0],):
            raise ShapeError(
                f"dense weights {weights.shape} and bias {bias.shape} are inconsistent"
            )
        self.weights = weights
        self.bias = bias

    def forward(self, x: Tensor) -> tuple[Tensor, dict]:
        if x.rank != 2 or x.shape[1] != self.weights.shape[1]:
            raise ShapeError(
                f"dense expects input [B, {self.weights.shape[1]}], got {x.shape}"
            )
        out = x.array @ self.weights.array.T + self.bias.array
        return Tensor(out), {"x": x.array}

    def backward(self, cache: dict, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        g = grad_out.array
        grad_w = g.T @ cache["x"]
        grad_b = g.sum(axis=0, dtype=active_dtype())
        grad_x = g @ self.weights.array
        return Tensor(grad_x), Tensor(grad_w), Tensor(grad_b)

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean negative log-likelihood over the batch plus its logits gradient.

    Computed with max-subtraction; grad_logits = (softmax - onehot) / B.
    """
    labels = np.asarray(labels)
    arr = logits.array.astype(np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"logits must be [B, n_classes], got {logits.shape}")
    b, n_classes = arr.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(f"labels must lie in [0, {n_classes - 1}]")
    shifted = arr - arr.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(b), labels]))
    grad = softmax(arr)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, Tensor(grad.astype(active_dtype()))


# -- residual block -----------------------------------------------------------


@dataclass
class ResidualBlock3d:
    """y = relu(conv2(relu(conv1(x))) + skip(x)).

    conv1 may stride for downsampling; skip is the identity unless channel
    counts differ or the block downsamples, in which case it is a strided
    1x1x1 projection.
    """

    conv1: Conv3dLayer
    conv2: Conv3dLayer
    projection: Conv3dLayer | None = None

    def forward(self, x: Tensor) -> tuple[Tensor, dict]:
        h1, c1 = self.conv1.forward(x)
        a1, r1 = relu_forward(h1)
        h2, c2 = self.conv2.forward(a1)
        if self.projection is not None:
            skip, cp = self.projection.forward(x)
        else:
            skip, cp = x, None
        if skip.shape != h2.shape:
            raise ShapeError(
                f"residual paths disagree: conv path {h2.shape} vs skip {skip.shape}"
            )
        y, r2 = relu_forward(Tensor(h2.array + skip.array))
        return y, {"c1": c1, "r1": r1, "c2": c2, "cp": cp, "r2": r2}

    def backward(self, cache: dict, grad_out: Tensor) -> tuple[Tensor, list[Tensor]]:
        g_sum = relu_backward(cache["r2"], grad_out)
        g_a1, gw2, gb2 = self.conv2.backward(cache["c2"], g_sum)
        g_h1 = relu_backward(cache["r1"], g_a1)
        g_x, gw1, gb1 = self.conv1.backward(cache["c1"], g_h1)
        grads = [gw1, gb1, gw2, gb2]
        if self.projection is not None:
            g_skip, gwp, gbp = self.projection.backward(cache["cp"], g_sum)
            grads += [gwp, gbp]
        else:
            g_skip = g_sum
        return Tensor(g_x.array + g_skip.array), grads

    def parameters(self) -> list[Tensor]:
        params = self.conv1.parameters() + self.conv2.parameters()
        if self.projection is not None:
            params += self.projection.parameters()
        return params


def residual_block_forward(block: ResidualBlock3d, x: Tensor) -> tuple[Tensor, dict]:
    return block.forward(x)


def residual_block_backward(block: ResidualBlock3d, cache: dict, grad_out: Tensor):
    return block.backward(cache, grad_out)
