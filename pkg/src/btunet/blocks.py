"""Differentiable building blocks shared by all four segmentation variants.

Every convolution here is depthwise separable, batch-normalized, and
ReLU-activated (conv -> BN -> ReLU); pooling always halves the spatial
dims. Blocks are Modules so their named parameters flow into checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import Module, Tensor
from .errors import ConfigError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def ds_conv_param_count(c_in: int, c_out: int, kernel: int, bias: bool = True) -> int:
    """Trainable parameter count of one depthwise separable convolution."""
    return kernel * kernel * c_in + c_in * c_out + (c_out if bias else 0)


class DepthwiseSeparableConv(Module):
    """k x k per-channel conv followed by a 1x1 channel-mixing conv."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, *, rng, dtype=np.float32,
                 bias: bool = True):
        super().__init__()
        if kernel % 2 == 0 or kernel < 1:
            raise ConfigError(f"kernel must be odd and positive, got {kernel}")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.depthwise = E.he_uniform(rng, (kernel, kernel, c_in), kernel * kernel, dtype)
        self.pointwise = E.he_uniform(rng, (c_in, c_out), c_in, dtype)
        self.bias = E.zeros_param((c_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[3] != self.c_in:
            raise ConfigError(
                f"input shape {x.data.shape} incompatible with conv expecting {self.c_in} channels"
            )
        n, h, w, _ = x.data.shape
        y = E.depthwise_conv2d(x, self.depthwise)
        y = E.reshape(y, (n * h * w, self.c_in)) @ self.pointwise
        if self.bias is not None:
            y = y + self.bias
        return E.reshape(y, (n, h, w, self.c_out))


class PointwiseConv(Module):
    """1x1 convolution (channel mixing), optionally subsampling by 2 first."""

    def __init__(self, c_in: int, c_out: int, *, rng, dtype=np.float32, bias: bool = True,
                 stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {stride}")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.weight = E.he_uniform(rng, (c_in, c_out), c_in, dtype)
        self.bias = E.zeros_param((c_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[3] != self.c_in:
            raise ConfigError(
                f"input shape {x.data.shape} incompatible with 1x1 conv expecting {self.c_in} channels"
            )
        if self.stride == 2:
            x = E.subsample2(x)
        n, h, w, _ = x.data.shape
        y = E.reshape(x, (n * h * w, self.c_in)) @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return E.reshape(y, (n, h, w, self.c_out))


class BatchNorm(Module):
    """Per-channel batch normalization over (batch, height, width).

    Training mode normalizes with batch statistics and updates the running
    mean/variance buffers; inference mode uses the buffers. Works on any
    channels-last tensor, so the projection head reuses it for (n, d).
    """

    def __init__(self, channels: int, *, dtype=np.float32, eps: float = BN_EPS,
                 momentum: float = BN_MOMENTUM):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = E.ones_param((channels,), dtype)
        self.beta = E.zeros_param((channels,), dtype)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.data.shape[-1] != self.channels:
            raise ConfigError(
                f"batch norm over {self.channels} channels got shape {x.data.shape}"
            )
        if training:
            if x.data.shape[0] < 2:
                raise ShapeError("batch norm in training mode needs a batch of at least 2")
            out, mu, var = E.batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean.data = m * self.running_mean.data + (1 - m) * mu
            self.running_var.data = m * self.running_var.data + (1 - m) * var
            return out
        inv = 1.0 / np.sqrt(self.running_var.data + self.eps)
        xhat = (x - self.running_mean.data) * inv
        return xhat * self.gamma + self.beta


class SeparableConvBlock(Module):
    """Depthwise separable conv -> BN -> ReLU."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, *, rng, dtype=np.float32):
        super().__init__()
        self.conv = DepthwiseSeparableConv(c_in, c_out, kernel, rng=rng, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return E.relu(self.bn(self.conv(x), training))


class PointwiseConvBlock(Module):
    """1x1 conv -> BN -> ReLU."""

    def __init__(self, c_in: int, c_out: int, *, rng, dtype=np.float32):
        super().__init__()
        self.conv = PointwiseConv(c_in, c_out, rng=rng, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return E.relu(self.bn(self.conv(x), training))


def hybrid_pool(x: Tensor) -> Tensor:
    """Average of 2x2 max pooling and spectral (low-pass) pooling."""
    return (E.max_pool2x2(x) + E.spectral_pool_half(x)) * 0.5


class AttentionGate(Module):
    """Additive attention on a skip connection, gated by the coarser level.

    alpha = sigmoid(psi(relu(theta(skip, stride 2) + phi(gate)))), upsampled
    back to skip resolution; output is skip * alpha. `alpha_override`
    substitutes a constant attention map (saturation test hook).
    """

    def __init__(self, skip_channels: int, gate_channels: int, *, rng, dtype=np.float32):
        super().__init__()
        inter = max(1, skip_channels // 2)
        self.theta = PointwiseConv(skip_channels, inter, rng=rng, dtype=dtype,
                                   bias=False, stride=2)
        self.phi = PointwiseConv(gate_channels, inter, rng=rng, dtype=dtype)
        self.psi = PointwiseConv(inter, 1, rng=rng, dtype=dtype)
        self.alpha_override: float | None = None

    def __call__(self, skip: Tensor, gate: Tensor, training: bool) -> Tensor:
        sn, sh, sw, _ = skip.data.shape
        gn, gh, gw, _ = gate.data.shape
        if sn != gn or sh != 2 * gh or sw != 2 * gw:
            raise ShapeError(
                f"attention gate needs skip at 2x gate resolution, got {skip.data.shape} "
                f"vs {gate.data.shape}"
            )
        if self.alpha_override is not None:
            return skip * float(self.alpha_override)
        a = E.relu(self.theta(skip) + self.phi(gate))
        alpha = E.upsample_nearest2(E.sigmoid(self.psi(a)))
        return skip * alpha


class InceptionBlock(Module):
    """Four parallel branches (1x1, 3x3, 5x5, pool+1x1) concatenated.

    Each branch emits out_channels/4 and is BN+ReLU terminated.
    """

    def __init__(self, c_in: int, c_out: int, *, rng, dtype=np.float32):
        super().__init__()
        if c_out % 4 != 0:
            raise ConfigError(f"inception output channels must divide by 4, got {c_out}")
        b = c_out // 4
        self.c_in, self.c_out = c_in, c_out
        self.branch1 = PointwiseConvBlock(c_in, b, rng=rng, dtype=dtype)
        self.branch3 = SeparableConvBlock(c_in, b, 3, rng=rng, dtype=dtype)
        self.branch5 = SeparableConvBlock(c_in, b, 5, rng=rng, dtype=dtype)
        self.branch_pool = PointwiseConvBlock(c_in, b, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return E.concat(
            [
                self.branch1(x, training),
                self.branch3(x, training),
                self.branch5(x, training),
                self.branch_pool(E.max_pool3x3_same(x), training),
            ],
            axis=-1,
        )


def residual_miniskip(block_in: Tensor, block_out: Tensor,
                      projection: PointwiseConv | None = None) -> Tensor:
    """block_out + project(block_in); identity projection when channels match."""
    if block_in.data.shape[1:3] != block_out.data.shape[1:3]:
        raise ShapeError(
            f"mini-skip spatial mismatch: {block_in.data.shape} vs {block_out.data.shape}"
        )
    if projection is None:
        if block_in.data.shape[3] != block_out.data.shape[3]:
            raise ConfigError(
                "mini-skip with differing channel counts needs a 1x1 projection"
            )
        return block_out + block_in
    return block_out + projection(block_in)
