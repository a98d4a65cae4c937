"""Convolutional and normalization building blocks.

All spatial tensors are H x W x C row-major. conv2d is the one
heavyweight primitive here; it is implemented as a tap loop (one
tensordot per kernel offset) so both forward and backward reduce to a
handful of BLAS calls without scatter operations.
"""

from dataclasses import dataclass, field

import numpy as np

from . import flops
from .errors import DimensionError
from .tensor import (
    Tensor,
    _make,
    _as_tensor,
    concat,
    gelu,
    matmul,
    reshape,
    transpose,
)

_NORM_EPS = 1e-5


# ---- parameter containers ---------------------------------------------------


@dataclass
class Conv2dParams:
    """3x3 (or 1x1) same-padded convolution weights."""

    kernel: Tensor  # k x k x Cin x Cout
    bias: Tensor  # Cout
    dilation: int = 1

    def named_tensors(self, prefix):
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias


@dataclass
class LayerNormParams:
    gamma: Tensor  # 1 x 1 x C
    beta: Tensor  # 1 x 1 x C

    def named_tensors(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = 0.9

    def named_tensors(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class ResidualBlockParams:
    """Pre-norm residual block: LN -> conv -> GeLU -> LN -> conv, + skip."""

    norm1: LayerNormParams
    conv1: Conv2dParams
    norm2: LayerNormParams
    conv2: Conv2dParams

    def named_tensors(self, prefix):
        yield from self.norm1.named_tensors(f"{prefix}.norm1")
        yield from self.conv1.named_tensors(f"{prefix}.conv1")
        yield from self.norm2.named_tensors(f"{prefix}.norm2")
        yield from self.conv2.named_tensors(f"{prefix}.conv2")


# ---- initialization ---------------------------------------------------------


def init_conv(rng, k, cin, cout, dilation=1, dtype=np.float64, gain=1.0):
    """He-normal kernel initialization (fan-in) with zero bias."""
    std = gain * np.sqrt(2.0 / (k * k * cin))
    kernel = Tensor(rng.normal(0.0, std, size=(k, k, cin, cout)).astype(dtype),
                    requires_grad=True)
    bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return Conv2dParams(kernel=kernel, bias=bias, dilation=dilation)


def init_layer_norm(c, dtype=np.float64):
    return LayerNormParams(
        gamma=Tensor(np.ones((1, 1, c), dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros((1, 1, c), dtype=dtype), requires_grad=True),
    )


def init_batch_norm(c, dtype=np.float64):
    return BatchNormParams(
        gamma=Tensor(np.ones((1, 1, c), dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros((1, 1, c), dtype=dtype), requires_grad=True),
        running_mean=np.zeros(c, dtype=np.float64),
        running_var=np.ones(c, dtype=np.float64),
    )


def init_residual_block(rng, c, dtype=np.float64):
    return ResidualBlockParams(
        norm1=init_layer_norm(c, dtype),
        conv1=init_conv(rng, 3, c, c, dtype=dtype),
        norm2=init_layer_norm(c, dtype),
        conv2=init_conv(rng, 3, c, c, dtype=dtype),
    )


# ---- convolution primitive --------------------------------------------------


def conv2d_raw(x, kernel, bias=None, stride=1, dilation=1):
    """Same-padded cross-correlation of x[H,W,Cin] with kernel[k,k,Cin,Cout].

    stride 1 keeps H x W; stride 2 halves both (H, W must be even).
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects x[H,W,Cin] and kernel[k,k,Cin,Cout], got {x.shape} and {kernel.shape}"
        )
    k = kernel.shape[0]
    if kernel.shape[1] != k or k % 2 == 0:
        raise DimensionError(f"kernel must be odd and square, got {kernel.shape}")
    if x.shape[2] != kernel.shape[2]:
        raise DimensionError(
            f"channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    H, W, cin = x.shape
    cout = kernel.shape[3]
    if stride == 2 and (H % 2 or W % 2):
        raise DimensionError(f"stride-2 conv requires even spatial dims, got {x.shape}")
    if stride not in (1, 2):
        raise DimensionError(f"unsupported stride {stride}")
    p = dilation * (k // 2)
    ho, wo = H // stride, W // stride

    xd = x.data
    kd = kernel.data
    if p:
        xpad = np.zeros((H + 2 * p, W + 2 * p, cin), dtype=xd.dtype)
        xpad[p : p + H, p : p + W] = xd
    else:
        xpad = xd

    row_span = stride * (ho - 1) + 1
    col_span = stride * (wo - 1) + 1
    taps = [
        (
            slice(u * dilation, u * dilation + row_span, stride),
            slice(v * dilation, v * dilation + col_span, stride),
        )
        for u in range(k)
        for v in range(k)
    ]
    # im2col: one GEMM forward, two backward
    cols = np.empty((ho * wo, k * k * cin), dtype=xd.dtype)
    cols3 = cols.reshape(ho, wo, k * k * cin)
    for t, sl in enumerate(taps):
        cols3[:, :, t * cin : (t + 1) * cin] = xpad[sl]
    kflat = kd.reshape(k * k * cin, cout)
    out = cols @ kflat
    if bias is not None:
        out += bias.data
    out = out.reshape(ho, wo, cout)
    flops.count(2 * ho * wo * k * k * cin * cout + (ho * wo * cout if bias is not None else 0))

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(ho * wo, cout))
        dk = (cols.T @ g2).reshape(kd.shape)
        dcols3 = (g2 @ kflat.T).reshape(ho, wo, k * k * cin)
        dxpad = np.zeros_like(xpad)
        for t, sl in enumerate(taps):
            dxpad[sl] += dcols3[:, :, t * cin : (t + 1) * cin]
        dx = dxpad[p : p + H, p : p + W] if p else dxpad
        if bias is None:
            return dx, dk
        return dx, dk, g2.sum(axis=0)

    return _make(out, parents, bw)


def conv2d(x, params, stride=1):
    """Apply Conv2dParams (kernel, bias, dilation) to x."""
    return conv2d_raw(x, params.kernel, params.bias, stride=stride,
                      dilation=params.dilation)


# ---- pooling / resampling ---------------------------------------------------


def global_pool(x):
    """Per-channel spatial mean: H x W x C -> 1 x 1 x C."""
    x = _as_tensor(x)
    h, w, c = x.shape
    return reshape(x.mean(axis=0).mean(axis=0), (1, 1, c))


def _bilinear_matrix(n, dtype):
    """(2n, n) interpolation matrix for x2 upsampling, edge-clamped."""
    R = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        pos = (i + 0.5) / 2.0 - 0.5
        j0 = int(np.floor(pos))
        t = pos - j0
        j0c = min(max(j0, 0), n - 1)
        j1c = min(max(j0 + 1, 0), n - 1)
        R[i, j0c] += 1.0 - t
        R[i, j1c] += t
    return R


def bilinear_upsample2x(x):
    """Bilinear x2 resize of H x W x C (constant-preserving, differentiable)."""
    x = _as_tensor(x)
    h, w, c = x.shape
    Rh = Tensor(_bilinear_matrix(h, x.data.dtype))
    Rw = Tensor(_bilinear_matrix(w, x.data.dtype))
    y = matmul(Rh, reshape(x, (h, w * c)))  # 2h x (w c)
    y = reshape(y, (2 * h, w, c))
    y = transpose(y, (1, 0, 2))  # w x 2h x c
    y = matmul(Rw, reshape(y, (w, 2 * h * c)))
    y = reshape(y, (2 * w, 2 * h, c))
    return transpose(y, (1, 0, 2))


def downsample(x, params):
    """Stride-2 convolution; halves H and W."""
    return conv2d(x, params, stride=2)


def upsample(x, params):
    """Bilinear x2 resize followed by a 3x3 conv."""
    return conv2d(bilinear_upsample2x(x), params)


# ---- normalization ----------------------------------------------------------


def layer_norm(x, params):
    """Normalize over the whole feature map (mean 0, var 1), then affine."""
    x = _as_tensor(x)
    mu = x.mean()
    centered = x - mu
    var = (centered * centered).mean()
    inv = (var + _NORM_EPS) ** -0.5
    return centered * inv * params.gamma + params.beta


def batch_norm(x, params, training=True):
    """Per-channel normalization over spatial positions.

    Training mode uses the current feature statistics and updates the
    running buffers; eval mode uses the stored running statistics.
    """
    x = _as_tensor(x)
    if training:
        mu = x.mean(axis=0, keepdims=True).mean(axis=1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=0, keepdims=True).mean(axis=1, keepdims=True)
        if params.running_mean is not None:
            m = params.momentum
            params.running_mean = m * params.running_mean + (1 - m) * mu.data.reshape(-1)
            params.running_var = m * params.running_var + (1 - m) * var.data.reshape(-1)
        inv = (var + _NORM_EPS) ** -0.5
        return centered * inv * params.gamma + params.beta
    mu = Tensor(params.running_mean.reshape(1, 1, -1).astype(x.data.dtype))
    var = Tensor(params.running_var.reshape(1, 1, -1).astype(x.data.dtype))
    inv = (var + _NORM_EPS) ** -0.5
    return (x - mu) * inv * params.gamma + params.beta


# ---- residual block ---------------------------------------------------------


def residual_block(x, params):
    """Pre-norm residual block; requires Cin == Cout so the skip sum works."""
    x = _as_tensor(x)
    cin = x.shape[2]
    cout = params.conv2.kernel.shape[3]
    if cin != cout:
        raise DimensionError(
            f"residual block needs matching channels, input has {cin}, conv2 emits {cout}"
        )
    h = layer_norm(x, params.norm1)
    h = conv2d(h, params.conv1)
    h = gelu(h)
    h = layer_norm(h, params.norm2)
    h = conv2d(h, params.conv2)
    return x + h
