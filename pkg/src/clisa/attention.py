"""Attention modules used on the skip connections.

DOSA runs two orthogonal gating branches (channel-only and spatial-only)
in parallel and adds their gated value maps back onto the input. HC2A
re-weights the channels of a skip feature map using channel descriptors
extracted (via LFAM dilated-conv pyramids) from both the skip itself and
the deeper, lower-resolution decoder feature. A plain multihead
self-attention block over flattened pixels is kept as the comparison
baseline for the Lipschitz and robustness experiments.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .layers import Conv2dParams, conv2d, global_pool, init_conv
from .tensor import (
    Tensor,
    _as_tensor,
    concat,
    gelu,
    matmul,
    reshape,
    sigmoid,
    softmax,
    transpose,
)


# ---- parameter containers ---------------------------------------------------


@dataclass
class DosaParams:
    """Kernels for both DOSA branches; key convs collapse one direction."""

    query_ch: Conv2dParams  # c -> c
    key_ch: Conv2dParams  # c -> 1   (collapses channels)
    value_ch: Conv2dParams  # c -> c
    query_sp: Conv2dParams  # c -> c
    key_sp: Conv2dParams  # c -> c   (collapsed spatially by global pool)
    value_sp: Conv2dParams  # c -> c

    def named_tensors(self, prefix):
        for name in ("query_ch", "key_ch", "value_ch", "query_sp", "key_sp", "value_sp"):
            yield from getattr(self, name).named_tensors(f"{prefix}.{name}")


@dataclass
class LfamParams:
    """Dilated 3x3 pyramid (rates 3, 5, 7) fused to the attention width."""

    dil3: Conv2dParams
    dil5: Conv2dParams
    dil7: Conv2dParams
    fuse: Conv2dParams

    def named_tensors(self, prefix):
        for name in ("dil3", "dil5", "dil7", "fuse"):
            yield from getattr(self, name).named_tensors(f"{prefix}.{name}")


@dataclass
class Hc2aParams:
    value: Conv2dParams  # C -> C on the skip stream
    lfam_skip: LfamParams  # C -> C descriptor
    lfam_deep: LfamParams  # 2C -> C descriptor

    def named_tensors(self, prefix):
        yield from self.value.named_tensors(f"{prefix}.value")
        yield from self.lfam_skip.named_tensors(f"{prefix}.lfam_skip")
        yield from self.lfam_deep.named_tensors(f"{prefix}.lfam_deep")


@dataclass
class MstParams:
    """Dense multihead self-attention over flattened pixels."""

    wq: Tensor  # C x C
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def named_tensors(self, prefix):
        for name in ("wq", "wk", "wv", "wo"):
            yield f"{prefix}.{name}", getattr(self, name)


def init_dosa(rng, c, dtype=np.float64):
    # value branches start at zero so the module begins as the identity
    # (both gated residual terms vanish) and learns its refinement from
    # there, instead of injecting half-magnitude noise into every skip
    return DosaParams(
        query_ch=init_conv(rng, 3, c, c, dtype=dtype),
        key_ch=init_conv(rng, 3, c, 1, dtype=dtype),
        value_ch=init_conv(rng, 3, c, c, dtype=dtype, gain=0.0),
        query_sp=init_conv(rng, 3, c, c, dtype=dtype),
        key_sp=init_conv(rng, 3, c, c, dtype=dtype),
        value_sp=init_conv(rng, 3, c, c, dtype=dtype, gain=0.0),
    )


def init_lfam(rng, cin, cout, dtype=np.float64):
    return LfamParams(
        dil3=init_conv(rng, 3, cin, cout, dilation=3, dtype=dtype),
        dil5=init_conv(rng, 3, cin, cout, dilation=5, dtype=dtype),
        dil7=init_conv(rng, 3, cin, cout, dilation=7, dtype=dtype),
        fuse=init_conv(rng, 3, 3 * cout, cout, dtype=dtype),
    )


def init_hc2a(rng, c, dtype=np.float64):
    return Hc2aParams(
        value=init_conv(rng, 3, c, c, dtype=dtype),
        lfam_skip=init_lfam(rng, c, c, dtype=dtype),
        lfam_deep=init_lfam(rng, 2 * c, c, dtype=dtype),
    )


def init_mst(rng, c, heads=4, dtype=np.float64):
    if c % heads:
        raise DimensionError(f"{heads} heads do not divide {c} channels")
    std = 1.0 / np.sqrt(c)

    def mat():
        return Tensor(rng.normal(0.0, std, size=(c, c)).astype(dtype), requires_grad=True)

    return MstParams(wq=mat(), wk=mat(), wv=mat(), wo=mat(), heads=heads)


# ---- DOSA -------------------------------------------------------------------


def dosa_channel_attention(x, p):
    """Per-channel gates in (0,1), shape 1 x 1 x c.

    The key conv collapses to one channel; its softmax runs over the HW
    positions; the (c x HW) query then contracts it to one score per
    channel.
    """
    x = _as_tensor(x)
    h, w, c = x.shape
    q = reshape(conv2d(x, p.query_ch), (h * w, c))
    k = softmax(reshape(conv2d(x, p.key_ch), (h * w, 1)), axis=0)
    scores = matmul(transpose(q), k)  # c x 1
    return reshape(sigmoid(scores), (1, 1, c))


def dosa_spatial_attention(x, p):
    """Per-pixel gates in (0,1), shape H x W x 1.

    The key conv is pooled globally to a 1 x c descriptor whose softmax
    runs over channels; contracting with the query gives one score per
    pixel.
    """
    x = _as_tensor(x)
    h, w, c = x.shape
    k = softmax(reshape(global_pool(conv2d(x, p.key_sp)), (1, c)), axis=1)
    q = reshape(conv2d(x, p.query_sp), (h * w, c))
    scores = matmul(k, transpose(q))  # 1 x HW
    return reshape(sigmoid(scores), (h, w, 1))


def dosa_forward(x, p):
    """Residual dual-branch gating: x + A_ch * (Wv_C x) + A_sp * (Wv_S x)."""
    x = _as_tensor(x)
    a_ch = dosa_channel_attention(x, p)
    a_sp = dosa_spatial_attention(x, p)
    return x + a_ch * conv2d(x, p.value_ch) + a_sp * conv2d(x, p.value_sp)


# ---- LFAM / HC2A ------------------------------------------------------------


def lfam_forward(x, p):
    """Dilated pyramid -> GeLU -> concat -> fuse -> global pool, 1 x C."""
    x = _as_tensor(x)
    branches = [gelu(conv2d(x, conv)) for conv in (p.dil3, p.dil5, p.dil7)]
    fused = conv2d(concat(branches, axis=2), p.fuse)
    c = fused.shape[2]
    return reshape(global_pool(fused), (1, c))


def hc2a_forward(z, y_prev, p):
    """Cross-channel re-weighting of the skip stream by the deeper stream.

    z is H x W x C, y_prev must be exactly H/2 x W/2 x 2C. The C x C
    score matrix between the two LFAM descriptors is softmaxed row-wise
    and applied to the value map; the output is squashed to (0,1).
    """
    z = _as_tensor(z)
    y_prev = _as_tensor(y_prev)
    h, w, c = z.shape
    expected = (h // 2, w // 2, 2 * c)
    if h % 2 or w % 2 or y_prev.shape != expected:
        raise DimensionError(
            f"hc2a expects deeper map of shape {expected} for skip {z.shape}, got {y_prev.shape}"
        )
    q = lfam_forward(z, p.lfam_skip)  # 1 x C
    k = lfam_forward(y_prev, p.lfam_deep)  # 1 x C
    scores = softmax(matmul(transpose(q), k), axis=1)  # C x C, row-wise softmax
    v = reshape(conv2d(z, p.value), (h * w, c))
    return sigmoid(reshape(matmul(v, scores), (h, w, c)))


# ---- MST baseline -----------------------------------------------------------


def mst_attention_forward(x, p):
    """Canonical scaled dot-product multihead self-attention + residual."""
    x = _as_tensor(x)
    h, w, c = x.shape
    if c != p.wq.shape[0]:
        raise DimensionError(f"input channels {c} do not match weights {p.wq.shape}")
    tokens = reshape(x, (h * w, c))
    q = matmul(tokens, p.wq)
    k = matmul(tokens, p.wk)
    v = matmul(tokens, p.wv)
    dh = c // p.heads
    scale = 1.0 / np.sqrt(dh)
    heads = []
    for i in range(p.heads):
        sl = (slice(None), slice(i * dh, (i + 1) * dh))
        scores = softmax(matmul(q[sl], transpose(k[sl])) * scale, axis=1)
        heads.append(matmul(scores, v[sl]))
    out = matmul(concat(heads, axis=1), p.wo)
    return x + reshape(out, (h, w, c))
