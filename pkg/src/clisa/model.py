"""Generator and discriminator models.

The generator is a U-Net-shaped encoder/decoder built from residual
blocks with stride-2 conv downsampling and bilinear+conv upsampling.
Skip connections are refined by DOSA and then HC2A, fed hierarchically
from the deeper levels; ablation flags swap the skip refinement for
identity, DOSA alone, or the MST baseline. The discriminator is a
PatchGAN-style conditional critic emitting a grid of patch logits.

Models serialize to a directory: a JSON manifest (kind + config +
tensor name list) next to one CTNS file per tensor.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .attention import (
    DosaParams,
    Hc2aParams,
    MstParams,
    dosa_forward,
    hc2a_forward,
    init_dosa,
    init_hc2a,
    init_mst,
    mst_attention_forward,
)
from .errors import DimensionError, FormatError
from .layers import (
    Conv2dParams,
    batch_norm,
    conv2d,
    downsample,
    init_batch_norm,
    init_conv,
    init_residual_block,
    residual_block,
    upsample,
)
from .serialize import read_ctns, write_ctns
from .tensor import Tensor, _as_tensor, concat, leaky_relu, softmax

ATTENTION_MODES = ("none", "dosa", "dosa_hc2a", "mst")
_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class GeneratorConfig:
    in_channels: int = 4
    num_classes: int = 2
    base_channels: int = 16
    depth: int = 4
    attention: str = "dosa_hc2a"
    mst_heads: int = 4
    dtype: str = "f64"

    def __post_init__(self):
        if self.num_classes < 2:
            raise DimensionError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.attention not in ATTENTION_MODES:
            raise DimensionError(
                f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}"
            )
        if self.dtype not in _DTYPES:
            raise DimensionError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class DiscriminatorConfig:
    in_channels: int = 4
    num_classes: int = 2
    base_channels: int = 32
    dtype: str = "f64"

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


class GeneratorModel:
    """CLiSA generator: parameters plus the (static) layer graph."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        cfg = config
        ch = [cfg.base_channels * (1 << l) for l in range(cfg.depth + 1)]
        self.stem = init_conv(rng, 3, cfg.in_channels, ch[0], dtype=dt)
        self.enc_blocks = [init_residual_block(rng, ch[l], dtype=dt) for l in range(cfg.depth)]
        self.downs = [init_conv(rng, 3, ch[l], ch[l + 1], dtype=dt) for l in range(cfg.depth)]
        self.bottleneck = init_residual_block(rng, ch[cfg.depth], dtype=dt)
        self.dosa = []
        self.hc2a = []
        self.mst = []
        for l in range(cfg.depth):
            if cfg.attention in ("dosa", "dosa_hc2a"):
                self.dosa.append(init_dosa(rng, ch[l], dtype=dt))
            if cfg.attention == "dosa_hc2a":
                self.hc2a.append(init_hc2a(rng, ch[l], dtype=dt))
            if cfg.attention == "mst":
                self.mst.append(init_mst(rng, ch[l], heads=cfg.mst_heads, dtype=dt))
        self.ups = [init_conv(rng, 3, ch[l + 1], ch[l], dtype=dt) for l in range(cfg.depth)]
        self.dec_reduce = [init_conv(rng, 3, 2 * ch[l], ch[l], dtype=dt) for l in range(cfg.depth)]
        self.dec_blocks = [init_residual_block(rng, ch[l], dtype=dt) for l in range(cfg.depth)]
        self.head = init_conv(rng, 1, ch[0], cfg.num_classes, dtype=dt)

    # -- parameters -----------------------------------------------------------

    def named_tensors(self):
        yield from self.stem.named_tensors("stem")
        for l in range(self.config.depth):
            yield from self.enc_blocks[l].named_tensors(f"enc{l}")
            yield from self.downs[l].named_tensors(f"down{l}")
        yield from self.bottleneck.named_tensors("bottleneck")
        for l, p in enumerate(self.dosa):
            yield from p.named_tensors(f"dosa{l}")
        for l, p in enumerate(self.hc2a):
            yield from p.named_tensors(f"hc2a{l}")
        for l, p in enumerate(self.mst):
            yield from p.named_tensors(f"mst{l}")
        for l in range(self.config.depth):
            yield from self.ups[l].named_tensors(f"up{l}")
            yield from self.dec_reduce[l].named_tensors(f"reduce{l}")
            yield from self.dec_blocks[l].named_tensors(f"dec{l}")
        yield from self.head.named_tensors("head")

    def parameters(self):
        return [t for _, t in self.named_tensors()]

    def num_params(self):
        return sum(t.size for t in self.parameters())

    # -- forward --------------------------------------------------------------

    def refine_skips(self, skips, bottleneck_out):
        """Attention refinement of the skip maps, deepest level first."""
        mode = self.config.attention
        refined = [None] * self.config.depth
        y_prev = bottleneck_out
        for l in range(self.config.depth - 1, -1, -1):
            skip = skips[l]
            if mode == "none":
                y = skip
            elif mode == "mst":
                y = mst_attention_forward(skip, self.mst[l])
            elif mode == "dosa":
                y = dosa_forward(skip, self.dosa[l])
            else:
                z = dosa_forward(skip, self.dosa[l])
                y = hc2a_forward(z, y_prev, self.hc2a[l])
                y_prev = y
            refined[l] = y
        return refined

    def forward(self, x):
        """x[H,W,C] -> per-pixel class probabilities [H,W,n]."""
        x = _as_tensor(x)
        cfg = self.config
        h_in, w_in, c_in = x.shape
        if c_in != cfg.in_channels:
            raise DimensionError(
                f"generator expects {cfg.in_channels} input channels, got shape {x.shape}"
            )
        div = 1 << cfg.depth
        if h_in % div or w_in % div:
            raise DimensionError(
                f"patch side must be divisible by {div}, got {h_in}x{w_in}"
            )
        h = conv2d(x, self.stem)
        skips = []
        for l in range(cfg.depth):
            h = residual_block(h, self.enc_blocks[l])
            skips.append(h)
            h = downsample(h, self.downs[l])
        h = residual_block(h, self.bottleneck)
        refined = self.refine_skips(skips, h)
        for l in range(cfg.depth - 1, -1, -1):
            h = upsample(h, self.ups[l])
            h = concat([h, refined[l]], axis=2)
            h = conv2d(h, self.dec_reduce[l])
            h = residual_block(h, self.dec_blocks[l])
        logits = conv2d(h, self.head)
        return softmax(logits, axis=2)

    __call__ = forward

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        _save_model(path, "generator", asdict(self.config), self.named_tensors(), {})

    @classmethod
    def load(cls, path, dtype=None):
        config, tensors, _ = _load_model(path, "generator", dtype)
        model = cls(GeneratorConfig(**config))
        _assign(model, tensors)
        return model


class DiscriminatorModel:
    """PatchGAN-style conditional critic: 3 stride-2 convs to a logit grid."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        cin = config.in_channels + config.num_classes
        b = config.base_channels
        self.conv1 = init_conv(rng, 3, cin, b, dtype=dt)
        self.conv2 = init_conv(rng, 3, b, 2 * b, dtype=dt)
        self.bn2 = init_batch_norm(2 * b, dtype=dt)
        self.conv3 = init_conv(rng, 3, 2 * b, 4 * b, dtype=dt)
        self.bn3 = init_batch_norm(4 * b, dtype=dt)
        self.head = init_conv(rng, 3, 4 * b, 1, dtype=dt)

    def named_tensors(self):
        yield from self.conv1.named_tensors("conv1")
        yield from self.conv2.named_tensors("conv2")
        yield from self.bn2.named_tensors("bn2")
        yield from self.conv3.named_tensors("conv3")
        yield from self.bn3.named_tensors("bn3")
        yield from self.head.named_tensors("head")

    def named_buffers(self):
        yield "bn2.running_mean", self.bn2.running_mean
        yield "bn2.running_var", self.bn2.running_var
        yield "bn3.running_mean", self.bn3.running_mean
        yield "bn3.running_var", self.bn3.running_var

    def parameters(self):
        return [t for _, t in self.named_tensors()]

    def num_params(self):
        return sum(t.size for t in self.parameters())

    def forward(self, x, mask, training=False):
        """x[H,W,C] conditioned on mask[H,W,n] -> patch logit grid [h,w,1]."""
        x = _as_tensor(x)
        mask = _as_tensor(mask)
        if x.shape[:2] != mask.shape[:2]:
            raise DimensionError(
                f"image {x.shape} and mask {mask.shape} are not spatially aligned"
            )
        h = concat([x, mask], axis=2)
        h = leaky_relu(conv2d(h, self.conv1, stride=2), 0.2)
        h = leaky_relu(batch_norm(conv2d(h, self.conv2, stride=2), self.bn2, training), 0.2)
        h = leaky_relu(batch_norm(conv2d(h, self.conv3, stride=2), self.bn3, training), 0.2)
        return conv2d(h, self.head)

    __call__ = forward

    def save(self, path):
        buffers = dict(self.named_buffers())
        _save_model(path, "discriminator", asdict(self.config), self.named_tensors(), buffers)

    @classmethod
    def load(cls, path, dtype=None):
        config, tensors, buffers = _load_model(path, "discriminator", dtype)
        model = cls(DiscriminatorConfig(**config))
        _assign(model, tensors)
        model.bn2.running_mean = buffers["bn2.running_mean"]
        model.bn2.running_var = buffers["bn2.running_var"]
        model.bn3.running_mean = buffers["bn3.running_mean"]
        model.bn3.running_var = buffers["bn3.running_var"]
        return model


# ---- static parameter counting ----------------------------------------------


def expected_param_count(config):
    """Closed-form parameter count for a GeneratorConfig; guards wiring bugs."""

    def conv(k, cin, cout):
        return k * k * cin * cout + cout

    def res(c):
        return 2 * conv(3, c, c) + 4 * c  # two convs, two layer norms

    def dosa(c):
        return 4 * conv(3, c, c) + conv(3, c, 1) + conv(3, c, c)

    def lfam(cin, cout):
        return 3 * conv(3, cin, cout) + conv(3, 3 * cout, cout)

    def hc2a(c):
        return conv(3, c, c) + lfam(c, c) + lfam(2 * c, c)

    cfg = config
    ch = [cfg.base_channels * (1 << l) for l in range(cfg.depth + 1)]
    total = conv(3, cfg.in_channels, ch[0])
    for l in range(cfg.depth):
        total += res(ch[l]) + conv(3, ch[l], ch[l + 1])
    total += res(ch[cfg.depth])
    for l in range(cfg.depth):
        if cfg.attention in ("dosa", "dosa_hc2a"):
            total += dosa(ch[l])
        if cfg.attention == "dosa_hc2a":
            total += hc2a(ch[l])
        if cfg.attention == "mst":
            total += 4 * ch[l] * ch[l]
        total += conv(3, ch[l + 1], ch[l])
        total += conv(3, 2 * ch[l], ch[l])
        total += res(ch[l])
    total += conv(1, ch[0], cfg.num_classes)
    return total


# ---- persistence helpers ----------------------------------------------------


def _save_model(path, kind, config, named_tensors, buffers):
    os.makedirs(os.path.join(path, "tensors"), exist_ok=True)
    names = []
    for name, t in named_tensors:
        write_ctns(os.path.join(path, "tensors", f"{name}.ctns"), t)
        names.append(name)
    for name, arr in buffers.items():
        write_ctns(os.path.join(path, "tensors", f"{name}.ctns"), np.asarray(arr))
        names.append(name)
    manifest = {
        "kind": kind,
        "config": config,
        "tensors": sorted(n for n in names if n not in buffers),
        "buffers": sorted(buffers),
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def _load_model(path, kind, dtype):
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FormatError(f"no model manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("kind") != kind:
        raise FormatError(f"{path} holds a {manifest.get('kind')!r}, expected {kind!r}")
    config = manifest["config"]
    if dtype is not None:
        config = dict(config, dtype=dtype)
    np_dtype = _DTYPES[config["dtype"]]
    tensors = {}
    for name in manifest["tensors"]:
        fp = os.path.join(path, "tensors", f"{name}.ctns")
        if not os.path.exists(fp):
            raise FormatError(f"missing tensor file for {name!r} in {path}")
        try:
            tensors[name] = read_ctns(fp, dtype=np_dtype)
        except FormatError as e:
            raise FormatError(f"tensor {name!r}: {e}") from e
    buffers = {}
    for name in manifest.get("buffers", []):
        fp = os.path.join(path, "tensors", f"{name}.ctns")
        if not os.path.exists(fp):
            raise FormatError(f"missing buffer file for {name!r} in {path}")
        buffers[name] = read_ctns(fp, dtype=np.float64).data.copy()
    return config, tensors, buffers


def _assign(model, tensors):
    loaded = set()
    for name, t in model.named_tensors():
        if name not in tensors:
            raise FormatError(f"model directory lacks tensor {name!r}")
        src = tensors[name]
        if src.shape != t.shape:
            raise FormatError(
                f"tensor {name!r} has shape {src.shape}, model expects {t.shape}"
            )
        t.data = src.data.astype(t.data.dtype, copy=True)
        t.grad = None
        loaded.add(name)
    extra = set(tensors) - loaded
    if extra:
        raise FormatError(f"model directory holds unknown tensors: {sorted(extra)}")
