"""Procedural synthetic cloud scenes.

Multi-octave value noise (uniform lattice values, smoothstep-interpolated)
is thresholded into the cloud mask. Image bands combine a terrain
texture, a band-correlated cloud layer, and bright snow-like confounder
blobs that are deliberately NOT labeled as cloud, so the snow/cloud
ambiguity the real problem suffers from exists in synthetic data too.
Everything is deterministic per (config seed, patch seed).
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, FormatError
from .serialize import read_ctns, read_pgm, write_ctns, write_pgm
from .tensor import Tensor

SUPPORTED_BANDS = (1, 3, 4, 11)


@dataclass
class SceneConfig:
    size: int = 64
    bands: int = 4
    octaves: int = 4
    threshold: float = 0.5
    confounder_density: float = 2.0  # expected blobs per patch
    ambiguous_bands: bool = False  # per-scene channel roles (see generate_scene)
    seed: int = 0

    def __post_init__(self):
        if self.bands not in SUPPORTED_BANDS:
            raise ContractError(f"bands must be one of {SUPPORTED_BANDS}, got {self.bands}")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError(f"threshold must lie in (0,1), got {self.threshold}")
        if self.ambiguous_bands and self.bands < 3:
            raise ContractError("ambiguous_bands needs at least 3 bands")


@dataclass
class PatchPair:
    image: Tensor  # H x W x C in [0,1]
    mask: np.ndarray  # H x W uint8 in {0,1}
    confounder: np.ndarray = None  # H x W bool; set by the generator, not serialized


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(rng, size, base_res=4, octaves=4, persistence=0.5):
    """Multi-octave value-noise field in roughly [0,1], mean near 0.5."""
    field = np.zeros((size, size))
    amp, total, res = 1.0, 0.0, base_res
    for _ in range(octaves):
        res = min(res, size)
        lattice = rng.uniform(0.0, 1.0, size=(res + 1, res + 1))
        pos = np.linspace(0.0, res, size, endpoint=False)
        j0 = pos.astype(int)
        t = _smoothstep(pos - j0)
        j1 = np.minimum(j0 + 1, res)
        rows = (
            lattice[j0][:, j0] * np.outer(1 - t, 1 - t)
            + lattice[j0][:, j1] * np.outer(1 - t, t)
            + lattice[j1][:, j0] * np.outer(t, 1 - t)
            + lattice[j1][:, j1] * np.outer(t, t)
        )
        field += amp * rows
        total += amp
        amp *= persistence
        res *= 2
    return field / total


# cloud brightness per band family; the last band of C>=4 plays the role of
# a SWIR-like channel where snow is dark but cloud stays bright
_SNOW_BRIGHT = 0.95
_SNOW_DARK = 0.15


def _band_mixes(bands):
    """Fixed (bands x 4) nonnegative mixing matrix for the terrain latents."""
    rng = np.random.default_rng(20240601)  # constant: part of the format
    m = rng.uniform(0.2, 1.0, size=(bands, 4))
    return m / m.sum(axis=1, keepdims=True)


def generate_scene(cfg, seed):
    """One synthetic patch pair, fully deterministic per (cfg.seed, seed).

    With ambiguous_bands the channel roles rotate per scene: clouds go
    dark in one randomly chosen absorption band, and the confounders —
    now cloud-shaped, not disks — go dark in a different one. The only
    way to tell the two apart is to identify which band is the cloud
    absorption band from its global haze cue (flattened, lifted
    terrain), which requires scene-level cross-channel context rather
    than any local rule.
    """
    rng = np.random.default_rng([cfg.seed, int(seed)])
    size, bands = cfg.size, cfg.bands

    cloud_field = value_noise(rng, size, base_res=4, octaves=cfg.octaves)
    mask = (cloud_field > cfg.threshold).astype(np.uint8)
    # soft opacity inside the mask, so cloud edges look like thin cloud
    alpha = np.clip((cloud_field - cfg.threshold) / max(1.0 - cfg.threshold, 1e-6), 0.0, 1.0)
    alpha = alpha ** 0.5

    latents = np.stack(
        [value_noise(rng, size, base_res=8, octaves=3) for _ in range(4)], axis=-1
    )
    mixes = _band_mixes(bands)
    terrain = latents @ mixes.T * 0.55  # keep ground darker than cloud

    cloud_tone = rng.uniform(0.85, 0.98, size=bands)

    if cfg.ambiguous_bands:
        cloud_dark, snow_dark = (int(b) for b in rng.permutation(bands)[:2])
        cloud_tone[cloud_dark] = rng.uniform(0.1, 0.2)
        # global haze cue marking the cloud absorption band; kept subtle so
        # a local patch statistic cannot identify the band reliably
        terrain[..., cloud_dark] = 0.625 * terrain[..., cloud_dark] + 0.22

    image = terrain * (1.0 - alpha[..., None]) + cloud_tone * alpha[..., None]

    confounder = np.zeros((size, size), dtype=bool)
    if cfg.ambiguous_bands:
        # cloud-shaped false clouds, bright everywhere except their own
        # absorption band; never added to the mask
        snow_field = value_noise(rng, size, base_res=4, octaves=cfg.octaves)
        s_alpha = np.clip(
            (snow_field - cfg.threshold) / max(1.0 - cfg.threshold, 1e-6), 0.0, 1.0
        ) ** 0.5
        s_alpha = s_alpha * (1.0 - alpha)  # real cloud occludes the confounder
        confounder = s_alpha > 0.0
        snow_tone = rng.uniform(_SNOW_BRIGHT, 0.99, size=bands)
        snow_tone[snow_dark] = _SNOW_DARK
        image = image * (1.0 - s_alpha[..., None]) + snow_tone * s_alpha[..., None]
    else:
        # snow-like confounders: bright disks, dark in the SWIR-like band
        n_blobs = rng.poisson(cfg.confounder_density)
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(n_blobs):
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(2.0, size / 8.0)
            blob = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
            confounder |= blob
            inten = rng.uniform(_SNOW_BRIGHT, 0.99)
            for b in range(bands):
                dark = bands >= 4 and b == bands - 1
                image[..., b][blob] = _SNOW_DARK if dark else inten

    image += rng.normal(0.0, 0.01, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return PatchPair(image=Tensor(image), mask=mask, confounder=confounder)


# ---- patch-pair file I/O ----------------------------------------------------


def write_pair(directory, index, pair):
    stem = os.path.join(directory, f"{index:05d}")
    write_ctns(stem + ".ctns", pair.image)
    write_pgm(stem + ".pgm", pair.mask * 255)
    return stem


def read_pair(directory, index):
    stem = os.path.join(directory, f"{index:05d}")
    image = read_ctns(stem + ".ctns")
    raw = read_pgm(stem + ".pgm")
    bad = set(np.unique(raw)) - {0, 255}
    if bad:
        raise FormatError(f"{stem}.pgm: mask holds non-binary levels {sorted(bad)}")
    return PatchPair(image=image, mask=(raw == 255).astype(np.uint8))


def split_of(seed, index):
    """Deterministic train/val/test membership for (dataset seed, index)."""
    u = np.random.default_rng([seed, 7791, int(index)]).uniform()
    if u < 0.8:
        return "train"
    return "val" if u < 0.9 else "test"


def generate_dataset(cfg, count, out_dir):
    """Write `count` patch pairs plus index.json (splits + config echo)."""
    os.makedirs(out_dir, exist_ok=True)
    splits = {"train": [], "val": [], "test": []}
    for i in range(count):
        write_pair(out_dir, i, generate_scene(cfg, i))
        splits[split_of(cfg.seed, i)].append(i)
    index = {"config": asdict(cfg), "count": count, "splits": splits}
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, indent=2)
    return index


def load_index(data_dir):
    path = os.path.join(data_dir, "index.json")
    if not os.path.exists(path):
        raise FormatError(f"no dataset index at {path}")
    with open(path) as f:
        index = json.load(f)
    return index
