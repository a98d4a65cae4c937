"""Adversarial training loop: alternate one discriminator update and one
generator update per step, Adam for both, with the weighted composite
generator objective.

Batches are sampled statelessly per (seed, step), so an interrupted run
resumed from a checkpoint replays the exact uninterrupted trajectory.
Desk-scale defaults replace the paper-scale ones; everything is exposed
on TrainConfig.
"""

import csv
import glob
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import load_index, read_pair
from .errors import ContractError, FormatError, TrainingAbort
from .losses import (
    FocalConfig,
    LossWeights,
    adversarial_loss_G,
    discriminator_loss,
    focal_loss,
    generator_objective,
    lovasz_softmax_loss,
    soft_jaccard_loss,
)
from .metrics import evaluate_pair
from .model import DiscriminatorConfig, DiscriminatorModel, GeneratorConfig, GeneratorModel
from .serialize import read_ctns, write_ctns
from .tensor import Tensor, no_grad

LOSS_MODES = ("focal", "focal_jaccard", "focal_lovasz", "focal_lovasz_adv")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.97  # per epoch (one pass over the train split)
    loss_mode: str = "focal_lovasz_adv"
    weights: LossWeights = field(default_factory=LossWeights)
    focal_gamma: float = 2.0
    eval_interval: int = 200
    eval_limit: int = 32
    checkpoint_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch size must be >= 1, got {self.batch_size}")
        if self.loss_mode not in LOSS_MODES:
            raise ContractError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}"
            )

    @property
    def adversarial(self):
        return self.loss_mode == "focal_lovasz_adv"


@dataclass
class StepReport:
    step: int
    lr: float
    d_loss: float
    g_total: float
    focal: float
    iou_term: float
    adversarial: float
    grad_norm_g: float
    grad_norm_d: float


# ---- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params):
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_update(params, grads, state, lr):
    """One bias-corrected Adam step over aligned params/grads lists."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}"
            )
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _save_adam(path, state, names):
    os.makedirs(path, exist_ok=True)
    for name, m, v in zip(names, state.m, state.v):
        write_ctns(os.path.join(path, f"{name}.m.ctns"), m)
        write_ctns(os.path.join(path, f"{name}.v.ctns"), v)
    with open(os.path.join(path, "state.json"), "w") as f:
        json.dump({"t": state.t, "beta1": state.beta1, "beta2": state.beta2,
                   "eps": state.eps}, f)


def _load_adam(path, names, params):
    with open(os.path.join(path, "state.json")) as f:
        meta = json.load(f)
    state = AdamState(m=[], v=[], **meta)
    for name, p in zip(names, params):
        m = read_ctns(os.path.join(path, f"{name}.m.ctns"), dtype=p.data.dtype).data
        v = read_ctns(os.path.join(path, f"{name}.v.ctns"), dtype=p.data.dtype).data
        if m.shape != p.data.shape:
            raise FormatError(f"optimizer moment {name!r} has shape {m.shape}, "
                              f"parameter has {p.data.shape}")
        state.m.append(m.copy())
        state.v.append(v.copy())
    return state


# ---- one training step ------------------------------------------------------


def _one_hot(y, n, dtype):
    eye = np.eye(n, dtype=dtype)
    return eye[y]


def _zero_grads(params):
    for p in params:
        p.grad = None


def _grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def _iou_term(probs, mask, cfg):
    if cfg.loss_mode == "focal":
        return None
    if cfg.loss_mode == "focal_jaccard":
        return soft_jaccard_loss(probs, mask)
    return lovasz_softmax_loss(probs, mask)


def train_step(batch, G, D, cfg, step, opt_g, opt_d, lr):
    """One critic update followed by one generator update on `batch`.

    The discriminator sees (image, one-hot truth) as real and (image,
    generator probabilities) as fake; gradients accumulate per sample so
    only one tape lives at a time.
    """
    if not batch:
        raise ContractError("train_step requires a nonempty batch")
    n = G.config.num_classes
    dt = G.config.np_dtype
    scale = 1.0 / len(batch)
    fcfg = FocalConfig(gamma=cfg.focal_gamma)

    d_loss_val = 0.0
    if cfg.adversarial:
        _zero_grads(D.parameters())
        for pair in batch:
            x = Tensor(pair.image.data.astype(dt))
            with no_grad():
                fake = G(x)
            real = D(x, _one_hot(pair.mask, n, dt), training=True)
            fakel = D(x, Tensor(fake.data), training=True)
            d_loss = discriminator_loss(real, fakel) * scale
            if not np.isfinite(d_loss.data).all():
                raise TrainingAbort(f"non-finite discriminator loss at step {step}")
            d_loss.backward()
            d_loss_val += float(d_loss.data)
        gn_d = _grad_norm(D.parameters())
        adam_update(D.parameters(), [p.grad for p in D.parameters()], opt_d, lr)
    else:
        gn_d = 0.0

    g_params = G.parameters()
    _zero_grads(g_params)
    g_total = focal_val = iou_val = adv_val = 0.0
    for pair in batch:
        x = Tensor(pair.image.data.astype(dt))
        probs = G(x)
        focal = focal_loss(probs, pair.mask, fcfg)
        iou = _iou_term(probs, pair.mask, cfg)
        adv = None
        if cfg.adversarial:
            adv = adversarial_loss_G(D(x, probs, training=False))
        loss = generator_objective(
            focal,
            iou if iou is not None else Tensor(np.zeros((), dtype=dt)),
            adv,
            g_params,
            cfg.weights,
        ) * scale
        try:
            loss.backward()
        except FloatingPointError as e:
            raise TrainingAbort(f"non-finite generator gradient at step {step}") from e
        g_total += float(loss.data)
        focal_val += float(focal.data) * scale
        iou_val += float(iou.data) * scale if iou is not None else 0.0
        adv_val += float(adv.data) * scale if adv is not None else 0.0
    gn_g = _grad_norm(g_params)
    if not np.isfinite(gn_g):
        raise TrainingAbort(f"non-finite generator gradient at step {step}")
    adam_update(g_params, [p.grad for p in g_params], opt_g, lr)

    return StepReport(
        step=step, lr=lr, d_loss=d_loss_val, g_total=g_total, focal=focal_val,
        iou_term=iou_val, adversarial=adv_val, grad_norm_g=gn_g, grad_norm_d=gn_d,
    )


# ---- evaluation -------------------------------------------------------------


def predict_mask(G, image):
    """Hard label map from generator probabilities."""
    with no_grad():
        probs = G(Tensor(image.data.astype(G.config.np_dtype)))
    return np.argmax(probs.data, axis=2).astype(np.uint8)


def evaluate_split(G, pairs, limit=None):
    """Mean MetricsReport fields over (up to limit) pairs, as a dict."""
    if limit:
        pairs = pairs[:limit]
    if not pairs:
        raise ContractError("evaluation split is empty")
    rows = [evaluate_pair(predict_mask(G, p.image), p.mask).as_dict() for p in pairs]
    out = {}
    for key in rows[0]:
        if key == "hausdorff_empty_mask":
            out[key] = any(r[key] for r in rows)
        else:
            out[key] = float(np.mean([r[key] for r in rows]))
    return out


# ---- experiment driver ------------------------------------------------------


def _code_hash():
    """Content hash of this package's sources, for the run manifest."""
    root = os.path.dirname(__file__)
    h = hashlib.sha256()
    for path in sorted(glob.glob(os.path.join(root, "*.py"))):
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()[:16]


def load_split_pairs(data_dir, dtype=np.float32):
    """All patch pairs keyed by split, images narrowed to `dtype` in memory."""
    index = load_index(data_dir)
    pairs = {}
    for split, ids in index["splits"].items():
        loaded = []
        for i in ids:
            pair = read_pair(data_dir, i)
            pair.image = Tensor(pair.image.data.astype(dtype))
            loaded.append(pair)
        pairs[split] = loaded
    return index, pairs


def _batch_ids(cfg, train_ids, step):
    rng = np.random.default_rng([cfg.seed, 4721, int(step)])
    return rng.choice(len(train_ids), size=cfg.batch_size, replace=True)


def _checkpoint(out_dir, step, G, D, opt_g, opt_d):
    path = os.path.join(out_dir, "checkpoints", f"{step:06d}")
    G.save(os.path.join(path, "generator"))
    _save_adam(os.path.join(path, "opt_g"), opt_g, [n for n, _ in G.named_tensors()])
    if D is not None:
        D.save(os.path.join(path, "discriminator"))
        _save_adam(os.path.join(path, "opt_d"), opt_d, [n for n, _ in D.named_tensors()])
    with open(os.path.join(path, "step.json"), "w") as f:
        json.dump({"step": step}, f)
    return path


def latest_checkpoint(out_dir):
    pattern = os.path.join(out_dir, "checkpoints", "[0-9]" * 6)
    found = sorted(glob.glob(pattern))
    return found[-1] if found else None


CURVE_FIELDS = [
    "step", "lr", "d_loss", "g_total", "focal", "iou_term", "adversarial",
    "grad_norm_g", "grad_norm_d", "val_miou",
]


def run_experiment(gen_cfg, train_cfg, data_dir, out_dir, resume=False):
    """Train per config, log CSV curves, checkpoint, and write a manifest.

    Returns the final held-out metrics dict. With resume=True the run
    continues from the latest checkpoint under out_dir and, thanks to
    stateless per-step batch sampling, reproduces the uninterrupted
    trajectory.
    """
    os.makedirs(out_dir, exist_ok=True)
    index, pairs = load_split_pairs(data_dir, dtype=gen_cfg.np_dtype)
    train_pairs = pairs["train"]
    if not train_pairs:
        raise ContractError(f"dataset at {data_dir} has an empty train split")
    val_pairs = pairs["val"] or train_pairs

    G = GeneratorModel(gen_cfg, seed=train_cfg.seed)
    D = None
    if train_cfg.adversarial:
        D = DiscriminatorModel(
            DiscriminatorConfig(
                in_channels=gen_cfg.in_channels,
                num_classes=gen_cfg.num_classes,
                # match the generator width: a critic much wider than the
                # generator wins immediately and destabilizes the 0.01-weight
                # adversarial term instead of shaping mask coherence
                base_channels=gen_cfg.base_channels,
                dtype=gen_cfg.dtype,
            ),
            seed=train_cfg.seed + 1,
        )
    opt_g = init_adam(G.parameters())
    opt_d = init_adam(D.parameters()) if D is not None else None

    start_step = 0
    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is None:
            raise FormatError(f"resume requested but no checkpoint under {out_dir}")
        with open(os.path.join(ckpt, "step.json")) as f:
            start_step = json.load(f)["step"]
        G = GeneratorModel.load(os.path.join(ckpt, "generator"))
        opt_g = _load_adam(os.path.join(ckpt, "opt_g"),
                           [n for n, _ in G.named_tensors()], G.parameters())
        if D is not None:
            D = DiscriminatorModel.load(os.path.join(ckpt, "discriminator"))
            opt_d = _load_adam(os.path.join(ckpt, "opt_d"),
                               [n for n, _ in D.named_tensors()], D.parameters())

    manifest = {
        "status": "running",
        "generator_config": asdict(gen_cfg),
        "train_config": asdict(train_cfg),
        "data_dir": os.path.abspath(data_dir),
        "dataset_config": index["config"],
        "code_hash": _code_hash(),
        "start_step": start_step,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)

    curves_path = os.path.join(out_dir, "curves.csv")
    mode = "a" if resume and os.path.exists(curves_path) else "w"
    steps_per_epoch = max(1, len(train_pairs) // train_cfg.batch_size)
    try:
        with open(curves_path, mode, newline="") as cf:
            writer = csv.DictWriter(cf, fieldnames=CURVE_FIELDS)
            if mode == "w":
                writer.writeheader()
            for step in range(start_step, train_cfg.steps):
                lr = train_cfg.lr * train_cfg.lr_decay ** (step // steps_per_epoch)
                ids = _batch_ids(train_cfg, train_pairs, step)
                batch = [train_pairs[i] for i in ids]
                report = train_step(batch, G, D, train_cfg, step, opt_g, opt_d, lr)
                row = asdict(report)
                row["val_miou"] = ""
                if (step + 1) % train_cfg.eval_interval == 0 or step + 1 == train_cfg.steps:
                    val = evaluate_split(G, val_pairs, train_cfg.eval_limit)
                    row["val_miou"] = val["miou_percent"]
                writer.writerow(row)
                cf.flush()
                if (step + 1) % train_cfg.checkpoint_interval == 0:
                    _checkpoint(out_dir, step + 1, G, D, opt_g, opt_d)
    except TrainingAbort as e:
        manifest["status"] = "aborted"
        manifest["error"] = str(e)
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2)
        raise

    G.save(os.path.join(out_dir, "generator"))
    if D is not None:
        D.save(os.path.join(out_dir, "discriminator"))
    final = evaluate_split(G, pairs["test"] or val_pairs, train_cfg.eval_limit)
    manifest["status"] = "done"
    manifest["final_metrics"] = final
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    with open(os.path.join(out_dir, "final_metrics.json"), "w") as f:
        json.dump(final, f, indent=2)
    return final
