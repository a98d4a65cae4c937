"""Objective functions: focal, discrete Jaccard, Lovász-Softmax surrogate,
adversarial terms, and the weighted composite generator objective.

Probability inputs are Tensors so every loss is differentiable; label
masks are plain integer numpy arrays.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingAbort
from .tensor import Tensor, _as_tensor, clip, log, reshape, softplus

_PROB_FLOOR = 1e-7


@dataclass
class FocalConfig:
    gamma: float = 2.0
    class_weights: np.ndarray = None  # length n; None = uniform


@dataclass
class LossWeights:
    lambda_ce: float = 10.0
    lambda_iou: float = 0.8
    lambda_adv: float = 0.1
    lambda_l2: float = 0.01


def _check_labels(y, n):
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= n):
        raise ContractError(
            f"labels must lie in [0, {n}), got range [{y.min()}, {y.max()}]"
        )
    return y.astype(np.int64)


def focal_loss(yhat, y, cfg=None):
    """Mean over pixels of -w_y (1 - p_y)^gamma log(p_y).

    yhat: H x W x n probabilities (rows on the simplex); y: H x W labels.
    """
    cfg = cfg or FocalConfig()
    yhat = _as_tensor(yhat)
    n = yhat.shape[-1]
    y = _check_labels(y, n)
    flat = reshape(yhat, (-1, n))
    idx = (np.arange(y.size), y.reshape(-1))
    p = clip(flat[idx], _PROB_FLOOR, 1.0)
    w = np.ones(n) if cfg.class_weights is None else np.asarray(cfg.class_weights, dtype=float)
    w_y = Tensor(w[y.reshape(-1)].astype(yhat.data.dtype))
    one_minus = 1.0 - p
    return (w_y * one_minus ** cfg.gamma * -log(p)).mean()


def jaccard_loss_discrete(yhat_labels, y, c):
    """|mispredictions of class c| / |{y = c} union mispredictions|, in [0,1]."""
    yhat_labels = np.asarray(yhat_labels)
    y = np.asarray(y)
    mis = ((y == c) & (yhat_labels != c)) | ((y != c) & (yhat_labels == c))
    denom = ((y == c) | mis).sum()
    if denom == 0:
        return 0.0
    return mis.sum() / denom


def soft_jaccard_loss(yhat, y):
    """Differentiable soft-IoU loss, averaged over classes present in y.

    Per class c: 1 - sum(p_c on class pixels) / (sum(p_c) + |class| - same),
    the probabilistic relaxation of the discrete Jaccard index.
    """
    yhat = _as_tensor(yhat)
    n = yhat.shape[-1]
    y = _check_labels(y, n)
    flat = reshape(yhat, (-1, n))
    y_flat = y.reshape(-1)
    total = None
    count = 0
    for c in np.unique(y_flat):
        fg = (y_flat == c).astype(yhat.data.dtype)
        p_c = flat[:, int(c)]
        inter = (p_c * Tensor(fg)).sum()
        union = p_c.sum() + fg.sum() - inter
        loss_c = 1.0 - inter / union
        total = loss_c if total is None else total + loss_c
        count += 1
    if count == 0:
        return Tensor(np.zeros(()))
    return total / count


def _lovasz_grad(fg_sorted):
    """Jaccard-loss prefix differences for an error-sorted ground truth."""
    gts = fg_sorted.sum()
    inter = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jacc = 1.0 - inter / union
    g = jacc.copy()
    g[1:] = jacc[1:] - jacc[:-1]
    return g


def lovasz_softmax_loss(yhat, y, classes=None):
    """Lovász extension of the Jaccard loss, averaged over present classes.

    Per class: errors are (1 - p_c) on class pixels and p_c elsewhere,
    sorted descending (stable, so ties break by original index); the
    loss is the error vector dotted with the Jaccard prefix-difference
    weights of the sorted ground truth.
    """
    yhat = _as_tensor(yhat)
    n = yhat.shape[-1]
    y = _check_labels(y, n)
    flat = reshape(yhat, (-1, n))
    y_flat = y.reshape(-1)
    if classes is None:
        classes = np.unique(y_flat)
    total = None
    count = 0
    for c in classes:
        fg = (y_flat == c).astype(yhat.data.dtype)
        p_c = flat[:, int(c)]
        sign = Tensor(1.0 - 2.0 * fg)  # +1 off-class, -1 on-class
        m = Tensor(fg) + sign * p_c  # (1 - p) on class pixels, p elsewhere
        order = np.argsort(-m.data, kind="stable")
        g = Tensor(_lovasz_grad(fg[order]).astype(yhat.data.dtype))
        loss_c = (m[order] * g).sum()
        total = loss_c if total is None else total + loss_c
        count += 1
    if count == 0:
        return Tensor(np.zeros(()))
    return total / count


def adversarial_loss_G(d_logits_on_fake):
    """Mean over the patch grid of -log sigmoid(logit), stabilized."""
    return softplus(-_as_tensor(d_logits_on_fake)).mean()


def discriminator_loss(d_real_logits, d_fake_logits):
    """-E[log sigmoid(real)] - E[log(1 - sigmoid(fake))], stabilized."""
    return (
        softplus(-_as_tensor(d_real_logits)).mean()
        + softplus(_as_tensor(d_fake_logits)).mean()
    )


def l2_penalty(params):
    """Exact sum of squared parameter entries, on the tape."""
    total = None
    for p in params:
        term = (p * p).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.zeros(()))


def generator_objective(focal, lovasz, adversarial, params, weights=None):
    """Weighted composite generator loss.

    focal / lovasz / adversarial are scalar Tensors; params is the
    generator parameter list for the L2 term. Non-finite components
    abort training by name.
    """
    weights = weights or LossWeights()
    for name, comp in (("focal", focal), ("lovasz", lovasz), ("adversarial", adversarial)):
        if comp is not None and not np.isfinite(comp.data).all():
            raise TrainingAbort(f"non-finite {name} loss component")
    total = weights.lambda_ce * focal + weights.lambda_iou * lovasz
    if adversarial is not None and weights.lambda_adv:
        total = total + weights.lambda_adv * adversarial
    if weights.lambda_l2:
        total = total + weights.lambda_l2 * l2_penalty(params)
    if not np.isfinite(total.data).all():
        raise TrainingAbort("non-finite composite generator loss")
    return total
