"""Lipschitz verification lab.

Computes the theoretical per-channel Jacobian bounds for the attention
modules from live weights, estimates the empirical spectral norm of the
channel-diagonal Jacobian blocks by power iteration, and runs FGSM /
PGD-20 adversarial sweeps. Operator norms of convolutions use the
circular-convolution model (exact via the 2-D DFT eigenvalue grid);
live layers use zero padding, so the bound is computed under the
circulant model and the gap shows up only at the borders.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .attention import dosa_forward, hc2a_forward, init_dosa, init_hc2a, init_mst, mst_attention_forward
from .errors import ContractError, ConvergenceError
from .layers import conv2d_raw
from .losses import FocalConfig, focal_loss, lovasz_softmax_loss
from .tensor import Tensor, concat, enable_grad, no_grad, reshape

SQRT2 = np.sqrt(2.0)


@dataclass
class EpsilonSet:
    """Kernel-drift scalars for the query/key/value convolutions."""

    eps_q: float = 0.0
    eps_k: float = 0.0
    eps_v: float = 0.0


@dataclass
class LipschitzReport:
    module: str  # mst | dosa | dosa_hc2a
    channel: int
    empirical: float
    bound: float
    b_value: float
    seed: int
    input_shape: tuple = None

    def row(self):
        return [self.module, self.channel, self.empirical, self.bound, self.b_value, self.seed]


# ---- operator norms ---------------------------------------------------------


def circulant_embedding(kernel, H, W):
    """First row/plane of the circular cross-correlation operator on H x W."""
    kernel = np.asarray(kernel)
    k = kernel.shape[0]
    half = k // 2
    base = np.zeros((H, W) + kernel.shape[2:], dtype=kernel.dtype)
    for u in range(k):
        for v in range(k):
            base[(u - half) % H, (v - half) % W] += kernel[u, v]
    return base


def conv_operator_norm(kernel, H, W):
    """Spectral norm of the circular-convolution operator of `kernel`.

    A 2-D kernel gives max |DFT| over the H x W frequency grid; a
    k x k x Cin x Cout kernel gives the max over frequencies of the
    spectral norm of the per-frequency Cin x Cout block.
    """
    kernel = np.asarray(kernel)
    base = circulant_embedding(kernel, H, W)
    F = np.fft.fft2(base, axes=(0, 1))
    if kernel.ndim == 2:
        return float(np.abs(F).max())
    if kernel.ndim != 4:
        raise ContractError(f"kernel must be 2-D or 4-D, got shape {kernel.shape}")
    mats = F.reshape(H * W, kernel.shape[2], kernel.shape[3])
    return float(max(np.linalg.svd(m, compute_uv=False)[0] for m in mats))


def epsilon_from_kernel(w, w0, hw=9):
    """Kernel-drift scalar: (1/9) (U^T Gamma U)_{0,0} with U_{jk} = omega^{jk}.

    omega = exp(2 pi i / hw); the (0,0) entry only ever sees omega^0, so
    the result is real for real kernels (the imaginary part is checked
    to vanish).
    """
    w = np.asarray(w, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    if w.shape != w0.shape:
        raise ContractError(f"kernel shapes differ: {w.shape} vs {w0.shape}")
    gamma = w - w0
    k = gamma.shape[0]
    omega = np.exp(2j * np.pi / hw)
    U = omega ** np.outer(np.arange(k), np.arange(k))
    val = (U.T @ gamma @ U)[0, 0] / 9.0
    if abs(val.imag) > 1e-9:
        raise ContractError(f"epsilon has non-vanishing imaginary part {val.imag}")
    return float(val.real)


# ---- theorem bounds ---------------------------------------------------------


def input_b_value(x):
    """B = sqrt(HW) * max(|min|, |max|) of the probed input."""
    x = np.asarray(x if not isinstance(x, Tensor) else x.data)
    h, w = x.shape[:2]
    return float(np.sqrt(h * w) * max(abs(x.min()), abs(x.max())))


def dosa_bound(eps, B):
    """Per-channel Jacobian bound of the dual-branch gating module."""
    if B < 0:
        raise ContractError(f"B must be nonnegative, got {B}")
    fq, fk, fv = 1 + 9 * eps.eps_q, 1 + 9 * eps.eps_k, 1 + 9 * eps.eps_v
    return 1.0 + 0.5 * fv * fq * (B + SQRT2 * fk * B**3) + 2.0 * fv


def hc2a_bound(eps_ca, z_norm, y_norm):
    """Per-channel Jacobian bound of the cross-channel module."""
    fq, fk, fv = 1 + 9 * eps_ca.eps_q, 1 + 9 * eps_ca.eps_k, 1 + 9 * eps_ca.eps_v
    return (1.0 / (2.0 * SQRT2)) * fv * (1.0 / SQRT2 + fq * fk * z_norm**2 * y_norm)


def combined_bound(dosa_b, hc2a_b):
    """Chain-rule product bound for the stacked module pair."""
    return dosa_b * hc2a_b


def dosa_epsilons(params, params0, channel):
    """EpsilonSet for a probed channel from live vs initial DOSA kernels.

    Per-branch epsilons are merged with max(), matching the theorem's
    identical-kernels simplification conservatively.
    """

    def eps(name, slicer):
        return epsilon_from_kernel(
            slicer(getattr(params, name).kernel.data),
            slicer(getattr(params0, name).kernel.data),
        )

    diag = lambda k: k[:, :, channel, channel]
    key_ch = lambda k: k[:, :, channel, 0]
    return EpsilonSet(
        eps_q=max(eps("query_ch", diag), eps("query_sp", diag)),
        eps_k=max(eps("key_ch", key_ch), eps("key_sp", diag)),
        eps_v=max(eps("value_ch", diag), eps("value_sp", diag)),
    )


def hc2a_epsilons(params, params0, channel):
    """EpsilonSet for HC2A: value conv drift plus LFAM fuse-conv drift
    standing in for the query/key kernels (the LFAM pyramid plays that
    role)."""
    diag = lambda k: k[:, :, channel, channel]
    eps_v = epsilon_from_kernel(
        diag(params.value.kernel.data), diag(params0.value.kernel.data)
    )
    eps_q = epsilon_from_kernel(
        diag(params.lfam_skip.fuse.kernel.data), diag(params0.lfam_skip.fuse.kernel.data)
    )
    eps_k = epsilon_from_kernel(
        diag(params.lfam_deep.fuse.kernel.data), diag(params0.lfam_deep.fuse.kernel.data)
    )
    return EpsilonSet(eps_q=eps_q, eps_k=eps_k, eps_v=eps_v)


# ---- probe modules ----------------------------------------------------------


def avgpool2(x):
    """2x2 average pooling (H, W even) as a Tensor composite."""
    h, w, c = x.shape
    x = reshape(x, (h // 2, 2, w // 2, 2, c))
    return x.mean(axis=3).mean(axis=1)


def matched_mst_blocks(c):
    """MST stack depth whose parameter count matches one DOSA module.

    A single attention block holds 4c^2 weights against DOSA's ~45c^2,
    so the parameter-matched baseline is a residual stack of blocks.
    """
    dosa_params = 45 * c * c + 14 * c + 1
    return max(1, round(dosa_params / (4 * c * c)))


def make_probe_module(kind, c, seed, dtype=np.float64, heads=4, mst_blocks=None):
    """(forward, params) for a standalone attention probe at width c.

    dosa_hc2a feeds HC2A a deeper map derived from the input itself
    (2x2 mean-pooled, channel-doubled), so the probe is self-contained.
    The mst probe is a parameter-matched stack of attention blocks
    (depth from matched_mst_blocks unless given).
    """
    rng = np.random.default_rng(seed)
    if kind == "mst":
        blocks = matched_mst_blocks(c) if mst_blocks is None else mst_blocks
        ps = [init_mst(rng, c, heads=heads, dtype=dtype) for _ in range(blocks)]

        def forward(x):
            for p in ps:
                x = mst_attention_forward(x, p)
            return x

        return forward, ps
    if kind == "dosa":
        p = init_dosa(rng, c, dtype=dtype)
        return (lambda x: dosa_forward(x, p)), p
    if kind == "dosa_hc2a":
        pd = init_dosa(rng, c, dtype=dtype)
        ph = init_hc2a(rng, c, dtype=dtype)

        def forward(x):
            z = dosa_forward(x, pd)
            pooled = avgpool2(x)
            y_prev = concat([pooled, pooled], axis=2)
            return hc2a_forward(z, y_prev, ph)

        return forward, (pd, ph)
    raise ContractError(f"unknown probe module kind {kind!r}")


# ---- empirical Jacobian probing ---------------------------------------------


def empirical_jacobian_diag_norm(
    module_forward, x, channel, h=1e-4, iters=50, max_iters=200, tol=1e-6, seed=0
):
    """Spectral norm of d(output channel i) / d(input channel i).

    Power iteration alternating a forward-difference Jacobian-vector
    product with a tape-based transposed product. Stops on relative
    change < tol (checked from `iters` halfway budget onward is not
    needed; convergence usually takes a handful of sweeps).
    """
    x = np.asarray(x if not isinstance(x, Tensor) else x.data, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=x.shape[:2])
    v /= np.linalg.norm(v)
    sigma_prev = None
    history = []
    for it in range(max_iters):
        xp = x.copy()
        xp[:, :, channel] += h * v
        xm = x.copy()
        xm[:, :, channel] -= h * v
        with no_grad():
            fp = module_forward(Tensor(xp)).data[:, :, channel]
            fm = module_forward(Tensor(xm)).data[:, :, channel]
        jv = (fp - fm) / (2 * h)
        jv_norm = np.linalg.norm(jv)
        if jv_norm == 0.0:
            return 0.0
        u = jv / jv_norm
        xt = Tensor(x, requires_grad=True)
        out = module_forward(xt)
        (out[:, :, channel] * Tensor(u)).sum().backward()
        w = xt.grad[:, :, channel]
        sigma = float(np.linalg.norm(w))
        history.append(sigma)
        if sigma == 0.0:
            return 0.0
        v = w / sigma
        if sigma_prev is not None and abs(sigma - sigma_prev) / sigma < tol:
            return sigma
        if it + 1 >= iters and sigma_prev is not None and abs(sigma - sigma_prev) / sigma < 1e-4:
            return sigma
        sigma_prev = sigma
    raise ConvergenceError(
        f"jacobian power iteration did not converge after {max_iters} iterations; "
        f"last iterates {history[-2:]}"
    )


def probe_module(kind, c, channels, seed, shape=(16, 16), input_scale=1.0):
    """LipschitzReports for one random-init module over the probe channels.

    Inputs are uniform in [-1, 1] * input_scale; random inits have zero
    kernel drift, so all epsilons vanish.
    """
    forward, params = make_probe_module(kind, c, seed)
    rng = np.random.default_rng([seed, 101])
    x = rng.uniform(-input_scale, input_scale, size=shape + (c,))
    B = input_b_value(x)
    eps0 = EpsilonSet()
    reports = []
    for ch in channels:
        emp = empirical_jacobian_diag_norm(forward, x, ch, seed=seed)
        if kind == "dosa":
            bound = dosa_bound(eps0, B)
        elif kind == "dosa_hc2a":
            with no_grad():
                z = dosa_forward(Tensor(x), params[0])
                pooled = avgpool2(Tensor(x))
                y_prev = concat([pooled, pooled], axis=2)
            z_norm = float(np.linalg.norm(z.data[:, :, ch]))
            y_norm = float(np.linalg.norm(y_prev.data[:, :, ch]))
            bound = combined_bound(dosa_bound(eps0, B), hc2a_bound(eps0, z_norm, y_norm))
        else:
            bound = float("nan")  # no theorem bound claimed for the baseline
        reports.append(
            LipschitzReport(
                module=kind, channel=ch, empirical=emp, bound=bound, b_value=B,
                seed=seed, input_shape=shape + (c,),
            )
        )
    return reports


def probe_model(G, channels, init_seed=0, shape=(16, 16), seed=0):
    """LipschitzReports for the level-0 attention module of a generator.

    Kernel-drift epsilons are extracted against a fresh init with the
    same config at `init_seed`; for a model probed at its own init seed
    they vanish and the bound reduces to the random-init case.
    """
    from .model import GeneratorModel

    mode = G.config.attention
    if mode not in ("dosa", "dosa_hc2a"):
        raise ContractError(
            f"model attention mode {mode!r} has no theorem bound to probe"
        )
    G0 = GeneratorModel(G.config, seed=init_seed)
    pd, pd0 = G.dosa[0], G0.dosa[0]
    c = pd.value_ch.kernel.shape[2]
    if mode == "dosa_hc2a":
        ph, ph0 = G.hc2a[0], G0.hc2a[0]

        def forward(x):
            z = dosa_forward(x, pd)
            pooled = avgpool2(x)
            y_prev = concat([pooled, pooled], axis=2)
            return hc2a_forward(z, y_prev, ph)

    else:
        forward = lambda x: dosa_forward(x, pd)

    rng = np.random.default_rng([seed, 101])
    x = rng.uniform(-1.0, 1.0, size=shape + (c,))
    B = input_b_value(x)
    reports = []
    for ch in channels:
        emp = empirical_jacobian_diag_norm(forward, x, ch, seed=seed)
        bound = dosa_bound(dosa_epsilons(pd, pd0, ch), B)
        if mode == "dosa_hc2a":
            with no_grad():
                z = dosa_forward(Tensor(x), pd)
                pooled = avgpool2(Tensor(x))
                y_prev = concat([pooled, pooled], axis=2)
            z_norm = float(np.linalg.norm(z.data[:, :, ch]))
            y_norm = float(np.linalg.norm(y_prev.data[:, :, ch]))
            bound = combined_bound(
                bound, hc2a_bound(hc2a_epsilons(ph, ph0, ch), z_norm, y_norm)
            )
        reports.append(
            LipschitzReport(
                module=mode, channel=ch, empirical=emp, bound=bound, b_value=B,
                seed=seed, input_shape=shape + (c,),
            )
        )
    return reports


def write_report_csv(path, reports):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["module", "channel", "empirical", "bound", "B", "seed"])
        for r in reports:
            writer.writerow(r.row())


# ---- adversarial attacks ----------------------------------------------------


def _segmentation_loss(model, x_tensor, y):
    yhat = model.forward(x_tensor)
    return focal_loss(yhat, y, FocalConfig()) + lovasz_softmax_loss(yhat, y)


def input_gradient(model, x, y):
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with enable_grad():
        loss = _segmentation_loss(model, xt, y)
        loss.backward()
    return xt.grad, float(loss.data)


def fgsm_attack(model, x, y, eps, valid_range=(0.0, 1.0)):
    """x' = clip(x + eps * sign(grad_x loss)); linf(x' - x) <= eps."""
    x = np.asarray(x, dtype=np.float64)
    if eps == 0.0:
        return x.copy()
    g, _ = input_gradient(model, x, y)
    x_adv = x + eps * np.sign(g)
    return np.clip(x_adv, *valid_range)


def pgd_attack(model, x, y, eps, alpha=None, iters=20, valid_range=(0.0, 1.0)):
    """iters gradient-sign steps of size alpha, projected onto the
    linf eps-ball around x and the valid range after every step."""
    x = np.asarray(x, dtype=np.float64)
    if eps == 0.0:
        return x.copy()
    if alpha is None:
        alpha = 2.5 * eps / iters
    x_adv = x.copy()
    for _ in range(iters):
        g, _ = input_gradient(model, x_adv, y)
        x_adv = x_adv + alpha * np.sign(g)
        x_adv = np.clip(x_adv, x - eps, x + eps)
        x_adv = np.clip(x_adv, *valid_range)
    return x_adv
