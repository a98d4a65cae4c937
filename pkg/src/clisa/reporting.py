"""Matplotlib figure rendering for the CLI report paths.

Every CSV a command writes gets a PNG next to it: training curves,
mIoU-vs-epsilon attack sweeps, Lipschitz bound-vs-empirical bars, and
coverage scatter plots. Uses the Agg backend; nothing here opens a
window.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, out_png):
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_training_curves(rows, out_png):
    """Loss and validation-mIoU curves from curves.csv row dicts."""
    steps = [int(r["step"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(steps, [float(r["g_total"]) for r in rows], label="generator")
    if any(float(r["d_loss"]) for r in rows):
        ax1.plot(steps, [float(r["d_loss"]) for r in rows], label="discriminator")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()
    ev = [(int(r["step"]), float(r["val_miou"])) for r in rows if r["val_miou"] != ""]
    if ev:
        ax2.plot(*zip(*ev), marker="o")
    ax2.set_xlabel("step")
    ax2.set_ylabel("val mIoU (%)")
    ax2.set_ylim(0, 100)
    return _finish(fig, out_png)


def plot_attack_curves(rows, out_png):
    """mIoU vs epsilon, one line per (model, method) pair."""
    fig, ax = plt.subplots(figsize=(5, 3.8))
    keys = sorted({(r["model"], r["method"]) for r in rows})
    for model, method in keys:
        pts = sorted(
            (float(r["eps"]), float(r["miou_percent"]))
            for r in rows
            if r["model"] == model and r["method"] == method
        )
        ax.plot(*zip(*pts), marker="o", label=f"{model} / {method}")
    ax.set_xlabel("perturbation strength $\\epsilon$")
    ax.set_ylabel("mIoU (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    return _finish(fig, out_png)


def plot_lipschitz_bars(reports, out_png):
    """Empirical norm vs theoretical bound per probed channel."""
    fig, ax = plt.subplots(figsize=(6, 3.8))
    labels = [f"{r.module}\ni={r.channel}" for r in reports]
    pos = np.arange(len(reports))
    ax.bar(pos - 0.2, [r.empirical for r in reports], width=0.4, label="empirical")
    bounds = [r.bound for r in reports]
    if np.isfinite(bounds).any():
        ax.bar(pos + 0.2, bounds, width=0.4, label="bound")
    ax.set_xticks(pos, labels, fontsize=8)
    ax.set_yscale("log")
    ax.set_ylabel("diag-Jacobian norm")
    ax.legend()
    return _finish(fig, out_png)


def plot_coverage_scatter(true_fracs, pred_fracs, r2, mae, out_png):
    """Predicted vs true cloud coverage with the identity reference line."""
    fig, ax = plt.subplots(figsize=(4.2, 4))
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.scatter(true_fracs, pred_fracs, s=18, alpha=0.7)
    ax.set_xlabel("true coverage")
    ax.set_ylabel("predicted coverage")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title(f"$R^2$={r2:.3f}  MAE={mae:.3f}", fontsize=10)
    return _finish(fig, out_png)
