"""Command-line entry point.

One command per pipeline stage: datagen, train, eval, lipschitz,
attack. Every command writes only under --out, drops a run manifest
there (even on failure), and emits machine-readable JSON errors with a
nonzero exit code instead of stack traces. CLISA_THREADS caps BLAS
parallelism and must be honored before numpy loads.
"""

import os


def _cap_threads():
    n = os.environ.get("CLISA_THREADS")
    if n:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, n)


_cap_threads()

import csv
import json
import sys
import time
from dataclasses import asdict, fields

import click
import numpy as np

from .datagen import SceneConfig, generate_dataset, load_index, read_pair
from .errors import ClisaError, ContractError
from .lipschitz import (
    fgsm_attack,
    pgd_attack,
    probe_model,
    probe_module,
    write_report_csv,
)
from .losses import LossWeights
from .metrics import coverage_stats, error_overlay, evaluate_pair
from .model import GeneratorConfig, GeneratorModel
from .reporting import (
    plot_attack_curves,
    plot_coverage_scatter,
    plot_lipschitz_bars,
    plot_training_curves,
)
from .serialize import write_pgm
from .tensor import Tensor, no_grad
from .training import TrainConfig, predict_mask, run_experiment

MANIFEST_NAME = "run_manifest.json"


# ---- config / manifest plumbing ---------------------------------------------


def _from_dict(cls, data, context):
    """Strict dataclass construction: unknown keys are config typos."""
    if not isinstance(data, dict):
        raise ContractError(f"{context}: expected a JSON object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ContractError(
            f"{context}: unknown config keys {unknown}; allowed keys are {sorted(allowed)}"
        )
    return cls(**data)


def _load_json(path, context):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ContractError(f"{context}: cannot read config {path}: {e}") from e


def _list_outputs(out_dir):
    found = []
    for root, _, names in os.walk(out_dir):
        for name in names:
            if name == MANIFEST_NAME:
                continue
            found.append(os.path.relpath(os.path.join(root, name), out_dir))
    return sorted(found)


def _run_command(out_dir, command, config_echo, seed, body):
    """Execute a command body, always leaving a manifest under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_echo,
        "seed": seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    try:
        body()
    except (ClisaError, OSError, ValueError) as e:
        manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        manifest["error"] = {"kind": type(e).__name__, "message": str(e)}
        manifest["outputs"] = _list_outputs(out_dir)
        with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
            json.dump(manifest, f, indent=2)
        click.echo(json.dumps({"error": type(e).__name__, "message": str(e)}), err=True)
        sys.exit(1)
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest["outputs"] = _list_outputs(out_dir)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2)
    click.echo(out_dir)


def _load_pairs(data_dir, split, limit):
    index = load_index(data_dir)
    ids = index["splits"].get(split)
    if not ids:
        raise ContractError(f"dataset at {data_dir} has no {split!r} samples")
    if limit:
        ids = ids[:limit]
    return ids, [read_pair(data_dir, i) for i in ids]


# ---- commands ---------------------------------------------------------------


@click.group()
def main():
    """CLiSA cloud segmentation: data, training, evaluation, stability lab."""


@main.command("datagen")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON SceneConfig overrides.")
@click.option("--out", required=True, type=click.Path())
@click.option("--count", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_datagen(config_path, out, count, seed):
    """Generate a synthetic patch-pair dataset with index.json splits."""
    raw = _load_json(config_path, "datagen") if config_path else {}
    raw.setdefault("seed", seed)

    def body():
        cfg = _from_dict(SceneConfig, raw, "datagen")
        generate_dataset(cfg, count, out)

    _run_command(out, "datagen", {"scene": raw, "count": count}, seed, body)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--resume", is_flag=True, default=False)
def cmd_train(config_path, data_dir, out, resume):
    """Train per a JSON config with "generator" and "train" sections."""
    raw = _load_json(config_path, "train")

    def body():
        unknown = sorted(set(raw) - {"generator", "train"})
        if unknown:
            raise ContractError(
                f"train: unknown config sections {unknown}; use 'generator' and 'train'"
            )
        gen_cfg = _from_dict(GeneratorConfig, raw.get("generator", {}), "train.generator")
        tdata = dict(raw.get("train", {}))
        if "weights" in tdata:
            tdata["weights"] = _from_dict(LossWeights, tdata["weights"], "train.weights")
        train_cfg = _from_dict(TrainConfig, tdata, "train.train")
        run_experiment(gen_cfg, train_cfg, data_dir, out, resume=resume)
        with open(os.path.join(out, "curves.csv"), newline="") as f:
            rows = list(csv.DictReader(f))
        plot_training_curves(rows, os.path.join(out, "curves.png"))

    _run_command(out, "train", raw, raw.get("train", {}).get("seed", 0), body)


@main.command("eval")
@click.option("--model", "model_dir", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--gsd", default=1.0, show_default=True,
              help="Ground sampling distance (m/pixel) for Hausdorff distances.")
@click.option("--split", default="test", show_default=True)
@click.option("--limit", default=0, show_default=True, help="0 = whole split.")
def cmd_eval(model_dir, data_dir, out, gsd, split, limit):
    """Per-patch metrics CSV, omission/commission overlays, coverage plot."""

    def body():
        G = GeneratorModel.load(model_dir)
        ids, pairs = _load_pairs(data_dir, split, limit)
        rows, true_f, pred_f = [], [], []
        for i, pair in zip(ids, pairs):
            pred = predict_mask(G, pair.image)
            rep = evaluate_pair(pred, pair.mask, gsd=gsd)
            rows.append({"id": i, **rep.as_dict()})
            true_f.append(pair.mask.mean())
            pred_f.append(pred.mean())
            write_pgm(os.path.join(out, f"{i:05d}_overlay.pgm"),
                      error_overlay(pred, pair.mask))
        fieldnames = list(rows[0].keys())
        mean_row = {"id": "mean"}
        for k in fieldnames[1:]:
            vals = [r[k] for r in rows]
            mean_row[k] = any(vals) if k == "hausdorff_empty_mask" else float(np.mean(vals))
        with open(os.path.join(out, "metrics.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fieldnames)
            w.writeheader()
            w.writerows(rows)
            w.writerow(mean_row)
        r2, mae, degenerate = coverage_stats(true_f, pred_f)
        plot_coverage_scatter(true_f, pred_f, r2, mae, os.path.join(out, "coverage.png"))
        with open(os.path.join(out, "summary.json"), "w") as f:
            json.dump({k: mean_row[k] for k in fieldnames[1:]}
                      | {"coverage_r2": r2, "coverage_mae": mae,
                         "coverage_degenerate": degenerate}, f, indent=2)

    _run_command(out, "eval", {"model": model_dir, "data": data_dir, "gsd": gsd,
                               "split": split, "limit": limit}, 0, body)


@main.command("lipschitz")
@click.option("--model", "model_dir", type=click.Path(), default=None)
@click.option("--random-init", is_flag=True, default=False)
@click.option("--module", "module_kind",
              type=click.Choice(["mst", "dosa", "dosa_hc2a"]), default="dosa",
              show_default=True, help="Probe module kind for --random-init.")
@click.option("--channels", default="0,5,25,50", show_default=True)
@click.option("--width", default=64, show_default=True,
              help="Channel width c of the random-init probe module.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def cmd_lipschitz(model_dir, random_init, module_kind, channels, width, seed, out):
    """Empirical diag-Jacobian norms against the theorem bounds, as CSV."""
    if bool(model_dir) == random_init:
        raise click.UsageError("give exactly one of --model and --random-init")
    chans = [int(c) for c in channels.split(",") if c != ""]

    def body():
        bad = [c for c in chans if c < 0 or c >= width]
        if bad:
            raise ContractError(f"channels {bad} out of range for width {width}")
        if random_init:
            reports = probe_module(module_kind, width, chans, seed)
        else:
            G = GeneratorModel.load(model_dir)
            reports = probe_model(G, chans, seed=seed)
        write_report_csv(os.path.join(out, "lipschitz.csv"), reports)
        plot_lipschitz_bars(reports, os.path.join(out, "lipschitz.png"))

    _run_command(out, "lipschitz",
                 {"model": model_dir, "random_init": random_init, "module": module_kind,
                  "channels": chans, "width": width}, seed, body)


@main.command("attack")
@click.option("--model", "model_dir", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--method", type=click.Choice(["fgsm", "pgd20"]), default="fgsm",
              show_default=True)
@click.option("--eps-grid", default="0,0.02,0.05,0.1", show_default=True)
@click.option("--split", default="test", show_default=True)
@click.option("--limit", default=8, show_default=True, help="0 = whole split.")
@click.option("--out", required=True, type=click.Path())
def cmd_attack(model_dir, data_dir, method, eps_grid, split, limit, out):
    """mIoU-vs-epsilon robustness sweep; eps 0 reproduces the clean eval."""
    grid = [float(e) for e in eps_grid.split(",") if e != ""]

    def body():
        if any(e < 0 for e in grid):
            raise ContractError(f"eps grid must be nonnegative, got {grid}")
        G = GeneratorModel.load(model_dir)
        _, pairs = _load_pairs(data_dir, split, limit)
        rows = []
        for eps in grid:
            mious = []
            for pair in pairs:
                x = pair.image.data
                if method == "fgsm":
                    x_adv = fgsm_attack(G, x, pair.mask, eps)
                else:
                    x_adv = pgd_attack(G, x, pair.mask, eps, iters=20)
                pred = predict_mask(G, Tensor(x_adv))
                mious.append(evaluate_pair(pred, pair.mask).miou_percent)
            rows.append({"model": G.config.attention, "method": method,
                         "eps": eps, "miou_percent": float(np.mean(mious))})
        with open(os.path.join(out, "attack.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["model", "method", "eps", "miou_percent"])
            w.writeheader()
            w.writerows(rows)
        plot_attack_curves(rows, os.path.join(out, "attack.png"))

    _run_command(out, "attack", {"model": model_dir, "data": data_dir, "method": method,
                                 "eps_grid": grid, "split": split, "limit": limit}, 0, body)


if __name__ == "__main__":
    main()
