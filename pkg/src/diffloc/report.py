"""Deterministic metric files and matplotlib figures written next to them.

Every delimited or JSON file is a pure function of its inputs, so repeated
runs with the same config and seed give byte-identical files. Figures use
the non-interactive Agg backend and are written without a timestamp.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS_FORMAT = "diffloc-metrics"
METRICS_VERSION = 1

_PNG_META = {"Software": None}


def fmt(x) -> str:
    """Shortest round-trip text for floats; ints and strings unchanged."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def write_json(path, obj: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n")
    return path


def metrics_document(kind: str, body: dict) -> dict:
    return {"format": METRICS_FORMAT, "version": METRICS_VERSION, "kind": kind, **body}


def block_means(values, block: int = 100) -> np.ndarray:
    """Means over consecutive, non-overlapping blocks; a trailing partial block is dropped."""
    v = np.asarray(values, dtype=float)
    n = len(v) // block
    return v[: n * block].reshape(n, block).mean(axis=1) if n else np.zeros(0)


# -- figures -----------------------------------------------------------------


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curve(rows, path, block: int = 100) -> Path:
    """``rows`` are (phase, iteration, view, loss); one panel per phase."""
    phases = [p for p in ("init", "e2e") if any(r[0] == p for r in rows)]
    fig, axes = plt.subplots(1, max(len(phases), 1), figsize=(5 * max(len(phases), 1), 3.5), squeeze=False)
    for ax, phase in zip(axes[0], phases):
        it = np.array([r[1] for r in rows if r[0] == phase])
        loss = np.array([r[3] for r in rows if r[0] == phase])
        ax.plot(it, loss, lw=0.5, alpha=0.35, color="tab:gray", label="per iteration")
        bm = block_means(loss, block)
        if len(bm):
            centers = it[0] + block * (np.arange(len(bm)) + 0.5)
            ax.plot(centers, bm, marker="o", ms=3, color="tab:blue", label=f"{block}-iteration mean")
        ax.set_title("initialisation loss" if phase == "init" else "expected pose loss")
        ax.set_xlabel("iteration")
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_error_cdf(translation_cm, rotation_deg, path, thresholds=((5, 5), (2, 2), (1, 1))) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, vals, unit in ((axes[0], translation_cm, "cm"), (axes[1], rotation_deg, "deg")):
        v = np.sort(np.asarray(vals, dtype=float))
        ax.step(v, np.arange(1, len(v) + 1) / len(v), where="post")
        for t in sorted({float(th[0] if unit == "cm" else th[1]) for th in thresholds}):
            ax.axvline(t, color="tab:red", lw=0.7, ls="--")
        ax.set_xscale("log")
        ax.set_xlabel(f"error ({unit})")
        ax.set_ylabel("fraction of test views")
        ax.set_ylim(0, 1.02)
    fig.tight_layout()
    return _save(fig, path)


def plot_accuracy_bars(summaries: dict, path) -> Path:
    """Grouped bars of the percentage of views under each threshold, one group per run label."""
    labels = list(summaries)
    keys = list(next(iter(summaries.values()))["accuracy"]) if labels else []
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(labels), 1)
    x = np.arange(len(keys))
    for k, label in enumerate(labels):
        ax.bar(x + k * width, [summaries[label]["accuracy"][key] for key in keys], width, label=label)
    ax.set_xticks(x + width * (len(labels) - 1) / 2, keys)
    ax.set_ylabel("% of test views")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_gradcheck(results, path) -> Path:
    """Each check's worst metric relative to its tolerance (log scale); below 1 passes for errors."""
    names = [r.name for r in results]
    ratio = []
    for r in results:
        if r.name.startswith("pnp_backward_noisy"):
            # cosine: distance from 1 against the allowed distance
            ratio.append(max(1.0 - r.value, 1e-16) / (1.0 - r.tol))
        else:
            ratio.append(max(r.value, 1e-16) / r.tol)
    colors = ["tab:green" if r.passed else "tab:red" for r in results]
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(names) + 1.2))
    ax.barh(names, ratio, color=colors)
    ax.axvline(1.0, color="k", lw=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("worst error / tolerance")
    ax.invert_yaxis()
    fig.tight_layout()
    return _save(fig, path)
