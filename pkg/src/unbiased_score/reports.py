"""Result emission: full-precision CSV, metadata sidecars, and figures.

CSV files are the machine contract: floats are written with 17 significant
digits so downstream regression tests can parse them losslessly, and rows
are fully determined by (config, seed). Timestamps and environment details
live only in a JSON sidecar next to each CSV, keeping the CSV byte-stable
across reruns. Each report also renders a matplotlib figure alongside the
delimited output.
"""

from __future__ import annotations

import csv
import json
import os
import platform
import time

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 (backend must be set first)
import numpy as np  # noqa: E402

__all__ = [
    "format_value",
    "write_rows",
    "write_sidecar",
    "save_line_figure",
    "save_box_figure",
    "save_hist_figure",
    "save_scatter_figure",
]


def format_value(v):
    """Render a cell: floats at 17 significant digits, others via str."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_rows(path, header, rows):
    """Write a CSV with formatted cells; parent directories are created."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])
    return path


def write_sidecar(path, config, seed, extra=None):
    """JSON metadata next to a result file: config echo, seed, versions,
    wall time. This is the only place timestamps appear."""
    payload = {
        "config": config,
        "master_seed": int(seed),
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    if extra:
        payload.update(extra)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_jsonify)
    return path


def _jsonify(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return str(v)


def _finish(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_line_figure(path, x, ys, labels, xlabel, ylabel, title, logy=False, logx=False):
    fig, ax = plt.subplots(figsize=(6, 4))
    for y, lab in zip(ys, labels):
        ax.plot(x, y, marker="o", label=lab)
    if logy:
        ax.set_yscale("log")
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if any(labels):
        ax.legend()
    return _finish(fig, path)


def save_box_figure(path, groups, positions, xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot(groups, positions=positions, widths=0.6)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _finish(fig, path)


def save_hist_figure(path, values, xlabel, title, vline=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(np.asarray(values), bins=40)
    if vline is not None:
        ax.axvline(vline, color="red", linestyle="--")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    return _finish(fig, path)


def save_scatter_figure(path, x, y, xlabel, ylabel, title, loglog=False):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(x, y, s=12, alpha=0.6)
    if loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _finish(fig, path)
