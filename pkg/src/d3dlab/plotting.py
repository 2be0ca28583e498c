"""Figures written straight to files (SVG or PNG by extension)."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import hsv_to_rgb  # noqa: E402

from .network import LayerName  # noqa: E402

FLOW_PANELS = ("RGB", "TV-L1", "baseline probe", "D3D probe")


def flow_to_rgb(u: np.ndarray, v: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Hue encodes direction, saturation magnitude (normalized per panel)."""
    mag = np.hypot(u, v)
    top = max_mag if max_mag is not None else float(mag.max())
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = mag / top if top > 0 else np.zeros_like(mag)
    hsv = np.stack([hue, np.clip(sat, 0, 1), np.ones_like(mag)], axis=-1)
    return hsv_to_rgb(hsv)


def plot_sweep(rows, path, title: str = "flow prediction from each layer") -> None:
    """EPE against tap depth, one line per (series, kind, mode).

    ``rows`` holds (series, layer, kind, mode, epe) tuples.
    """
    lines = defaultdict(list)
    for series, layer, kind, mode, epe in rows:
        lines[(series, str(kind), mode)].append((LayerName.parse(layer), epe))
    layers = sorted({l for pts in lines.values() for l, _ in pts}, key=lambda l: l.order)
    xpos = {l: i for i, l in enumerate(layers)}
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for (series, kind, mode), pts in sorted(lines.items()):
        pts.sort(key=lambda p: p[0].order)
        style = "--" if mode == "ft" else "-"
        label = f"{series} {kind}" + (" (ft)" if mode == "ft" else "")
        ax.plot([xpos[l] for l, _ in pts], [e for _, e in pts], style, marker="o", label=label)
    ax.set_xticks(range(len(layers)))
    ax.set_xticklabels([l.short for l in layers])
    ax.set_xlabel("layer")
    ax.set_ylabel("end-point error (px)")
    ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_flow_grid(panels, path, headers=FLOW_PANELS) -> None:
    """One row per example; each row is (rgb image, flow, flow, ...).

    The first entry of a row is an (H, W, 3) image, the rest (2, H, W) flows.
    Flows are upsampled by repetition to the image size.
    """
    n_rows, n_cols = len(panels), len(headers)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.0 * n_cols, 2.0 * n_rows), squeeze=False)
    for r, row in enumerate(panels):
        img = np.clip(row[0], 0, 1)
        h, w = img.shape[:2]
        for c, ax in enumerate(axes[r]):
            if c == 0:
                ax.imshow(img)
            else:
                flow = np.asarray(row[c])
                fy, fx = h // flow.shape[1], w // flow.shape[2]
                flow = flow.repeat(fy, axis=1).repeat(fx, axis=2)
                ax.imshow(flow_to_rgb(flow[0], flow[1]))
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(headers[c], fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_accuracy_bars(rows, path, title: str = "held-out accuracy") -> None:
    """Bars of mean accuracy per method; ``rows`` holds (method, accuracy) pairs."""
    by_method = defaultdict(list)
    for method, acc in rows:
        by_method[method].append(acc)
    names = list(by_method)
    means = [float(np.nanmean(by_method[m])) for m in names]
    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    ax.bar(range(len(names)), means, color="0.55")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=35, ha="right", fontsize="small")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
