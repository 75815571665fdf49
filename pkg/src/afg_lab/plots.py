"""Static figures and tables from persisted artifacts.

Each renderer can also dump the exact numbers it draws as CSV so callers can
check series without reading pixels.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .afs import read_curve_csv
from .errors import ValidationError
from .evaluation import REPORT_FIELDS, EvalReport


def plot_afs(curve_csv, out_png=None, dump_csv=None) -> dict:
    """Two panels (relative distance, KL) against layer index.

    Returns the plotted series as ``{"distance": [...], "kl": [...]}``.
    """
    curve = read_curve_csv(curve_csv)
    series = {"distance": list(curve.mean_distance), "kl": list(curve.mean_kl)}
    if dump_csv is not None:
        with Path(dump_csv).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["panel", "layer_index", "layer", "value"])
            for panel, vals in series.items():
                for i, (name, v) in enumerate(zip(curve.layer_names, vals)):
                    w.writerow([panel, i, name, repr(v)])
    if out_png is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        x = np.arange(1, len(curve.layer_names) + 1)
        for ax, (panel, vals), ylabel in zip(axes, series.items(), ("relative distance", "KL divergence")):
            ax.plot(x, vals, marker="o")
            ax.set_xticks(x)
            ax.set_xticklabels(curve.layer_names, rotation=30)
            ax.set_ylabel(ylabel)
            ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_png, metadata={"Software": None})
        plt.close(fig)
    return series


def montage(features, out_png=None, dump_csv=None, pad: int = 2, label_width: int = 40) -> np.ndarray:
    """Grid with one row per layer and one column per group feature.

    ``features`` is a list (layers) of lists (groups) of tiles: arrays of
    shape (s, s) or (s, s, C), or objects with a ``pixels`` attribute.
    Returns the composed uint8 image.
    """
    if not features or not features[0]:
        raise ValidationError("montage needs at least one layer with one tile")
    r = len(features[0])
    rows = []
    for li, layer in enumerate(features):
        if len(layer) != r or any(t is None for t in layer):
            raise ValidationError(f"layer {li} has missing tiles (expected {r})")
        rows.append([np.asarray(t.pixels if hasattr(t, "pixels") else t, np.float32) for t in layer])
    s = rows[0][0].shape[0]
    for li, row in enumerate(rows):
        if any(t.shape[:2] != (s, s) for t in row):
            raise ValidationError(f"layer {li} has tiles of a different size")

    def rgb(t):
        t = t if t.ndim == 3 else t[:, :, None]
        return np.repeat(t, 3, axis=2) if t.shape[2] == 1 else t[:, :, :3]

    n = len(rows)
    h = n * s + (n + 1) * pad
    w = label_width + r * s + (r + 1) * pad
    canvas = np.full((h, w, 3), 255, np.uint8)
    for li, row in enumerate(rows):
        y0 = pad + li * (s + pad)
        for j, t in enumerate(row):
            x0 = label_width + pad + j * (s + pad)
            canvas[y0:y0 + s, x0:x0 + s] = np.clip(np.round(rgb(t) * 255), 0, 255).astype(np.uint8)
    img = Image.fromarray(canvas)
    draw = ImageDraw.Draw(img)
    for li in range(n):
        draw.text((2, pad + li * (s + pad) + s // 2 - 5), f"L{li + 1}", fill=(0, 0, 0))
    if out_png is not None:
        img.save(out_png, format="PNG")
    if dump_csv is not None:
        with Path(dump_csv).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["layer", "group", "mean", "min", "max"])
            for li, row in enumerate(rows):
                for j, t in enumerate(row):
                    wr.writerow([li, j, repr(float(t.mean())), repr(float(t.min())), repr(float(t.max()))])
    return np.asarray(img)


def render_tables(reports: list[EvalReport]) -> tuple[str, str]:
    """(aligned text table, CSV text) with one row per report."""
    rows = [[r.metric_name, f"{r.value:.4f}", str(r.n), r.config_fingerprint] for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(REPORT_FIELDS)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(REPORT_FIELDS, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(REPORT_FIELDS)
    for r in reports:
        wr.writerow([r.metric_name, repr(r.value), r.n, r.config_fingerprint])
    return "\n".join(lines) + "\n", buf.getvalue()


def parse_table_csv(text: str) -> list[EvalReport]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != REPORT_FIELDS:
        raise ValidationError(f"unexpected table header {header}")
    return [EvalReport(name, float(v), int(n), fp) for name, v, n, fp in reader]
