"""Sliding-window log-likelihood sweeps, per-image statistics, quality
binning, and overlay rendering.

Lattice convention: a window of size w at stride s over an H x W image
visits rows = floor((H - w) / s) + 1 and cols = floor((W - w) / s) + 1
top-left positions, anchored at (0, 0). Other boundary conventions give
different counts for the same geometry (e.g. a 70 x 51 lattice holds 3570
cells where this one holds 52 x 75 = 3900 at 460 x 640, w = 46, s = 8);
the full-coverage floor rule above is the one this package uses
everywhere.

Every cell is evaluated standalone (batch of one) through the exact crop
scoring path of the checkpoint, so a sweep value is bit-identical to
scoring that crop directly, and results do not depend on how many worker
threads ran the sweep (``FLOWGRAIN_THREADS``).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import write_image
from .errors import WindowTooLargeError

SCALE_RANGE = 100.0
SCALE_LO_PCT = 1.0
SCALE_HI_PCT = 99.0
DEFAULT_BIN_WIDTH = 10.0
DEFAULT_ALPHA = 0.45


def worker_count():
    """Sweep thread count from FLOWGRAIN_THREADS; never changes results."""
    raw = os.environ.get("FLOWGRAIN_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def grid_shape(height, width, window, stride):
    if window > height or window > width:
        raise WindowTooLargeError(
            f"window {window} exceeds image extent {height}x{width}")
    return ((height - window) // stride + 1, (width - window) // stride + 1)


@dataclass
class HeatmapGrid:
    image_id: str
    window: int
    stride: int
    values: np.ndarray  # (rows, cols) raw log-likelihoods

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def cells(self):
        return self.values.size

    def cell_origin(self, r, c):
        return (r * self.stride, c * self.stride)


@dataclass
class ImageQualityStats:
    image_id: str
    p5: float
    p25: float
    p50: float
    p75: float
    p95: float
    bin_key: float  # (p25 + p50) / 2, raw LL units
    cells: int


@dataclass
class BinReport:
    width: float
    lo: float
    hi: float
    members: dict          # bin index -> sorted list of image ids
    representatives: dict  # bin index -> image id nearest the bin midpoint
    scaled_keys: dict      # image id -> scaled bin key


def sweep_loglik(scorer, image, window=None, stride=8, workers=None):
    """Score every lattice window of ``image`` with the crop scorer.

    ``scorer`` needs ``crop_size`` and ``score_crops`` (a TrainedFlow).
    ``image`` is (H, W, 3) uint8 pixels or anything with ``.pixels`` and
    ``.id``.
    """
    image_id = getattr(image, "id", "image")
    pixels = getattr(image, "pixels", image)
    w = int(window) if window is not None else scorer.crop_size
    s = int(stride)
    rows, cols = grid_shape(pixels.shape[0], pixels.shape[1], w, s)
    values = np.empty((rows, cols))
    n_workers = workers if workers is not None else worker_count()

    def run_cell(idx):
        r, c = divmod(idx, cols)
        crop = pixels[r * s : r * s + w, c * s : c * s + w, :]
        vec = crop.astype(np.float64).reshape(1, -1)
        values[r, c] = scorer.score_crops(vec)[0]

    if n_workers <= 1:
        for idx in range(rows * cols):
            run_cell(idx)
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(run_cell, range(rows * cols)))
    return HeatmapGrid(image_id=image_id, window=w, stride=s, values=values)


def image_stats(grid):
    """Percentiles by linear interpolation between order statistics."""
    vals = grid.values.reshape(-1)
    if vals.size == 0:
        raise ValueError("empty heatmap grid")
    p5, p25, p50, p75, p95 = (float(np.percentile(vals, p))
                              for p in (5, 25, 50, 75, 95))
    return ImageQualityStats(image_id=grid.image_id, p5=p5, p25=p25, p50=p50,
                             p75=p75, p95=p95, bin_key=(p25 + p50) / 2.0,
                             cells=int(vals.size))


def compute_scale(grids):
    """Dataset-wide affine scaling anchors: 1st/99th percentile of all raw
    grid values, mapped to [0, 100]. Strictly increasing, so per-image LL
    ordering is preserved."""
    allvals = np.concatenate([g.values.reshape(-1) for g in grids])
    lo = float(np.percentile(allvals, SCALE_LO_PCT))
    hi = float(np.percentile(allvals, SCALE_HI_PCT))
    return lo, hi


def scale_values(values, lo, hi):
    values = np.asarray(values, dtype=np.float64)
    if hi - lo < 1e-12:
        return np.full_like(values, SCALE_RANGE / 2.0)
    return (values - lo) / (hi - lo) * SCALE_RANGE


def bin_images(stats, lo, hi, width=DEFAULT_BIN_WIDTH):
    """Group images by scaled bin key at the given increment; the
    representative of a bin is the member nearest its midpoint, ties
    broken by lexicographic id."""
    if not stats:
        raise ValueError("no image stats to bin")
    scaled = {st.image_id: float(scale_values(st.bin_key, lo, hi))
              for st in stats}
    members = {}
    for st in stats:
        idx = int(np.floor(scaled[st.image_id] / width))
        members.setdefault(idx, []).append(st.image_id)
    representatives = {}
    for idx, ids in members.items():
        ids.sort()
        mid = (idx + 0.5) * width
        representatives[idx] = min(ids, key=lambda i: (abs(scaled[i] - mid), i))
    return BinReport(width=width, lo=lo, hi=hi, members=members,
                     representatives=representatives, scaled_keys=scaled)


# ---------------------------------------------------------------------------
# rendering


_STOPS = np.array([
    [80.0, 0.0, 0.0],     # t = 0: dark red, lowest quality
    [235.0, 90.0, 20.0],  # t = 0.5
    [255.0, 235.0, 90.0],  # t = 1: yellow, fading to transparent
])


def _colormap(t):
    t = np.clip(t, 0.0, 1.0)
    lowseg = t < 0.5
    u = np.where(lowseg, t * 2.0, (t - 0.5) * 2.0)[..., None]
    c0 = np.where(lowseg[..., None], _STOPS[0], _STOPS[1])
    c1 = np.where(lowseg[..., None], _STOPS[1], _STOPS[2])
    return c0 + (c1 - c0) * u


def upsample_nearest(grid, height, width):
    """Assign each pixel the value of the lattice cell whose window center
    is nearest."""
    half = (grid.window - 1) / 2.0
    rmap = np.clip(np.round((np.arange(height) - half) / grid.stride), 0,
                   grid.rows - 1).astype(int)
    cmap = np.clip(np.round((np.arange(width) - half) / grid.stride), 0,
                   grid.cols - 1).astype(int)
    return grid.values[np.ix_(rmap, cmap)]


def render_overlay(image, grid, out_path, lo, hi, alpha=DEFAULT_ALPHA):
    """Alpha-blend the scaled heatmap onto the image and write a
    side-by-side original/overlay composite next to it.

    Low quality renders dark red and opaque; high quality fades through
    yellow to transparent. ``alpha`` = 0 reproduces the input bytes.
    """
    pixels = getattr(image, "pixels", image)
    h, w = pixels.shape[:2]
    big = upsample_nearest(grid, h, w)
    t = np.clip(scale_values(big, lo, hi) / SCALE_RANGE, 0.0, 1.0)
    color = _colormap(t)
    a = (alpha * (1.0 - t))[..., None]
    out = np.clip(np.round(pixels.astype(np.float64) * (1.0 - a) + color * a),
                  0, 255).astype(np.uint8)
    write_image(out_path, out)
    root, ext = os.path.splitext(str(out_path))
    composite_path = root + "_composite" + ext
    write_image(composite_path, np.concatenate([pixels, out], axis=1))
    return out_path, composite_path


# ---------------------------------------------------------------------------
# reports


def _fmt(x):
    return repr(float(x))


def export_report(stats, report, out_path):
    """CSV of per-image percentile statistics and bin assignments, ordered
    by bin then key; byte-identical across re-exports."""
    by_id = {st.image_id: st for st in stats}
    rows = []
    for idx in sorted(report.members):
        for image_id in sorted(report.members[idx],
                               key=lambda i: (report.scaled_keys[i], i)):
            st = by_id[image_id]
            rows.append((image_id, st, idx))
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("image_id,P5,P25,P50,P75,P95,bin_key,bin_index,cells\n")
        for image_id, st, idx in rows:
            fh.write(",".join([
                image_id, _fmt(st.p5), _fmt(st.p25), _fmt(st.p50),
                _fmt(st.p75), _fmt(st.p95), _fmt(st.bin_key), str(idx),
                str(st.cells),
            ]) + "\n")
    return out_path


def export_index_html(report, out_path, overlay_paths=None):
    """Small static page listing bins and their representatives."""
    lines = ["<!doctype html>", "<html><head><meta charset='utf-8'>",
             "<title>quality bins</title></head><body>",
             "<h1>Quality bins (ascending scaled log-likelihood)</h1>"]
    for idx in sorted(report.members):
        rep = report.representatives[idx]
        lines.append(f"<h2>bin {idx} "
                     f"[{idx * report.width:.0f}, {(idx + 1) * report.width:.0f})"
                     f" &mdash; representative: {rep}</h2>")
        lines.append("<ul>")
        for image_id in report.members[idx]:
            key = report.scaled_keys[image_id]
            lines.append(f"<li>{image_id} (scaled key {key:.2f})</li>")
        lines.append("</ul>")
        if overlay_paths and rep in overlay_paths:
            lines.append(f"<img src='{overlay_paths[rep]}' alt='{rep}'>")
    lines.append("</body></html>")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return out_path
