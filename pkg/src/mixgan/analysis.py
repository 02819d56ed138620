"""Static analysis artifacts: score histograms, 4x4 response heatmaps, image grids."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

from .errors import CountError  # noqa: E402
from .metrics import score_statistics  # noqa: E402
from .models import spatial_score_map  # noqa: E402

GROUP_COLORS = {"real": "tab:blue", "fake": "tab:orange", "mixed": "tab:green"}
# fixed metadata keeps PNG bytes reproducible across matplotlib versions
PNG_META = {"Software": None}


@dataclass
class HeatmapArtifact:
    raw: np.ndarray
    normalized: np.ndarray
    source: str | None = None
    path: Path | None = None


def normalize_heatmap(raw) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def to_display(images) -> np.ndarray:
    """``[-1, 1]`` CHW (or NCHW) floats to HWC (NHWC) uint8."""
    x = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    x = np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.moveaxis(x, -3, -1)


def from_display(pixels) -> np.ndarray:
    return np.moveaxis(np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0, -1, -3)


def _save_rgb(array: np.ndarray, path: Path):
    mode = "L" if array.shape[-1] == 1 else "RGB"
    Image.fromarray(array[..., 0] if mode == "L" else array, mode).save(path)


def render_heatmap(d, image, out_dir=None, name: str = "heatmap_000", source: str | None = None,
                   scale: int | None = None) -> HeatmapArtifact:
    """Normalized 4x4 response map of one image; dark = scored as fake.

    When ``out_dir`` is given, writes ``<name>.png`` (heatmap, nearest-neighbor
    upscaled to the image size) and ``<name>_input.png``.
    """
    was = d.training
    d.eval()
    try:
        raw = spatial_score_map(d, image).double().cpu().numpy()
    finally:
        d.train(was)
    art = HeatmapArtifact(raw=raw, normalized=normalize_heatmap(raw), source=source)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        scale = scale or max(1, image.shape[-1] // raw.shape[-1])
        gray = np.rint(art.normalized * 255).astype(np.uint8)
        gray = np.kron(gray, np.ones((scale, scale), dtype=np.uint8))
        art.path = out_dir / f"{name}.png"
        Image.fromarray(gray, "L").save(art.path)
        _save_rgb(to_display(image), out_dir / f"{name}_input.png")
    return art


def render_score_distributions(d, reals, fakes, mixed, out_dir, name: str = "scores", bins: int = 50):
    """Overlaid real/fake/mixed score histograms on shared bins, plus raw CSV.

    Returns ``(plot_path, csv_path, stats)``. An empty ``mixed`` group gives
    a two-series plot.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = score_statistics(d, reals, fakes, mixed, bins=bins)

    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "index", "score"])
        for group, values in stats.groups().items():
            for i, v in enumerate(values):
                writer.writerow([group, i, repr(float(v))])

    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for group, values in stats.groups().items():
        ax.hist(values, bins=stats.edges, alpha=0.5, color=GROUP_COLORS[group], label=group)
    ax.set_xlabel("discriminator score")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    plot_path = out_dir / f"{name}.png"
    fig.savefig(plot_path, metadata=PNG_META)
    plt.close(fig)
    return plot_path, csv_path, stats


def image_grid(images, rows: int, cols: int, padding: int = 0) -> np.ndarray:
    """Tile ``rows * cols`` images row-major into one HWC uint8 array."""
    n = rows * cols
    if len(images) < n:
        raise CountError(f"grid of {rows}x{cols} needs {n} images, got {len(images)}")
    tiles = to_display(images[:n])
    h, w, c = tiles.shape[1:]
    grid = np.zeros((rows * h + (rows - 1) * padding, cols * w + (cols - 1) * padding, c), dtype=np.uint8)
    for k in range(n):
        r, q = divmod(k, cols)
        y, x = r * (h + padding), q * (w + padding)
        grid[y:y + h, x:x + w] = tiles[k]
    return grid


def render_image_grid(images, rows: int, cols: int, path, padding: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _save_rgb(image_grid(images, rows, cols, padding), path)
    return path
