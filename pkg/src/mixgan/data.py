"""Image datasets, synthetic desk-scale data and the latent prior."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SYNTHETIC_KINDS = ("gaussian-blobs", "colored-shapes")

PALETTE = np.array([
    [0.90, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.25, 0.35, 0.90],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.85],
    [0.20, 0.80, 0.85],
])


class Dataset:
    """In-memory image set, values in ``[-1, 1]``, shape ``[N, C, H, W]``."""

    def __init__(self, images: torch.Tensor, name: str = ""):
        if images.dim() != 4 or images.shape[0] == 0:
            raise DataError(f"dataset must be a nonempty [N, C, H, W] tensor, got {tuple(images.shape)}")
        if images.shape[-1] != images.shape[-2]:
            raise DataError("dataset images must be square")
        self.images = images.contiguous()
        self.name = name

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, idx):
        return self.images[idx]

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def epoch_permutation(self, seed: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([seed, epoch]).permutation(len(self))

    def stream(self, batch_size: int, seed: int) -> BatchStream:
        return BatchStream(self, batch_size, seed)


class BatchStream:
    """Endless batches drawn without replacement, reshuffled every epoch.

    The position is two integers, so it checkpoints trivially.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.cursor = 0
        self._perm = dataset.epoch_permutation(seed, 0)

    def next(self) -> torch.Tensor:
        picked = []
        need = self.batch_size
        while need:
            if self.cursor == len(self._perm):
                self.epoch += 1
                self.cursor = 0
                self._perm = self.dataset.epoch_permutation(self.seed, self.epoch)
            take = self._perm[self.cursor:self.cursor + need]
            picked.append(take)
            self.cursor += len(take)
            need -= len(take)
        return self.dataset.images[torch.as_tensor(np.concatenate(picked))]

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor}

    def load_state_dict(self, state: dict):
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self._perm = self.dataset.epoch_permutation(self.seed, self.epoch)


# ---------------------------------------------------------------------------
# image folders


def resize_short_side(img: Image.Image, resolution: int) -> Image.Image:
    w, h = img.size
    short = min(w, h)
    if short == resolution:
        return img
    size = (max(resolution, int(round(w * resolution / short))), max(resolution, int(round(h * resolution / short))))
    return img.resize(size, Image.BILINEAR)


def center_crop(img: Image.Image, resolution: int) -> Image.Image:
    w, h = img.size
    left = int(round((w - resolution) / 2.0))
    top = int(round((h - resolution) / 2.0))
    return img.crop((left, top, left + resolution, top + resolution))


def normalize(array: np.ndarray) -> np.ndarray:
    """Map uint8 ``[0, 255]`` to ``[-1, 1]``, channels first."""
    x = np.asarray(array, dtype=np.float32) / 127.5 - 1.0
    if x.ndim == 2:
        x = x[..., None]
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def preprocess(img: Image.Image, resolution: int) -> np.ndarray:
    # order matters: resize, then center-crop, then normalize
    return normalize(np.asarray(center_crop(resize_short_side(img.convert("RGB"), resolution), resolution)))


def load_image_folder(path, resolution: int) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"image folder {root} does not exist")
    files = sorted(p for p in root.rglob("*") if p.is_file())
    images, skipped = [], 0
    for f in files:
        try:
            with Image.open(f) as img:
                images.append(preprocess(img, resolution))
        except (UnidentifiedImageError, OSError) as exc:
            skipped += 1
            log.warning("skipping undecodable file %s (%s)", f, exc)
    if skipped:
        log.warning("skipped %d undecodable file(s) in %s", skipped, root)
    if not images:
        raise DataError(f"no decodable images in {root}")
    return Dataset(torch.from_numpy(np.stack(images)), name=str(root))


# ---------------------------------------------------------------------------
# synthetic data


def _gaussian_blobs(rng, n, res):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / res
    out = np.empty((n, 3, res, res))
    for k in range(n):
        mode = rng.integers(0, 4)
        bg = 0.1 + 0.1 * rng.uniform(size=3)
        img = np.broadcast_to(bg[:, None, None], (3, res, res)).copy()
        for _ in range(1 + mode % 3):
            cx, cy = rng.uniform(0.2, 0.8, size=2)
            s = rng.uniform(0.06, 0.15)
            color = PALETTE[(mode + rng.integers(0, 2)) % len(PALETTE)]
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
            img += color[:, None, None] * blob
        out[k] = img
    return out


def _colored_shapes(rng, n, res):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    out = np.empty((n, 3, res, res))
    for k in range(n):
        shape = rng.integers(0, 3)
        color = PALETTE[rng.integers(0, len(PALETTE))]
        bg = 0.05 + 0.15 * rng.uniform(size=3)
        size = rng.uniform(0.18, 0.32) * res
        cx, cy = rng.uniform(size, res - size, size=2)
        if shape == 0:
            inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= size ** 2
        elif shape == 1:
            inside = (np.abs(xx - cx) <= size * 0.85) & (np.abs(yy - cy) <= size * 0.85)
        else:
            # upward triangle
            rel = (yy - (cy - size)) / (2 * size)
            inside = (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * size)
        img = np.where(inside[None], color[:, None, None], bg[:, None, None])
        out[k] = img
    return out


def make_synthetic_dataset(kind: str, n: int, resolution: int, seed: int) -> Dataset:
    """Procedural images whose modes are (shape or blob count) x palette color."""
    if n < 1:
        raise DataError(f"synthetic dataset needs n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "gaussian-blobs":
        raw = _gaussian_blobs(rng, n, resolution)
    elif kind == "colored-shapes":
        raw = _colored_shapes(rng, n, resolution)
    else:
        raise ConfigError(f"unknown synthetic dataset {kind!r}; expected one of {SYNTHETIC_KINDS}")
    images = np.clip(raw, 0.0, 1.0) * 2.0 - 1.0
    return Dataset(torch.from_numpy(images.astype(np.float32)), name=f"synthetic://{kind}?n={n}&seed={seed}")


def parse_synthetic_uri(uri: str):
    """``synthetic://<kind>?n=..&seed=..`` -> ``(kind, n, seed)``."""
    parsed = urlparse(uri)
    if parsed.scheme != "synthetic":
        raise ConfigError(f"not a synthetic dataset URI: {uri!r}")
    query = parse_qs(parsed.query)
    unknown = set(query) - {"n", "seed"}
    if unknown:
        raise ConfigError(f"unknown synthetic dataset parameters {sorted(unknown)}")
    try:
        n = int(query.get("n", ["1000"])[0])
        seed = int(query.get("seed", ["0"])[0])
    except ValueError as exc:
        raise ConfigError(f"bad synthetic dataset URI {uri!r}: {exc}") from exc
    return parsed.netloc, n, seed


def open_dataset(uri: str, resolution: int) -> Dataset:
    if uri.startswith("synthetic://"):
        kind, n, seed = parse_synthetic_uri(uri)
        return make_synthetic_dataset(kind, n, resolution, seed)
    return load_image_folder(uri, resolution)


# ---------------------------------------------------------------------------
# latent prior


@dataclass(frozen=True)
class LatentPrior:
    z_dim: int

    def __post_init__(self):
        if self.z_dim < 1:
            raise ConfigError(f"z_dim must be >= 1, got {self.z_dim}")


def sample_latent(prior: LatentPrior, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """I.i.d. standard normal latents ``[batch, z_dim]``."""
    if batch < 1:
        raise ConfigError(f"latent batch must be >= 1, got {batch}")
    return torch.randn(batch, prior.z_dim, generator=generator)
