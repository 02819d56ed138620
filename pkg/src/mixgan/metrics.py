"""Frechet distance between feature Gaussians and discriminator score statistics."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CapabilityError, CountError, DataError, NumericError, ShapeError

DEFAULT_N_FAKE = 10_000
HIST_BINS = 50
EIG_TOL = 1e-6


# ---------------------------------------------------------------------------
# feature extractors


class ToyExtractor:
    """Fixed-seed random linear projection of flattened pixels.

    Exactly linear, cheap, deterministic; used for desk-scale FID.
    """

    name = "toy"

    def __init__(self, resolution: int, channels: int = 3, dim: int = 64, seed: int = 0):
        self.resolution = resolution
        self.channels = channels
        self.dim = dim
        self.seed = seed
        n_in = channels * resolution * resolution
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((n_in, dim)) / np.sqrt(n_in)

    def __call__(self, images) -> np.ndarray:
        x = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
        x = x.reshape(x.shape[0], -1).astype(np.float64)
        if x.shape[1] != self.projection.shape[0]:
            raise ShapeError(f"toy extractor expects {self.projection.shape[0]} pixels per image, got {x.shape[1]}")
        return x @ self.projection


def cache_dir() -> Path:
    return Path(os.environ.get("MIXGAN_CACHE", Path.home() / ".cache" / "mixgan"))


class InceptionExtractor:
    """2048-d pool features of Inception-v3.

    Weights are read from ``$MIXGAN_CACHE/inception_v3.pth`` (torchvision
    ``inception_v3`` state dict); nothing is downloaded.
    """

    name = "inception"
    dim = 2048
    weights_file = "inception_v3.pth"

    def __init__(self, device="cpu"):
        path = cache_dir() / self.weights_file
        try:
            from torchvision.models import inception_v3
        except ImportError as exc:
            raise CapabilityError("torchvision is not installed; use the 'toy' extractor instead") from exc
        if not path.is_file():
            raise CapabilityError(f"Inception weights not found at {path}; use the 'toy' extractor instead")
        model = inception_v3(weights=None, aux_logits=True, init_weights=False, transform_input=False)
        model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        model.fc = torch.nn.Identity()
        self.model = model.eval().to(device)
        self.device = device
        self._mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self._std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    @torch.no_grad()
    def __call__(self, images) -> np.ndarray:
        x = torch.as_tensor(images, dtype=torch.float32)
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        x = ((x + 1) / 2 - self._mean) / self._std
        return self.model(x.to(self.device)).double().cpu().numpy()


def get_extractor(name: str, resolution: int, channels: int = 3):
    if name == "toy":
        return ToyExtractor(resolution, channels)
    if name == "inception":
        return InceptionExtractor()
    raise CapabilityError(f"unknown feature extractor {name!r}; available: 'toy', 'inception'")


def extract_features(extractor, images, chunk: int = 500) -> np.ndarray:
    return np.concatenate([extractor(images[i:i + chunk]) for i in range(0, len(images), chunk)])


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self):
        return self.mean.shape[0]


def fit_gaussian(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be [N, d], got shape {x.shape}")
    if x.shape[0] < 2:
        raise DataError(f"need at least 2 feature rows to fit a covariance, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mean, (cov + cov.T) / 2)


def _clamped_eigh(mat: np.ndarray, what: str):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    tol = EIG_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.size and vals.min() < -tol:
        raise NumericError(f"{what} has eigenvalue {vals.min():.3g} below tolerance -{tol:.3g}")
    return np.clip(vals, 0.0, None), vecs


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the cross term is the sum of square roots of the eigenvalues
    of the symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ShapeError(f"Gaussian dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    vals_a, vecs_a = _clamped_eigh(a.cov, "first covariance")
    sqrt_a = (vecs_a * np.sqrt(vals_a)) @ vecs_a.T
    cross_vals, _ = _clamped_eigh(sqrt_a @ b.cov @ sqrt_a, "covariance product")
    diff = a.mean - b.mean
    dist = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(cross_vals).sum())
    if not np.isfinite(dist):
        raise NumericError("Frechet distance is not finite")
    scale = max(1.0, float(np.trace(a.cov) + np.trace(b.cov)))
    if dist < -EIG_TOL * scale:
        raise NumericError(f"Frechet distance {dist:.3g} is negative beyond round-off")
    return max(dist, 0.0)


def compute_fid(extractor, real_images, fake_images, n_fake: int = DEFAULT_N_FAKE,
                allow_fewer: bool = False, chunk: int = 500) -> float:
    """FID of the full real set against ``n_fake`` fakes.

    ``real_images`` may be a precomputed :class:`GaussianStats`.
    ``fake_images`` is an image array/tensor or a callable ``n -> images``
    that is asked for ``chunk``-sized batches until ``n_fake`` are produced.
    """
    if callable(fake_images):
        parts, left = [], n_fake
        while left > 0:
            parts.append(extractor(fake_images(min(chunk, left))))
            left -= parts[-1].shape[0]
        fake_feats = np.concatenate(parts)[:n_fake]
    else:
        if len(fake_images) < n_fake:
            if not allow_fewer:
                raise CountError(f"FID needs {n_fake} fake images, got {len(fake_images)}")
            n_fake = len(fake_images)
        fake_feats = extract_features(extractor, fake_images[:n_fake], chunk)
    if isinstance(real_images, GaussianStats):
        real_stats = real_images
    else:
        real_stats = fit_gaussian(extract_features(extractor, real_images, chunk))
    return frechet_distance(real_stats, fit_gaussian(fake_feats))


# ---------------------------------------------------------------------------
# discriminator score statistics


@dataclass
class ScoreStats:
    real: np.ndarray
    fake: np.ndarray
    mixed: np.ndarray
    edges: np.ndarray
    counts: dict

    def groups(self):
        out = {"real": self.real, "fake": self.fake}
        if self.mixed.size:
            out["mixed"] = self.mixed
        return out


@torch.no_grad()
def discriminator_scores(d, images: torch.Tensor, chunk: int = 256) -> np.ndarray:
    if images is None or len(images) == 0:
        return np.zeros(0)
    was_training = d.training
    d.eval()
    try:
        out = [d(images[i:i + chunk]).double().cpu().numpy() for i in range(0, len(images), chunk)]
    finally:
        d.train(was_training)
    return np.concatenate(out)


def shared_edges(groups, bins: int = HIST_BINS) -> np.ndarray:
    pooled = np.concatenate([g for g in groups if g.size])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def score_statistics(d, reals, fakes, mixed=None, bins: int = HIST_BINS) -> ScoreStats:
    """Raw discriminator scores per group plus histograms on shared bin edges."""
    real = discriminator_scores(d, reals)
    fake = discriminator_scores(d, fakes)
    mix = discriminator_scores(d, mixed)
    if real.size == 0 or fake.size == 0:
        raise DataError("score statistics need nonempty real and fake groups")
    edges = shared_edges([real, fake, mix], bins)
    counts = {name: np.histogram(vals, bins=edges)[0]
              for name, vals in (("real", real), ("fake", fake), ("mixed", mix))}
    return ScoreStats(real, fake, mix, edges, counts)
