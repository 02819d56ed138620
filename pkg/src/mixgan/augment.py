"""Mixing masks (Mixup, CutMix, SRMix) and discriminator batch composition.

A mask is a float64 array of shape ``[H, W]`` with entries in ``[0, 1]``.
It is broadcast over channels, so ``mix(x_i, x_j, M)`` keeps ``M`` of
``x_i`` and ``1 - M`` of ``x_j`` at every pixel.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ParameterError, ShapeError

STRATEGIES = ("none", "mixup", "cutmix", "srmix")
PAIRINGS = ("real-fake", "real-real", "fake-fake")
AXES = ("horizontal", "vertical")


@dataclass(frozen=True)
class MixupParams:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"mixup alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class CutMixBox:
    r_x: int
    r_y: int
    r_w: int
    r_h: int


@dataclass(frozen=True)
class SRMixParams:
    sigma: int
    axis: str
    x0: float
    dx: float


@dataclass
class MixStrategyConfig:
    """Which mask family to use and how many fake slots it replaces.

    ``ratio`` is the ladder ratio: ``floor(ratio * B)`` of the ``B`` fake
    slots in every discriminator batch become mixed samples.
    """

    strategy: str = "none"
    ratio: float = 0.0
    alpha: float = 1.0
    pairing: str = "real-fake"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown mix strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.pairing not in PAIRINGS:
            raise ParameterError(f"unknown pairing {self.pairing!r}; expected one of {PAIRINGS}")
        check_ratio(self.ratio)
        MixupParams(self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)


def check_ratio(r: float) -> float:
    if not 0.0 <= r <= 1.0:
        raise ParameterError(f"ladder ratio must lie in [0, 1], got {r}")
    return float(r)


def n_mixed_slots(batch_size: int, r: float) -> int:
    """``floor(r * B)``; the tiny slack absorbs binary round-off such as 0.29 * 100."""
    check_ratio(r)
    return min(batch_size, int(math.floor(r * batch_size + 1e-9)))


def _check_shape(shape, min_side=1):
    if len(shape) != 2:
        raise ShapeError(f"mask shape must be (H, W), got {shape}")
    h, w = int(shape[0]), int(shape[1])
    if h < min_side or w < min_side:
        raise ParameterError(f"mask shape {shape} is smaller than {min_side}x{min_side}")
    return h, w


def sample_mixup_mask(shape, params: MixupParams, rng: np.random.Generator) -> np.ndarray:
    h, w = _check_shape(shape)
    if not params.alpha > 0:
        raise ParameterError(f"mixup alpha must be positive, got {params.alpha}")
    lam = rng.beta(params.alpha, params.alpha)
    return np.full((h, w), lam, dtype=np.float64)


def cutmix_mask_from_box(shape, box: CutMixBox) -> np.ndarray:
    h, w = _check_shape(shape)
    mask = np.zeros((h, w), dtype=np.float64)
    mask[box.r_y:box.r_y + box.r_h, box.r_x:box.r_x + box.r_w] = 1.0
    return mask


def sample_cutmix_box(shape, rng: np.random.Generator) -> CutMixBox:
    # Box area fraction 1 - lam with lam ~ U(0, 1), aspect preserved; the box is
    # placed uniformly among positions where it fits, so no clipping shrinks it.
    h, w = _check_shape(shape, min_side=4)
    lam = rng.uniform()
    cut = math.sqrt(1.0 - lam)
    r_w = min(w, max(1, int(round(w * cut))))
    r_h = min(h, max(1, int(round(h * cut))))
    r_x = int(rng.integers(0, w - r_w + 1))
    r_y = int(rng.integers(0, h - r_h + 1))
    return CutMixBox(r_x, r_y, r_w, r_h)


def sample_cutmix_mask(shape, rng: np.random.Generator):
    box = sample_cutmix_box(shape, rng)
    return cutmix_mask_from_box(shape, box), box


def srmix_width_range(resolution: int) -> tuple[float, float]:
    return 2.0, max(2.0, resolution / 16.0)


def srmix_mask_from_params(shape, params: SRMixParams) -> np.ndarray:
    """Evaluate ``0.5 * (1 + sigma * tanh((x - x0) / dx))`` at integer pixel centers."""
    h, w = _check_shape(shape)
    if params.axis not in AXES:
        raise ParameterError(f"unknown SRMix axis {params.axis!r}")
    if params.sigma not in (-1, 1):
        raise ParameterError(f"SRMix sigma must be +1 or -1, got {params.sigma}")
    length = w if params.axis == "horizontal" else h
    coord = np.arange(length, dtype=np.float64)
    profile = 0.5 * (1.0 + params.sigma * np.tanh((coord - params.x0) / params.dx))
    if params.axis == "horizontal":
        return np.broadcast_to(profile[None, :], (h, w)).copy()
    return np.broadcast_to(profile[:, None], (h, w)).copy()


def sample_srmix_params(shape, resolution: int, rng: np.random.Generator) -> SRMixParams:
    h, w = _check_shape(shape)
    sigma = 1 if rng.uniform() < 0.5 else -1
    axis = AXES[int(rng.integers(0, 2))]
    length = w if axis == "horizontal" else h
    x0 = rng.uniform(length / 8.0, length * 7.0 / 8.0)
    dx_lo, dx_hi = srmix_width_range(resolution)
    dx = rng.uniform(dx_lo, dx_hi) if dx_hi > dx_lo else dx_lo
    return SRMixParams(sigma=sigma, axis=axis, x0=float(x0), dx=float(dx))


def sample_srmix_mask(shape, rng: np.random.Generator, resolution: int | None = None):
    h, w = _check_shape(shape)
    if resolution is None:
        resolution = max(h, w)
    if resolution != max(h, w):
        raise ShapeError(f"resolution {resolution} is inconsistent with mask shape {shape}")
    params = sample_srmix_params((h, w), resolution, rng)
    return srmix_mask_from_params((h, w), params), params


def sample_mask(strategy: str, shape, rng: np.random.Generator, alpha: float = 1.0) -> np.ndarray:
    if strategy == "mixup":
        return sample_mixup_mask(shape, MixupParams(alpha), rng)
    if strategy == "cutmix":
        return sample_cutmix_mask(shape, rng)[0]
    if strategy == "srmix":
        return sample_srmix_mask(shape, rng)[0]
    raise ParameterError(f"strategy {strategy!r} does not produce masks")


def mix(x_i, x_j, mask):
    """Blend two images (or batches) with a spatial mask.

    Works for numpy arrays and torch tensors with shape ``[..., C, H, W]``;
    the mask is ``[H, W]`` or broadcastable to the inputs.
    """
    if tuple(x_i.shape) != tuple(x_j.shape):
        raise ShapeError(f"cannot mix images of shapes {tuple(x_i.shape)} and {tuple(x_j.shape)}")
    if isinstance(x_i, torch.Tensor):
        m = torch.as_tensor(mask, dtype=x_i.dtype, device=x_i.device)
        where = torch.where
    else:
        m = np.asarray(mask, dtype=np.result_type(x_i.dtype, np.float32))
        where = np.where
    if tuple(m.shape[-2:]) != tuple(x_i.shape[-2:]):
        raise ShapeError(f"mask spatial shape {tuple(m.shape[-2:])} does not match image {tuple(x_i.shape[-2:])}")
    out = m * x_i + (1 - m) * x_j
    # equal inputs are returned untouched (m*a + (1-m)*a can drift by an ulp)
    return where(x_i == x_j, x_i, out)


def make_mixed_samples(reals: torch.Tensor, fakes: torch.Tensor, cfg: MixStrategyConfig,
                       rng: np.random.Generator, count: int | None = None) -> torch.Tensor:
    """Return ``count`` mixed samples built from the first ``count`` pairs.

    Every sample gets its own freshly drawn mask.
    """
    if reals.shape != fakes.shape:
        raise ShapeError(f"reals {tuple(reals.shape)} and fakes {tuple(fakes.shape)} differ")
    b = reals.shape[0]
    count = b if count is None else count
    if count == 0:
        return fakes[:0]
    h, w = reals.shape[-2:]
    masks = np.stack([sample_mask(cfg.strategy, (h, w), rng, cfg.alpha) for _ in range(count)])
    masks = torch.as_tensor(masks, dtype=reals.dtype, device=reals.device)[:, None]

    idx = torch.arange(count)
    partner = (idx + 1) % b
    if cfg.pairing == "real-fake":
        first, second = reals[idx], fakes[idx]
    elif cfg.pairing == "real-real":
        first, second = reals[idx], reals[partner]
    else:
        first, second = fakes[idx], fakes[partner]
    return mix(first, second, masks)


def compose_discriminator_batch(reals: torch.Tensor, fakes: torch.Tensor, cfg: MixStrategyConfig,
                                rng: np.random.Generator, ratio: float | None = None) -> torch.Tensor:
    """Replace the first ``floor(r * B)`` fake slots with mixed samples."""
    r = check_ratio(cfg.ratio if ratio is None else ratio)
    if reals.shape != fakes.shape:
        raise ShapeError(f"reals {tuple(reals.shape)} and fakes {tuple(fakes.shape)} differ")
    k = 0 if cfg.strategy == "none" else n_mixed_slots(fakes.shape[0], r)
    if k == 0:
        return fakes
    mixed = make_mixed_samples(reals, fakes, cfg, rng, count=k)
    return torch.cat([mixed, fakes[k:]], dim=0)
