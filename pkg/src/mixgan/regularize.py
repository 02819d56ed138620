"""Gradient penalty, consistency regularization and its augmentation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import CapabilityError, ConfigError, ShapeError


@dataclass
class RegularizerConfig:
    gp_enabled: bool = False
    gp_every: int = 5
    gp_coefficient: float = 10.0
    cr_enabled: bool = False
    cr_coefficient: float = 1.0
    cr_max_shift: int = 4
    # experimental: also feed mixed samples through the CR term
    cr_on_mixed: bool = False

    def __post_init__(self):
        if self.gp_every < 1:
            raise ConfigError(f"gp_every must be >= 1, got {self.gp_every}")
        if self.cr_max_shift < 0:
            raise ConfigError(f"cr_max_shift must be >= 0, got {self.cr_max_shift}")
        if self.gp_coefficient <= 0 or self.cr_coefficient <= 0:
            raise ConfigError("regularizer coefficients must be positive")

    def gp_due(self, d_step: int) -> bool:
        """Whether the 0-indexed discriminator step ``d_step`` carries the penalty."""
        return self.gp_enabled and (d_step + 1) % self.gp_every == 0

    def to_dict(self) -> dict:
        return asdict(self)


def gradient_penalty(d, reals: torch.Tensor, fakes: torch.Tensor, generator: torch.Generator | None = None,
                     eps: torch.Tensor | None = None, create_graph: bool = True) -> torch.Tensor:
    """Mean of ``(||grad D(x_hat)||_2 - 1)^2`` over real/fake interpolates.

    ``x_hat = eps * real + (1 - eps) * fake`` with one ``eps ~ U(0, 1)`` per
    sample unless ``eps`` is given.
    """
    if reals.shape != fakes.shape:
        raise ShapeError(f"reals {tuple(reals.shape)} and fakes {tuple(fakes.shape)} differ")
    b = reals.shape[0]
    if eps is None:
        eps = torch.rand(b, generator=generator, dtype=reals.dtype)
    eps = eps.reshape(b, *([1] * (reals.dim() - 1))).to(reals)
    x_hat = (eps * reals.detach() + (1 - eps) * fakes.detach()).requires_grad_(True)
    scores = d(x_hat)
    try:
        (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=create_graph)
    except RuntimeError as exc:
        raise CapabilityError(f"discriminator output is not differentiable w.r.t. its input: {exc}") from exc
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def shift_image(image: torch.Tensor, sx: int, sy: int) -> torch.Tensor:
    """Translate by ``(sx, sy)`` pixels (right/down positive), replicating edges."""
    h, w = image.shape[-2:]
    ys = (torch.arange(h) - sy).clamp(0, h - 1)
    xs = (torch.arange(w) - sx).clamp(0, w - 1)
    return image[..., ys[:, None], xs[None, :]]


def cr_augment(image: torch.Tensor, rng: np.random.Generator, max_shift: int = 4,
               flip: bool | None = None, shift: tuple[int, int] | None = None) -> torch.Tensor:
    """Random horizontal flip (p=0.5) followed by an integer shift in ``[-max_shift, max_shift]^2``.

    ``flip``/``shift`` pin the random choices; ``shift`` is ``(horizontal, vertical)``.
    """
    if flip is None:
        flip = bool(rng.uniform() < 0.5)
    if shift is None:
        sx, sy = (int(s) for s in rng.integers(-max_shift, max_shift + 1, size=2))
    else:
        sx, sy = shift
    out = image.flip(-1) if flip else image
    if sx or sy:
        out = shift_image(out, sx, sy)
    return out


def cr_augment_batch(images: torch.Tensor, rng: np.random.Generator, max_shift: int = 4) -> torch.Tensor:
    """Per-sample :func:`cr_augment` in one gather; draws the same random stream."""
    b, c, h, w = images.shape
    ys = torch.empty(b, h, dtype=torch.long)
    xs = torch.empty(b, w, dtype=torch.long)
    for k in range(b):
        flip = bool(rng.uniform() < 0.5)
        sx, sy = (int(s) for s in rng.integers(-max_shift, max_shift + 1, size=2))
        ys[k] = (torch.arange(h) - sy).clamp(0, h - 1)
        col = (torch.arange(w) - sx).clamp(0, w - 1)
        xs[k] = w - 1 - col if flip else col
    bi = torch.arange(b)[:, None, None, None]
    ci = torch.arange(c)[None, :, None, None]
    return images[bi, ci, ys[:, None, :, None], xs[:, None, None, :]]


def consistency_regularization(d, reals: torch.Tensor, rng: np.random.Generator, max_shift: int = 4,
                               real_scores: torch.Tensor | None = None,
                               augment=None) -> torch.Tensor:
    """Mean squared change of the discriminator score under benign augmentation.

    ``real_scores`` may be passed to reuse an existing forward; ``augment``
    replaces the batch augmentation (``images, rng -> images``).
    """
    if reals.shape[0] == 0:
        raise ShapeError("consistency regularization needs a nonempty batch")
    augmented = augment(reals, rng) if augment is not None else cr_augment_batch(reals, rng, max_shift)
    if real_scores is None:
        real_scores = d(reals)
    return ((real_scores - d(augmented)) ** 2).mean()
