"""Saturated GAN losses (Wasserstein and hinge), mean-reduced over the batch.

Mixed samples are not special here: they arrive inside the fake-score vector.
"""
from __future__ import annotations

import torch

from .errors import NumericError, ParameterError

LOSS_KINDS = ("wasserstein", "hinge")


def _check(scores: torch.Tensor, name: str, iteration=None) -> torch.Tensor:
    scores = torch.as_tensor(scores)
    if scores.numel() == 0:
        raise ParameterError(f"{name} must be nonempty")
    if not torch.isfinite(scores).all():
        where = "" if iteration is None else f" at iteration {iteration}"
        raise NumericError(f"non-finite {name}{where}")
    return scores.reshape(-1)


def _check_kind(kind: str):
    if kind not in LOSS_KINDS:
        raise ParameterError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def d_loss(real_scores, fake_scores, kind: str = "hinge", iteration=None) -> torch.Tensor:
    _check_kind(kind)
    real = _check(real_scores, "real scores", iteration)
    fake = _check(fake_scores, "fake scores", iteration)
    if kind == "wasserstein":
        return fake.mean() - real.mean()
    return torch.relu(1.0 - real).mean() + torch.relu(1.0 + fake).mean()


def g_loss(fake_scores, kind: str = "hinge", iteration=None) -> torch.Tensor:
    # identical for both kinds: the generator raises the critic's score
    _check_kind(kind)
    return -_check(fake_scores, "fake scores", iteration).mean()
