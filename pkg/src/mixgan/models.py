"""DCGAN-style and ResNet-style generators/discriminators.

Layer layouts follow the usual DCGAN and WGAN-GP ResNet configurations,
scaled by ``base_channels``:

* generators project ``z`` to a 4x4 map, upsample by 2 until the target
  resolution, batch-normalize every hidden block and end with ``tanh``;
* discriminators downsample by 2 until a 4x4 map and score it with a linear
  head. The head is evaluated per location (``score_map``) and summed, so the
  per-location contributions double as the spatial tap used for heatmaps.

Channel widths double per resolution halving and are capped at
``8 * base_channels``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

from .errors import CapabilityError, ConfigError

FAMILIES = ("dcgan", "resnet")
D_NORMS = ("spectral", "layer")


@dataclass
class ModelSpec:
    family: str = "dcgan"
    resolution: int = 64
    z_dim: int = 128
    base_channels: int = 64
    d_norm: list = field(default_factory=lambda: ["spectral"])
    g_norm: str = "batch"
    channels: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        r = self.resolution
        if not (isinstance(r, int) and 32 <= r <= 256 and r & (r - 1) == 0):
            raise ConfigError(f"unsupported resolution {r}; use a power of two in [32, 256]")
        if self.z_dim < 1 or self.base_channels < 1 or self.channels < 1:
            raise ConfigError("z_dim, base_channels and channels must be positive")
        self.d_norm = sorted(set(self.d_norm))
        bad = [n for n in self.d_norm if n not in D_NORMS]
        if bad:
            raise ConfigError(f"unknown discriminator normalization {bad}; expected a subset of {D_NORMS}")
        if self.g_norm != "batch":
            raise ConfigError(f"only batch normalization is supported in the generator, got {self.g_norm!r}")

    @property
    def n_scales(self) -> int:
        return int(math.log2(self.resolution // 4))

    def width(self, level: int) -> int:
        """Channels at ``level`` (0 = full resolution, n_scales = 4x4)."""
        return self.base_channels * min(8, 2 ** max(level - 1, 0)) if level else self.base_channels

    def to_dict(self) -> dict:
        return {
            "family": self.family, "resolution": self.resolution, "z_dim": self.z_dim,
            "base_channels": self.base_channels, "d_norm": list(self.d_norm),
            "g_norm": self.g_norm, "channels": self.channels,
        }


# ---------------------------------------------------------------------------
# spectral normalization


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, n_power_iterations: int = 1,
                       eps: float = 1e-12):
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    ``weight`` is flattened to ``[out, -1]``. Returns ``(weight / sigma, u, v,
    sigma)`` where ``u``/``v`` are the advanced left/right singular vector
    estimates. Gradients flow through ``weight`` only.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        u = F.normalize(u, dim=0, eps=eps)
        v = F.normalize(mat.t() @ u, dim=0, eps=eps)
        for _ in range(n_power_iterations):
            v = F.normalize(mat.t() @ u, dim=0, eps=eps)
            u = F.normalize(mat @ v, dim=0, eps=eps)
    sigma = torch.dot(u, mat @ v).clamp_min(eps)
    return weight / sigma, u, v, sigma


class SpectralNorm(nn.Module):
    """Parametrization holding the persistent power-iteration vectors.

    One power iteration per forward in training mode; eval mode reuses the
    stored vectors so evaluation is side-effect free.
    """

    def __init__(self, weight: torch.Tensor, n_power_iterations: int = 1, eps: float = 1e-12,
                 warmup: int = 15):
        super().__init__()
        self.n_power_iterations = n_power_iterations
        self.eps = eps
        mat = weight.detach().reshape(weight.shape[0], -1)
        u = F.normalize(torch.randn(mat.shape[0], dtype=mat.dtype), dim=0, eps=eps)
        _, u, v, _ = spectral_normalize(mat, u, warmup, eps)
        self.register_buffer("u", u)
        self.register_buffer("v", v)

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        mat = weight.reshape(weight.shape[0], -1)
        if self.training:
            _, u, v, _ = spectral_normalize(mat, self.u, self.n_power_iterations, self.eps)
            with torch.no_grad():
                self.u.copy_(u)
                self.v.copy_(v)
        # clones keep earlier graphs valid when the buffers move on
        u, v = self.u.clone(), self.v.clone()
        sigma = torch.dot(u, mat @ v).clamp_min(self.eps)
        return weight / sigma


def apply_spectral_norm(module: nn.Module, n_power_iterations: int = 1) -> nn.Module:
    parametrize.register_parametrization(module, "weight", SpectralNorm(module.weight, n_power_iterations))
    return module


def spectral_norm_layers(model: nn.Module):
    """Yield ``(layer, SpectralNorm)`` for every spectrally normalized layer."""
    for mod in model.modules():
        if parametrize.is_parametrized(mod, "weight"):
            for p in mod.parametrizations.weight:
                if isinstance(p, SpectralNorm):
                    yield mod, p


def _init_weights(model: nn.Module):
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(mod.weight, 0.0, 0.02)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)


class _Seeded:
    """Run module construction under a private, seeded global RNG."""

    def __init__(self, seed):
        self.seed = seed
        self._fork = None

    def __enter__(self):
        self._fork = torch.random.fork_rng(devices=[])
        self._fork.__enter__()
        torch.manual_seed(self.seed)

    def __exit__(self, *exc):
        return self._fork.__exit__(*exc)


# ---------------------------------------------------------------------------
# generators


class _UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        h = F.interpolate(F.relu(self.bn1(x)), scale_factor=2, mode="nearest")
        h = self.conv2(F.relu(self.bn2(self.conv1(h))))
        return h + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


class Generator(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        n = spec.n_scales
        c0 = spec.width(n)
        self.project = nn.Linear(spec.z_dim, c0 * 16)
        if spec.family == "dcgan":
            self.project_norm = nn.BatchNorm1d(c0 * 16)
            blocks = []
            for level in range(n, 1, -1):
                cin, cout = spec.width(level), spec.width(level - 1)
                blocks += [nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.ReLU(True)]
            blocks += [nn.ConvTranspose2d(spec.width(1), spec.channels, 4, 2, 1), nn.Tanh()]
            self.body = nn.Sequential(*blocks)
        else:
            self.project_norm = nn.Identity()
            blocks = [_UpBlock(spec.width(level), spec.width(level - 1)) for level in range(n, 0, -1)]
            blocks += [nn.BatchNorm2d(spec.width(0)), nn.ReLU(True),
                       nn.Conv2d(spec.width(0), spec.channels, 3, padding=1), nn.Tanh()]
            self.body = nn.Sequential(*blocks)
        self._c0 = c0

    @property
    def z_dim(self):
        return self.spec.z_dim

    def forward(self, z):
        h = self.project(z)
        if self.spec.family == "dcgan":
            h = F.relu(self.project_norm(h))
        return self.body(h.view(z.shape[0], self._c0, 4, 4))


# ---------------------------------------------------------------------------
# discriminators


def _norm_layer(spec: ModelSpec, channels: int):
    # layer norm over (C, H, W) with a per-channel affine
    return nn.GroupNorm(1, channels) if "layer" in spec.d_norm else nn.Identity()


class _DownBlock(nn.Module):
    def __init__(self, spec, cin, cout, first=False):
        super().__init__()
        self.first = first
        self.norm1 = nn.Identity() if first else _norm_layer(spec, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = _norm_layer(spec, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        h = x if self.first else F.relu(self.norm1(x))
        h = self.conv2(F.relu(self.norm2(self.conv1(h))))
        h = F.avg_pool2d(h, 2)
        if self.first:
            return h + self.skip(F.avg_pool2d(x, 2))
        return h + F.avg_pool2d(self.skip(x), 2)


class Discriminator(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        n = spec.n_scales
        layers = []
        if spec.family == "dcgan":
            layers += [nn.Conv2d(spec.channels, spec.width(1), 4, 2, 1), nn.LeakyReLU(0.2, True)]
            for level in range(1, n):
                cin, cout = spec.width(level), spec.width(level + 1)
                layers += [nn.Conv2d(cin, cout, 4, 2, 1), _norm_layer(spec, cout), nn.LeakyReLU(0.2, True)]
        else:
            layers.append(_DownBlock(spec, spec.channels, spec.width(1), first=True))
            for level in range(1, n):
                layers.append(_DownBlock(spec, spec.width(level), spec.width(level + 1)))
            layers.append(nn.ReLU())
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(spec.width(n) * 16, 1)

    def score_map(self, x: torch.Tensor) -> torch.Tensor:
        """Per-location score contributions ``[N, 4, 4]``; scores are their sum plus bias."""
        f = self.features(x)
        w = self.head.weight.view(1, *f.shape[1:])
        return (f * w).sum(1)

    def forward_with_map(self, x):
        tap = self.score_map(x)
        return tap.flatten(1).sum(1) + self.head.bias, tap

    def forward(self, x):
        return self.forward_with_map(x)[0]


def build_generator(spec: ModelSpec, seed: int = 0) -> Generator:
    with _Seeded(seed):
        g = Generator(spec)
        _init_weights(g)
    return g


def build_discriminator(spec: ModelSpec, seed: int = 0) -> Discriminator:
    with _Seeded(seed):
        d = Discriminator(spec)
        _init_weights(d)
        if "spectral" in spec.d_norm:
            for mod in list(d.modules()):
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    apply_spectral_norm(mod)
    return d


def pool_score_map(tap: torch.Tensor, size: int = 4) -> torch.Tensor:
    """Average-pool a ``[..., h, w]`` tap to ``[..., size, size]``."""
    if tap.shape[-1] < size or tap.shape[-2] < size:
        raise CapabilityError(f"spatial tap {tuple(tap.shape[-2:])} is smaller than {size}x{size}")
    lead = tap.shape[:-2]
    pooled = F.adaptive_avg_pool2d(tap.reshape(-1, 1, *tap.shape[-2:]), size)
    return pooled.reshape(*lead, size, size)


@torch.no_grad()
def spatial_score_map(d: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """4x4 map of discriminator responses for one image ``[C,H,W]`` or a batch."""
    if not hasattr(d, "score_map"):
        raise CapabilityError(f"{type(d).__name__} exposes no spatial tap")
    single = image.dim() == 3
    x = image[None] if single else image
    pooled = pool_score_map(d.score_map(x))
    return pooled[0] if single else pooled
