"""Mixed-sample GAN training loop.

Each outer iteration runs ``n_crit`` discriminator updates, in which the
first ``floor(r * B)`` fake slots are replaced by mixed samples, followed by
one generator update on fresh latents.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import MixStrategyConfig, compose_discriminator_batch, n_mixed_slots
from .data import BatchStream, Dataset, LatentPrior, sample_latent
from .errors import ConfigError, NumericError
from .losses import LOSS_KINDS, d_loss, g_loss
from .metrics import compute_fid, extract_features, fit_gaussian, get_extractor
from .models import ModelSpec, build_discriminator, build_generator
from .regularize import RegularizerConfig, consistency_regularization, gradient_penalty

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    n_crit: int = 2
    eta: float = 1e-3
    # beta1 = 0.01 is unusual for GANs (0.0 or 0.5 are common) but is the published setting
    beta1: float = 0.01
    beta2: float = 0.999
    adam_eps: float = 1e-8
    total_iterations: int = 100_000
    loss: str = "hinge"
    mix: MixStrategyConfig = field(default_factory=MixStrategyConfig)
    regularizers: RegularizerConfig = field(default_factory=RegularizerConfig)
    seed: int = 0
    eval_every: int = 5000
    eval_n_fake: int = 10_000
    eval_extractor: str = "toy"
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.mix, dict):
            self.mix = MixStrategyConfig(**self.mix)
        if isinstance(self.regularizers, dict):
            self.regularizers = RegularizerConfig(**self.regularizers)
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.n_crit < 1:
            raise ConfigError(f"n_crit must be >= 1, got {self.n_crit}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eta <= 0 or self.adam_eps <= 0:
            raise ConfigError("eta and adam_eps must be positive")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.total_iterations < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.eval_n_fake < 2:
            raise ConfigError("eval_n_fake must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamMoments:
    step: int
    m: list
    v: list


def adam_update(params, grads, moments: AdamMoments, eta: float, beta1: float, beta2: float,
                eps: float = 1e-8):
    """One bias-corrected Adam step. Returns ``(new_params, new_moments)``."""
    t = moments.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient at Adam step {t}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params.append(p - eta * m_hat / (v_hat.sqrt() + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamMoments(t, new_m, new_v)


class Adam:
    """In-place wrapper around :func:`adam_update` for a module's parameters."""

    def __init__(self, params, eta, beta1, beta2, eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.eta, self.beta1, self.beta2, self.eps = eta, beta1, beta2, eps
        self.moments = AdamMoments(0, [torch.zeros_like(p) for p in self.params],
                                   [torch.zeros_like(p) for p in self.params])

    @torch.no_grad()
    def step(self):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        new, self.moments = adam_update([p.detach() for p in self.params], grads, self.moments,
                                        self.eta, self.beta1, self.beta2, self.eps)
        for p, q in zip(self.params, new):
            p.copy_(q)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self):
        return {"step": self.moments.step, "m": [t.clone() for t in self.moments.m],
                "v": [t.clone() for t in self.moments.v]}

    def load_state_dict(self, state):
        self.moments = AdamMoments(int(state["step"]), [t.clone() for t in state["m"]],
                                   [t.clone() for t in state["v"]])


# ---------------------------------------------------------------------------
# state and steps


@dataclass
class TrainState:
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    torch_gen: torch.Generator
    stream: BatchStream | None = None
    iteration: int = 0
    d_steps: int = 0
    g_steps: int = 0
    fid_history: list = field(default_factory=list)

    @property
    def prior(self):
        return LatentPrior(self.generator.z_dim)


def init_state(cfg: TrainConfig, spec: ModelSpec, dataset: Dataset | None = None) -> TrainState:
    torch_gen = torch.Generator().manual_seed(cfg.seed)
    g = build_generator(spec, seed=cfg.seed)
    d = build_discriminator(spec, seed=cfg.seed + 1)
    return TrainState(
        generator=g, discriminator=d,
        opt_g=Adam(g.parameters(), cfg.eta, cfg.beta1, cfg.beta2, cfg.adam_eps),
        opt_d=Adam(d.parameters(), cfg.eta, cfg.beta1, cfg.beta2, cfg.adam_eps),
        rng=np.random.default_rng([cfg.seed, 1]),
        torch_gen=torch_gen,
        stream=dataset.stream(cfg.batch_size, cfg.seed) if dataset is not None else None,
    )


def _finite(value: torch.Tensor, what: str, state: TrainState):
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite {what} at iteration {state.iteration} (d_step {state.d_steps})")


def discriminator_step(state: TrainState, reals: torch.Tensor, cfg: TrainConfig) -> dict:
    g, d = state.generator, state.discriminator
    b = reals.shape[0]
    g.train()
    d.train()
    z = sample_latent(state.prior, b, state.torch_gen)
    with torch.no_grad():
        fakes = g(z)
    batch = compose_discriminator_batch(reals, fakes, cfg.mix, state.rng)
    k = 0 if cfg.mix.strategy == "none" else n_mixed_slots(b, cfg.mix.ratio)

    real_scores = d(reals)
    fake_scores = d(batch)
    adv = d_loss(real_scores, fake_scores, cfg.loss, iteration=state.iteration)
    total = adv
    reg = cfg.regularizers
    out = {"d_loss": float(adv.detach()), "gp": None, "cr": None, "n_mixed": k}
    if reg.gp_due(state.d_steps):
        gp = gradient_penalty(d, reals, fakes, state.torch_gen)
        total = total + reg.gp_coefficient * gp
        out["gp"] = float(gp.detach())
    if reg.cr_enabled:
        cr = consistency_regularization(d, reals, state.rng, reg.cr_max_shift, real_scores=real_scores)
        if reg.cr_on_mixed and k:
            cr = cr + consistency_regularization(d, batch[:k], state.rng, reg.cr_max_shift,
                                                 real_scores=fake_scores[:k])
        total = total + reg.cr_coefficient * cr
        out["cr"] = float(cr.detach())
    _finite(total, "discriminator loss", state)

    state.opt_d.zero_grad()
    total.backward()
    state.opt_d.step()
    state.opt_d.zero_grad()
    state.d_steps += 1
    return out


def generator_step(state: TrainState, cfg: TrainConfig) -> dict:
    g, d = state.generator, state.discriminator
    g.train()
    # eval mode keeps the critic's power-iteration state untouched
    d.eval()
    try:
        z = sample_latent(state.prior, cfg.batch_size, state.torch_gen)
        loss = g_loss(d(g(z)), cfg.loss, iteration=state.iteration)
        _finite(loss, "generator loss", state)
        state.opt_g.zero_grad()
        loss.backward()
        state.opt_g.step()
        state.opt_g.zero_grad()
        for p in d.parameters():
            p.grad = None
    finally:
        d.train()
    state.g_steps += 1
    return {"g_loss": float(loss.detach())}


# ---------------------------------------------------------------------------
# evaluation


def eval_generator(state: TrainState, seed: int):
    """Sampler ``n -> images`` from the generator in eval mode with its own RNG."""
    gen = torch.Generator().manual_seed(seed)
    g = state.generator

    @torch.no_grad()
    def sample(n):
        was = g.training
        g.eval()
        try:
            return g(sample_latent(state.prior, n, gen))
        finally:
            g.train(was)

    return sample


def evaluate_fid(state: TrainState, cfg: TrainConfig, real_stats, extractor) -> float:
    return compute_fid(extractor, real_stats, eval_generator(state, cfg.seed + 1_000_003), n_fake=cfg.eval_n_fake)


# ---------------------------------------------------------------------------
# run


@dataclass
class RunRecord:
    run_dir: Path | None
    config_path: Path | None = None
    metrics_path: Path | None = None
    checkpoints: list = field(default_factory=list)
    fid_history: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    state: TrainState | None = None


class JsonlSink:
    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self._fh = open(self.path, "a" if append else "w", encoding="utf-8")

    def __call__(self, record: dict):
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def run_training(cfg: TrainConfig, dataset: Dataset, spec: ModelSpec, run_dir=None, sinks=(),
                 hooks=(), resume=None, experiment: dict | None = None, stop_at: int | None = None) -> RunRecord:
    """Train for ``cfg.total_iterations`` generator updates.

    ``resume`` is a checkpoint path; ``hooks`` are called as
    ``hook(event, state, info)`` after every ``"d_step"``, ``"g_step"`` and
    ``"iteration"``; ``sinks`` receive each metrics record. ``stop_at``
    ends the run early at that iteration (used to simulate interruption).
    """
    from .checkpoint import load_checkpoint, restore_state, save_checkpoint

    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if dataset.resolution != spec.resolution:
        raise ConfigError(f"dataset resolution {dataset.resolution} != model resolution {spec.resolution}")
    state = init_state(cfg, spec, dataset)
    if resume is not None:
        restore_state(state, load_checkpoint(resume))

    run_dir = Path(run_dir) if run_dir is not None else None
    record = RunRecord(run_dir=run_dir, state=state, fid_history=state.fid_history)
    all_sinks = list(sinks)
    jsonl = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        record.metrics_path = run_dir / "metrics.jsonl"
        jsonl = JsonlSink(record.metrics_path, append=resume is not None)
        all_sinks.append(jsonl)
    experiment = experiment or {"model": spec.to_dict(), "train": cfg.to_dict()}

    def emit(rec):
        record.metrics.append(rec)
        for s in all_sinks:
            s(rec)

    def checkpoint(name):
        if run_dir is None:
            return None
        path = run_dir / "checkpoints" / name
        save_checkpoint(path, state, spec, experiment)
        record.checkpoints.append(path)
        return path

    extractor = real_stats = None
    if cfg.eval_every:
        extractor = get_extractor(cfg.eval_extractor, spec.resolution, spec.channels)
        real_stats = fit_gaussian(extract_features(extractor, dataset.images))

    t0 = time.perf_counter()
    end = cfg.total_iterations if stop_at is None else min(stop_at, cfg.total_iterations)
    try:
        if cfg.eval_every and state.iteration == 0 and not state.fid_history:
            fid = evaluate_fid(state, cfg, real_stats, extractor)
            state.fid_history.append((0, fid))
            emit({"iteration": 0, "d_loss": None, "g_loss": None, "gp": None, "cr": None,
                  "n_mixed": None, "fid": fid, "wall_time": time.perf_counter() - t0})
        while state.iteration < end:
            d_metrics = []
            for _ in range(cfg.n_crit):
                m = discriminator_step(state, state.stream.next(), cfg)
                d_metrics.append(m)
                for h in hooks:
                    h("d_step", state, m)
            gm = generator_step(state, cfg)
            for h in hooks:
                h("g_step", state, gm)
            state.iteration += 1
            rec = {
                "iteration": state.iteration,
                "d_loss": _mean(m["d_loss"] for m in d_metrics),
                "g_loss": gm["g_loss"],
                "gp": _mean(m["gp"] for m in d_metrics),
                "cr": _mean(m["cr"] for m in d_metrics),
                "n_mixed": sum(m["n_mixed"] for m in d_metrics),
                "fid": None,
            }
            if cfg.eval_every and (state.iteration % cfg.eval_every == 0 or state.iteration == cfg.total_iterations):
                rec["fid"] = evaluate_fid(state, cfg, real_stats, extractor)
                state.fid_history.append((state.iteration, rec["fid"]))
            rec["wall_time"] = time.perf_counter() - t0
            emit(rec)
            for h in hooks:
                h("iteration", state, rec)
            if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                checkpoint(f"iter_{state.iteration:07d}.pt")
            if not math.isfinite(rec["d_loss"]) or not math.isfinite(rec["g_loss"]):
                raise NumericError(f"non-finite losses at iteration {state.iteration}")
        checkpoint("final.pt" if state.iteration >= cfg.total_iterations else f"iter_{state.iteration:07d}.pt")
    except NumericError:
        path = checkpoint("failure.pt")
        if path is not None:
            log.error("numeric failure; state saved to %s", path)
        raise
    finally:
        if jsonl is not None:
            jsonl.close()
    return record
