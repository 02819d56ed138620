"""Acceptance suite: one PASS/FAIL line per criterion (run with ``pytest tests/test_acceptance.py``)."""
import json
import math

import numpy as np
import pytest
import scipy.stats
import torch

from mixgan.analysis import normalize_heatmap, render_score_distributions
from mixgan.augment import (
    MixStrategyConfig,
    MixupParams,
    compose_discriminator_batch,
    make_mixed_samples,
    mix,
    n_mixed_slots,
    sample_cutmix_mask,
    sample_mixup_mask,
    sample_srmix_mask,
    srmix_width_range,
)
from mixgan.checkpoint import load_checkpoint
from mixgan.cli import main
from mixgan.config import resolve_config
from mixgan.data import make_synthetic_dataset
from mixgan.losses import d_loss, g_loss
from mixgan.metrics import GaussianStats, frechet_distance
from mixgan.models import ModelSpec, spectral_normalize
from mixgan.regularize import RegularizerConfig, gradient_penalty
from mixgan.train import TrainConfig, run_training


# 1 ---------------------------------------------------------------------------

def test_criterion_01_mask_properties(criterion):
    with criterion(1, "mask property suite (10^4 masks per strategy, Mixup mean)"):
        rng = np.random.default_rng(2024)
        n, res = 10_000, 64
        lams = np.empty(n)
        for i in range(n):
            m = sample_mixup_mask((res, res), MixupParams(1.0), rng)
            assert np.all(m == m[0, 0]) and 0 <= m[0, 0] <= 1
            lams[i] = m[0, 0]
        assert abs(lams.mean() - 0.5) <= 0.02
        # alpha = 1 is the uniform law
        assert scipy.stats.kstest(lams, "uniform").pvalue > 1e-3

        areas = np.empty(n)
        for i in range(n):
            m, box = sample_cutmix_mask((res, res), rng)
            assert set(np.unique(m)) <= {0.0, 1.0}
            assert box.r_w >= 1 and box.r_h >= 1
            assert 0 <= box.r_x and box.r_x + box.r_w <= res and 0 <= box.r_y and box.r_y + box.r_h <= res
            assert m.sum() == box.r_w * box.r_h
            assert m[box.r_y:box.r_y + box.r_h, box.r_x:box.r_x + box.r_w].all()
            areas[i] = m.mean()
        assert abs(areas.mean() - 0.5) <= 0.03

        lo, hi = srmix_width_range(res)
        for i in range(n):
            m, p = sample_srmix_mask((res, res), rng, resolution=res)
            assert m.min() >= 0 and m.max() <= 1
            assert p.sigma in (-1, 1) and p.axis in ("horizontal", "vertical")
            assert res / 8 <= p.x0 <= 7 * res / 8 and lo <= p.dx <= hi
            line = m[0] if p.axis == "horizontal" else m[:, 0]
            other = m if p.axis == "horizontal" else m.T
            assert np.all(other == other[0])
            steps = np.diff(line) * p.sigma
            assert np.all(steps >= 0)


# 2 ---------------------------------------------------------------------------

def test_criterion_02_mixing_algebra(criterion):
    with criterion(2, "mixing algebra (identity, averaging, fixed point, complement)"):
        g = torch.Generator().manual_seed(0)
        eps = torch.finfo(torch.float64).eps
        for _ in range(50):
            a = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
            b = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
            m = torch.rand(16, 16, generator=g, dtype=torch.float64)
            assert torch.equal(mix(a, b, torch.ones(16, 16, dtype=torch.float64)), a)
            assert torch.equal(mix(a, b, torch.zeros(16, 16, dtype=torch.float64)), b)
            half = mix(a, b, torch.full((16, 16), 0.5, dtype=torch.float64))
            assert torch.allclose(half, (a + b) / 2, rtol=0, atol=4 * eps)
            assert torch.equal(mix(a, a, m), a)
            both = mix(a, b, m) + mix(a, b, 1 - m)
            scale = torch.maximum(a.abs(), b.abs())
            assert torch.all((both - (a + b)).abs() <= 8 * eps * scale)
            out = mix(a, b, m)
            assert torch.all(out >= torch.minimum(a, b) - 4 * eps) and torch.all(out <= torch.maximum(a, b) + 4 * eps)


# 3 ---------------------------------------------------------------------------

def test_criterion_03_batch_composition(criterion):
    with criterion(3, "batch composition (B=64: r=0.25 -> 16, r=0.15 -> 9)"):
        g = torch.Generator().manual_seed(1)
        reals = torch.rand(64, 3, 32, 32, generator=g)
        fakes = -torch.rand(64, 3, 32, 32, generator=g)
        for ratio, expected in [(0.25, 16), (0.15, 9)]:
            assert n_mixed_slots(64, ratio) == expected
            for strategy in ("mixup", "cutmix", "srmix"):
                cfg = MixStrategyConfig(strategy, ratio)
                batch = compose_discriminator_batch(reals, fakes, cfg, np.random.default_rng(5))
                mixed = make_mixed_samples(reals, fakes, cfg, np.random.default_rng(5), count=expected)
                assert batch.shape == fakes.shape
                assert torch.equal(batch[:expected], mixed)
                assert torch.equal(batch[expected:], fakes[expected:])
                # a mixed slot draws on its real partner somewhere
                assert all(not torch.equal(batch[i], fakes[i]) for i in range(expected))


# 4 ---------------------------------------------------------------------------

def _eig_oracle(a, b):
    vals = np.linalg.eigvals(a.cov @ b.cov)
    cross = np.sqrt(np.clip(vals.real, 0, None)).sum()
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * cross)


def test_criterion_04_fid_oracles(criterion):
    with criterion(4, "Frechet distance closed forms (1e-8) and eigen oracle (1e-6)"):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((8, 8))
        s = GaussianStats(rng.standard_normal(8), x @ x.T + 0.1 * np.eye(8))
        assert abs(frechet_distance(s, s)) <= 1e-8
        mu = rng.standard_normal(8)
        assert abs(frechet_distance(GaussianStats(np.zeros(8), s.cov), GaussianStats(mu, s.cov)) - mu @ mu) <= 1e-8
        a = GaussianStats(np.zeros(1), np.array([[2.25]]))
        b = GaussianStats(np.zeros(1), np.array([[0.49]]))
        assert abs(frechet_distance(a, b) - (1.5 - 0.7) ** 2) <= 1e-8
        for _ in range(100):
            p, q = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
            a = GaussianStats(rng.standard_normal(8), p @ p.T + 0.1 * np.eye(8))
            b = GaussianStats(rng.standard_normal(8), q @ q.T + 0.1 * np.eye(8))
            assert abs(frechet_distance(a, b) - _eig_oracle(a, b)) <= 1e-6


# 5 ---------------------------------------------------------------------------

class _Linear(torch.nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = w

    def forward(self, x):
        return x.flatten(1) @ self.w.flatten()


def test_criterion_05_gradient_penalty(criterion):
    with criterion(5, "gradient penalty (linear exact, MLP finite differences 1e-3)"):
        g = torch.Generator().manual_seed(5)
        for _ in range(20):
            w = torch.randn(3, 4, 4, generator=g, dtype=torch.float64) * 0.3
            reals = torch.randn(6, 3, 4, 4, generator=g, dtype=torch.float64)
            fakes = torch.randn(6, 3, 4, 4, generator=g, dtype=torch.float64)
            gp = gradient_penalty(_Linear(w), reals, fakes, generator=g)
            assert abs(gp.item() - (w.norm().item() - 1) ** 2) <= 1e-12

        torch.manual_seed(0)
        mlp = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(12, 8), torch.nn.Tanh(),
                                  torch.nn.Linear(8, 1), torch.nn.Flatten(0)).double()
        reals = torch.randn(4, 3, 2, 2, generator=g, dtype=torch.float64)
        fakes = torch.randn(4, 3, 2, 2, generator=g, dtype=torch.float64)
        eps = torch.rand(4, generator=g, dtype=torch.float64)
        got = gradient_penalty(mlp, reals, fakes, eps=eps).item()

        x_hat = eps.view(4, 1, 1, 1) * reals + (1 - eps.view(4, 1, 1, 1)) * fakes
        h = 1e-6
        grads = torch.zeros_like(x_hat)
        with torch.no_grad():
            for idx in np.ndindex(*x_hat.shape[1:]):
                step = torch.zeros_like(x_hat)
                step[(slice(None), *idx)] = h
                grads[(slice(None), *idx)] = (mlp(x_hat + step) - mlp(x_hat - step)) / (2 * h)
        expected = ((grads.flatten(1).norm(dim=1) - 1) ** 2).mean().item()
        assert abs(got - expected) <= 1e-3 * abs(expected)


# 6 ---------------------------------------------------------------------------

def test_criterion_06_losses(criterion):
    with criterion(6, "hinge/Wasserstein values exact, gradients vs finite differences 1e-4"):
        real = torch.tensor([2.0, 0.5, -1.0], dtype=torch.float64)
        fake = torch.tensor([-2.0, 0.0, 1.0], dtype=torch.float64)
        assert d_loss(real, fake, "hinge").item() == pytest.approx(11 / 6, abs=1e-15)
        assert d_loss(real, fake, "wasserstein").item() == pytest.approx(-5 / 6, abs=1e-15)
        assert g_loss(fake, "hinge").item() == pytest.approx(1 / 3, abs=1e-15)
        assert g_loss(fake, "wasserstein").item() == pytest.approx(1 / 3, abs=1e-15)

        g = torch.Generator().manual_seed(6)
        h = 1e-6
        for kind in ("hinge", "wasserstein"):
            for _ in range(10):
                r = torch.randn(7, generator=g, dtype=torch.float64) * 3
                f = torch.randn(7, generator=g, dtype=torch.float64) * 3
                # stay clear of the hinge kinks
                r = torch.where((r - 1).abs() < 1e-3, r + 0.01, r)
                f = torch.where((f + 1).abs() < 1e-3, f + 0.01, f)
                rr, ff = r.clone().requires_grad_(True), f.clone().requires_grad_(True)
                gr, gf = torch.autograd.grad(d_loss(rr, ff, kind), (rr, ff))
                (gg,) = torch.autograd.grad(g_loss(ff, kind), ff)
                for i in range(7):
                    e = torch.zeros(7, dtype=torch.float64)
                    e[i] = h
                    fd_r = (d_loss(r + e, f, kind) - d_loss(r - e, f, kind)).item() / (2 * h)
                    fd_f = (d_loss(r, f + e, kind) - d_loss(r, f - e, kind)).item() / (2 * h)
                    fd_g = (g_loss(f + e, kind) - g_loss(f - e, kind)).item() / (2 * h)
                    for auto, fd in [(gr[i].item(), fd_r), (gf[i].item(), fd_f), (gg[i].item(), fd_g)]:
                        assert abs(auto - fd) <= 1e-4 * max(abs(fd), 1e-12) or auto == fd == 0


# 7 ---------------------------------------------------------------------------

def test_criterion_07_spectral_norm(criterion):
    with criterion(7, "spectral norm power iteration vs SVD (20 matrices, 1%)"):
        g = torch.Generator().manual_seed(7)
        for i in range(20):
            shape = [(16, 8), (8, 27), (32, 32), (5, 3, 3, 3)][i % 4]
            w = torch.randn(*shape, generator=g, dtype=torch.float64)
            u = torch.randn(shape[0], generator=g, dtype=torch.float64)
            w_sn, _, _, sigma = spectral_normalize(w, u, n_power_iterations=100)
            top = torch.linalg.svdvals(w_sn.reshape(shape[0], -1))[0].item()
            assert abs(top - 1) <= 0.01
            oracle = torch.linalg.svdvals(w.reshape(shape[0], -1))[0].item()
            assert abs(sigma.item() - oracle) <= 0.01 * oracle


# 8 ---------------------------------------------------------------------------

def test_criterion_08_training_loop_structure(criterion, tmp_path):
    with criterion(8, "training loop structure (50 iterations, isolation, fresh z, resume)"):
        spec = ModelSpec("dcgan", 32, z_dim=8, base_channels=4, d_norm=["layer", "spectral"])
        data = make_synthetic_dataset("colored-shapes", 128, 32, seed=0)
        cfg = TrainConfig(batch_size=8, n_crit=2, total_iterations=50, eval_every=25, eval_n_fake=64,
                          mix=MixStrategyConfig("srmix", 0.25),
                          regularizers=RegularizerConfig(gp_enabled=True, gp_every=5, cr_enabled=True))

        def snap(module, full=False):
            items = module.state_dict().items() if full else module.named_parameters()
            return {k: v.detach().clone() for k, v in items}

        def equal(a, b):
            return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)

        events, g_latents, violations = [], [], []
        latents = []
        last = {}

        def hook(ev, state, info):
            if ev == "iteration":
                return
            events.append(ev)
            g_now, d_now = snap(state.generator), snap(state.discriminator, full=True)
            if last:
                if ev == "d_step" and not equal(last["g"], g_now):
                    violations.append(("G changed in a D step", state.iteration))
                if ev == "g_step" and not equal(last["d"], d_now):
                    violations.append(("D changed in a G step", state.iteration))
                if ev == "g_step":
                    g_latents.append(latents[-1])
            last["g"], last["d"] = g_now, d_now

        full = run_training(cfg, data, spec, run_dir=tmp_path / "full",
                            hooks=[lambda ev, st, info: _install(st, latents), hook])

        assert not violations, violations
        n_g = events.count("g_step")
        assert n_g == 50 and events.count("d_step") == 2 * n_g
        assert events[:3] == ["d_step", "d_step", "g_step"]
        assert all(events[3 * i:3 * i + 3] == ["d_step", "d_step", "g_step"] for i in range(n_g))
        assert len(g_latents) == n_g
        flat = torch.stack([z.flatten() for z in g_latents])
        assert len({tuple(row.tolist()) for row in flat}) == len(g_latents)

        part = run_training(cfg, data, spec, run_dir=tmp_path / "part", stop_at=23)
        resumed = run_training(cfg, data, spec, run_dir=tmp_path / "part", resume=part.checkpoints[-1])
        strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_time"} for r in recs]
        assert strip(resumed.metrics) == strip(full.metrics[-27:])
        assert equal(snap(resumed.state.generator, True), snap(full.state.generator, True))
        assert equal(snap(resumed.state.discriminator, True), snap(full.state.discriminator, True))
        a = load_checkpoint(tmp_path / "full" / "checkpoints" / "final.pt")
        b = load_checkpoint(tmp_path / "part" / "checkpoints" / "final.pt")
        assert a["rng"]["numpy"] == b["rng"]["numpy"] and torch.equal(a["rng"]["torch"], b["rng"]["torch"])
        assert a["stream"] == b["stream"] and a["d_steps"] == b["d_steps"] == 100


def _install(state, latents):
    # wrap the generator once so every latent batch it sees is recorded
    g = state.generator
    if getattr(g, "_recording", False):
        return
    forward = g.forward

    def recording(z):
        latents.append(z.detach().clone())
        return forward(z)

    g.forward = recording
    g._recording = True


# 9 ---------------------------------------------------------------------------

MODES = ("none", "mixup", "cutmix", "srmix")
DESK_OVERRIDES = [
    "model.resolution=32", "model.base_channels=16", "model.z_dim=64",
    "train.total_iterations=2000", "train.eval_every=1000", "train.eval_n_fake=2000",
    "train.eval_extractor=toy",
]


def test_criterion_09_desk_training(criterion, tmp_path, capsys):
    data = make_synthetic_dataset("colored-shapes", 2000, 32, seed=7)
    with criterion(9, "desk-scale training: 4 modes finish, toy FID drops >= 30%, histograms"):
        summary = {}
        for mode in MODES:
            cfg = resolve_config(preset="case1", overrides=[*DESK_OVERRIDES, f"train.mix.strategy={mode}"])
            rec = run_training(cfg.train, data, cfg.model, run_dir=tmp_path / mode, experiment=cfg.to_dict())
            assert rec.state.iteration == 2000
            assert all(math.isfinite(m["d_loss"]) and math.isfinite(m["g_loss"]) for m in rec.metrics[1:])
            fid = dict(rec.fid_history)
            drop = 1 - fid[2000] / fid[0]
            summary[mode] = (fid[0], fid[2000], drop)
            with capsys.disabled():
                print(f"\n  {mode:>6}: toy FID {fid[0]:.3f} -> {fid[2000]:.3f} ({100 * drop:.1f}% lower)", flush=True)
            assert drop >= 0.30, (mode, fid)

            rng = np.random.default_rng(0)
            reals = data.images[torch.as_tensor(rng.permutation(len(data))[:512])]
            with torch.no_grad():
                fakes = rec.state.generator.eval()(torch.randn(512, 64, generator=torch.Generator().manual_seed(1)))
            # the vanilla run still gets a mixed group so all three histograms exist
            mix_cfg = MixStrategyConfig(mode if mode != "none" else "srmix", 0.25)
            mixed = make_mixed_samples(reals, fakes, mix_cfg, rng)
            png, csv, stats = render_score_distributions(rec.state.discriminator, reals, fakes, mixed,
                                                         tmp_path / mode / "analysis")
            assert png.stat().st_size > 0 and csv.stat().st_size > 0
            for name, scores in stats.groups().items():
                assert scores.size > 0 and np.all(np.isfinite(scores)) and scores.std() > 0, name
                assert (stats.counts[name] > 0).sum() >= 2, name
        (tmp_path / "summary.json").write_text(json.dumps(summary, indent=2))


# 10 --------------------------------------------------------------------------

def test_criterion_10_analysis_determinism(criterion, tmp_path):
    with criterion(10, "analysis outputs byte-identical across runs; heatmap affine invariance"):
        run = tmp_path / "run"
        small = ["--set", "model.resolution=32", "--set", "model.base_channels=4", "--set", "model.z_dim=8",
                 "--set", "train.batch_size=8", "--set", "train.eval_every=0"]
        assert main(["train", "--preset", "case1", "--mix", "cutmix", "--iterations", "3",
                     "--dataset", "synthetic://colored-shapes?n=64&seed=0", "--output", str(run), *small]) == 0
        ckpt = str(run / "checkpoints" / "final.pt")
        for what in ("histograms", "heatmaps", "grid"):
            outs = []
            for k in range(2):
                out = tmp_path / f"{what}_{k}"
                assert main(["analyze", "--checkpoint", ckpt, "--what", what, "--n-samples", "64",
                             "--seed", "3", "--out", str(out)]) == 0
                outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
            assert outs[0] and outs[0] == outs[1], what

        rng = np.random.default_rng(10)
        for _ in range(100):
            raw = rng.standard_normal((4, 4))
            a, b = rng.uniform(0.01, 100), rng.uniform(-10, 10)
            assert np.allclose(normalize_heatmap(a * raw + b), normalize_heatmap(raw), rtol=0, atol=1e-12)
