"""Command line entry point: ``train``, ``eval-fid``, ``analyze``, ``mask-debug``.

Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 numeric, 6 capability.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout
from PIL import Image

from . import analysis
from .augment import STRATEGIES, MixStrategyConfig, make_mixed_samples, sample_mask
from .checkpoint import load_models
from .config import PRESETS, resolve_config, save_config
from .data import LatentPrior, open_dataset, sample_latent
from .errors import ConfigError, MixGANError
from .metrics import DEFAULT_N_FAKE, compute_fid, get_extractor
from .train import run_training

log = logging.getLogger("mixgan")

ANALYSES = ("histograms", "heatmaps", "grid")


def run_dir_of(checkpoint: Path) -> Path:
    checkpoint = Path(checkpoint)
    parent = checkpoint.parent
    return parent.parent if parent.name == "checkpoints" else parent


def _fake_sampler(g, z_dim, seed):
    gen = torch.Generator().manual_seed(seed)
    prior = LatentPrior(z_dim)

    @torch.no_grad()
    def sample(n):
        return g(sample_latent(prior, n, gen))

    return sample


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.mix is not None:
        overrides.append(f"train.mix.strategy={args.mix}")
    if args.dataset is not None:
        overrides.append(f"dataset={args.dataset}")
    if args.iterations is not None:
        overrides.append(f"train.total_iterations={args.iterations}")
    if args.output is not None:
        overrides.append(f"output_dir={args.output}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = resolve_config(args.config, args.preset, overrides)

    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"run directory {run_dir} is in use by another process") from None
    try:
        config_path = save_config(cfg, run_dir / "config.yaml")
        dataset = open_dataset(cfg.dataset, cfg.model.resolution)
        record = run_training(cfg.train, dataset, cfg.model, run_dir=run_dir,
                              resume=args.resume, experiment=cfg.to_dict())
        record.config_path = config_path
        summary = {
            "config": str(config_path),
            "metrics": str(record.metrics_path),
            "checkpoints": [str(p) for p in record.checkpoints],
            "fid_history": [list(x) for x in record.fid_history],
            "artifacts": [str(p) for p in record.artifacts],
        }
        (run_dir / "record.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    finally:
        lock.release()
    print(f"finished {record.state.iteration} iterations; run directory {run_dir}")
    if record.fid_history:
        print(f"final FID ({cfg.train.eval_extractor}): {record.fid_history[-1][1]:.4f}")
    return 0


def cmd_eval_fid(args) -> int:
    spec, g, _, payload = load_models(args.checkpoint)
    uri = args.dataset or payload["experiment"]["dataset"]
    dataset = open_dataset(uri, spec.resolution)
    extractor = get_extractor(args.extractor, spec.resolution, spec.channels)
    fid = compute_fid(extractor, dataset.images, _fake_sampler(g, spec.z_dim, args.seed), n_fake=args.n_fake)
    report = {
        "checkpoint": str(args.checkpoint), "iteration": payload["iteration"], "dataset": uri,
        "extractor": args.extractor, "n_fake": args.n_fake, "n_real": len(dataset), "seed": args.seed,
        "fid": fid,
    }
    out = Path(args.out) if args.out else run_dir_of(args.checkpoint) / f"fid_{Path(args.checkpoint).stem}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"FID {fid:.6f}")
    return 0


def cmd_analyze(args) -> int:
    spec, g, d, payload = load_models(args.checkpoint)
    exp = payload["experiment"]
    out_dir = Path(args.out) if args.out else run_dir_of(args.checkpoint) / "analysis"
    dataset = open_dataset(args.dataset or exp["dataset"], spec.resolution)
    rng = np.random.default_rng(args.seed)
    sample_fakes = _fake_sampler(g, spec.z_dim, args.seed)

    if args.what == "histograms":
        n = min(args.n_samples, len(dataset))
        reals = dataset.images[torch.as_tensor(rng.permutation(len(dataset))[:n])]
        fakes = sample_fakes(n)
        mix_cfg = dict(exp["train"]["mix"])
        if args.mix is not None:
            mix_cfg["strategy"] = args.mix
        mix = MixStrategyConfig(**mix_cfg)
        mixed = None if mix.strategy == "none" else make_mixed_samples(reals, fakes, mix, rng)
        paths = analysis.render_score_distributions(d, reals, fakes, mixed, out_dir)[:2]
    elif args.what == "heatmaps":
        reals = dataset.images[torch.as_tensor(rng.permutation(len(dataset))[:args.n_images])]
        fakes = sample_fakes(len(reals))
        mix_cfg = dict(exp["train"]["mix"])
        if args.mix is not None:
            mix_cfg["strategy"] = args.mix
        mix = MixStrategyConfig(**mix_cfg)
        images = make_mixed_samples(reals, fakes, mix, rng) if mix.strategy != "none" else reals
        paths = [analysis.render_heatmap(d, img, out_dir, name=f"heatmap_{i:03d}").path
                 for i, img in enumerate(images)]
    else:
        rows, cols = args.rows, args.cols
        paths = [analysis.render_image_grid(sample_fakes(rows * cols), rows, cols, out_dir / "grid_fake.png")]
    for p in paths:
        print(p)
    return 0


def cmd_mask_debug(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.n):
        mask = sample_mask(args.strategy, (args.resolution, args.resolution), rng, args.alpha)
        path = out_dir / f"{args.strategy}_{i:03d}.png"
        Image.fromarray(np.rint(mask * 255).astype(np.uint8), "L").save(path)
        print(path)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run mixed-sample GAN training")
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--mix", choices=STRATEGIES, help="mask strategy (none = vanilla)")
    p.add_argument("--dataset", help="image folder or synthetic://<kind>?n=..&seed=..")
    p.add_argument("--iterations", type=int, help="generator iterations")
    p.add_argument("--output", help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-fid", help="FID of a checkpoint's generator")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", help="reference images (defaults to the training dataset)")
    p.add_argument("--n-fake", type=int, default=DEFAULT_N_FAKE)
    p.add_argument("--extractor", default="toy", help="'toy' or 'inception'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="report file")
    p.set_defaults(func=cmd_eval_fid)

    p = sub.add_parser("analyze", help="score histograms, response heatmaps, image grids")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--what", choices=ANALYSES, required=True)
    p.add_argument("--dataset")
    p.add_argument("--mix", choices=STRATEGIES, help="override the mask strategy")
    p.add_argument("--n-samples", type=int, default=1024)
    p.add_argument("--n-images", type=int, default=4)
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("mask-debug", help="write sampled masks as grayscale images")
    p.add_argument("--strategy", choices=STRATEGIES[1:], required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("masks"))
    p.set_defaults(func=cmd_mask_debug)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MixGANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


__all__ = ["main", "build_parser"]
