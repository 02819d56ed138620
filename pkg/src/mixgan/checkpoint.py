"""Versioned checkpoint container.

A checkpoint is a ``torch.save`` dict::

    format          "mixgan-checkpoint"
    version         1
    model_spec      ModelSpec as a plain dict
    experiment      resolved experiment config (plain dict)
    iteration, d_steps, g_steps
    generator, discriminator      module state dicts (incl. BN stats, SN vectors)
    opt_g, opt_d    Adam moments {"step", "m", "v"}
    rng             {"numpy": bit-generator state, "torch": generator state}
    stream          {"epoch", "cursor"} position in the shuffled dataset
    fid_history     [[iteration, fid], ...]

Files are written to a temporary name and renamed into place.
"""
from __future__ import annotations

import os
from pathlib import Path

import torch

from .errors import ConfigError, DataError

FORMAT = "mixgan-checkpoint"
VERSION = 1


def save_checkpoint(path, state, spec, experiment: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "model_spec": spec.to_dict(),
        "experiment": experiment,
        "iteration": state.iteration,
        "d_steps": state.d_steps,
        "g_steps": state.g_steps,
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": {"numpy": state.rng.bit_generator.state, "torch": state.torch_gen.get_state()},
        "stream": state.stream.state_dict() if state.stream is not None else None,
        "fid_history": [list(x) for x in state.fid_history],
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ConfigError(f"{path} is not a mixgan checkpoint")
    if payload.get("version") != VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')} (expected {VERSION})")
    return payload


def restore_state(state, payload: dict):
    """Load a checkpoint payload into a freshly initialized :class:`TrainState`."""
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.rng.bit_generator.state = payload["rng"]["numpy"]
    state.torch_gen.set_state(payload["rng"]["torch"])
    if state.stream is not None and payload["stream"] is not None:
        state.stream.load_state_dict(payload["stream"])
    state.iteration = int(payload["iteration"])
    state.d_steps = int(payload["d_steps"])
    state.g_steps = int(payload["g_steps"])
    state.fid_history[:] = [tuple(x) for x in payload["fid_history"]]
    return state


def load_models(path):
    """``(spec, generator, discriminator, payload)`` from a checkpoint, in eval mode."""
    from .models import ModelSpec, build_discriminator, build_generator

    payload = load_checkpoint(path)
    spec = ModelSpec(**payload["model_spec"])
    g = build_generator(spec)
    d = build_discriminator(spec)
    g.load_state_dict(payload["generator"])
    d.load_state_dict(payload["discriminator"])
    return spec, g.eval(), d.eval(), payload
