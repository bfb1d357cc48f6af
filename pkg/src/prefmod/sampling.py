"""Explicit Euler integration of the learned velocity field from noise (t=1) to data (t=0)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .adapters import UserEmbedding, compute_deltas
from .backbone import DeltaSet, empty_encoding, encode_prompt, velocity
from .config import AdapterConfig, BackboneConfig, SamplerConfig
from .numcore import NonFiniteError, Tensor
from .prompts import Prompt
from .synthdata import derive_seed, write_raw

# cells integrated together; results do not depend on it
CHUNK = 64


def euler(field: Callable[[np.ndarray, float], np.ndarray], z1: np.ndarray, steps: int) -> np.ndarray:
    """z <- z - dt * v(z, t) on the uniform grid t = 1, 1 - dt, ..., dt. No clamping."""
    if steps < 1:
        raise ValueError("sampler needs at least one step")
    z = np.array(z1, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        v = np.asarray(field(z, t))
        if v.shape != z.shape:
            raise nc.ShapeError(f"velocity {v.shape} does not match state {z.shape}")
        z = z - dt * v
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite sampler state after step {k + 1}")
    return z


def initial_noise(seed: int, bcfg: BackboneConfig) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((bcfg.channels, bcfg.image_size, bcfg.image_size))


def cell_deltas(adapters, acfg: AdapterConfig, bcfg: BackboneConfig, backbone,
                prompts: Sequence[Prompt], embeddings: Sequence[Tensor]) -> DeltaSet:
    """Deltas for each (embedding, prompt) pair, computed once before integration."""
    for e in embeddings:
        if e.shape != (acfg.tokens, acfg.d_user):
            raise nc.ShapeError(f"user embedding {e.shape} does not match "
                                f"({acfg.tokens}, {acfg.d_user})")
    n = len(prompts)
    text = encode_prompt(backbone, list(prompts)) if acfg.prompt_modulation else empty_encoding(backbone, n)
    table = Tensor(np.stack([e.data for e in embeddings]))
    return compute_deltas(adapters, table, text, acfg, bcfg)


def sample_images(backbone, bcfg: BackboneConfig, prompts: Sequence[Prompt], seeds: Sequence[int],
                  steps: int, *, adapters=None, acfg: AdapterConfig | None = None,
                  embeddings: Sequence[Tensor | UserEmbedding | None] | None = None,
                  delta_scale: float = 1.0) -> np.ndarray:
    """One image per (prompt, seed[, embedding]) cell, (N, C, H, W), clamped to [-1, 1].

    Cells with embedding ``None`` are generated unconditionally.
    """
    if len(prompts) != len(seeds):
        raise ValueError("need one seed per prompt")
    n = len(prompts)
    embs = [None] * n if embeddings is None else [getattr(e, "matrix", e) for e in embeddings]
    if len(embs) != n:
        raise ValueError("need one embedding (or None) per prompt")
    if any(e is not None for e in embs) and (adapters is None or acfg is None):
        raise ValueError("conditioned sampling needs adapters and their config")
    P = nc.constants(backbone)
    A = None if adapters is None else nc.constants(adapters)
    out = np.empty((n, bcfg.channels, bcfg.image_size, bcfg.image_size))
    with nc.no_grad():
        for lo in range(0, n, CHUNK):
            hi = min(n, lo + CHUNK)
            for cond in (False, True):
                idx = [i for i in range(lo, hi) if (embs[i] is not None) == cond]
                if not idx:
                    continue
                ps = [prompts[i] for i in idx]
                text = encode_prompt(P, ps)
                deltas = None
                if cond:
                    deltas = cell_deltas(A, acfg, bcfg, P, ps, [embs[i] for i in idx])
                    if delta_scale != 1.0:
                        deltas = DeltaSet(nc.scale(deltas.shared, delta_scale),
                                          nc.scale(deltas.distinct, delta_scale))
                z1 = np.stack([initial_noise(seeds[i], bcfg) for i in idx])

                def field(z, t, text=text, deltas=deltas):
                    return velocity(P, z, text, np.full(len(z), t), bcfg, deltas).data

                out[idx] = np.clip(euler(field, z1, steps), -1.0, 1.0)
    return out


def sample(prompt: Prompt, backbone, bcfg: BackboneConfig, config: SamplerConfig, *,
           adapters=None, acfg: AdapterConfig | None = None,
           user_embedding: Tensor | UserEmbedding | None = None) -> np.ndarray:
    """A single (C, H, W) image from ``config.seed``."""
    return sample_images(backbone, bcfg, [prompt], [config.seed], config.steps, adapters=adapters,
                         acfg=acfg, embeddings=[user_embedding])[0]


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------

def cell_seed(master_seed: int, prompt_index: int, user_index: int) -> int:
    return derive_seed(master_seed, "cell", prompt_index, user_index)


@dataclass
class Grid:
    images: np.ndarray        # (U, P, C, H, W)
    manifest: dict


def sample_batch(prompts: Sequence[Prompt], users: Sequence[UserEmbedding | None], backbone,
                 bcfg: BackboneConfig, config: SamplerConfig, *, adapters=None,
                 acfg: AdapterConfig | None = None) -> Grid:
    """Every user x prompt cell with a seed derived from (master seed, prompt, user)."""
    if not prompts or not users:
        raise ValueError("sample_batch needs at least one prompt and one user")
    cells, ps, seeds, embs = [], [], [], []
    for ui, u in enumerate(users):
        for pi, p in enumerate(prompts):
            s = cell_seed(config.seed, pi, ui)
            cells.append({"user_index": ui, "user_id": None if u is None else u.user_id,
                          "prompt_index": pi, "prompt": str(p), "seed": s})
            ps.append(p)
            seeds.append(s)
            embs.append(u)
    imgs = sample_images(backbone, bcfg, ps, seeds, config.steps, adapters=adapters, acfg=acfg,
                         embeddings=embs)
    U, Pn = len(users), len(prompts)
    manifest = {"users": U, "prompts": Pn, "steps": config.steps, "master_seed": config.seed,
                "scheme": "euler", "cells": cells}
    return Grid(imgs.reshape((U, Pn) + imgs.shape[1:]), manifest)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, C) bytes."""
    x = np.clip((np.asarray(image) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(x).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6 pixmap of a (3, H, W) image."""
    rgb = to_uint8(image)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def tile(images: np.ndarray, pad: int = 1) -> np.ndarray:
    """(U, P, C, H, W) -> one (C, U*(H+pad)-pad, P*(W+pad)-pad) canvas on a white background."""
    U, Pn, C, H, W = images.shape
    canvas = np.ones((C, U * (H + pad) - pad, Pn * (W + pad) - pad))
    for u in range(U):
        for p in range(Pn):
            canvas[:, u * (H + pad):u * (H + pad) + H, p * (W + pad):p * (W + pad) + W] = images[u, p]
    return canvas


def export_grid(grid: Grid, directory: str | Path) -> None:
    """``grid.ppm``, ``grid.f64`` (bit-exact) and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "grid.ppm", tile(grid.images))
    write_raw(d / "grid.f64", grid.images)
    (d / "manifest.json").write_text(json.dumps(grid.manifest, indent=2, sort_keys=True) + "\n")
