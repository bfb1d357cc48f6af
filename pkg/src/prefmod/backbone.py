"""A toy MM-DiT velocity network with per-token AdaLN modulation.

Text tokens and image patch tokens are concatenated and processed by ``blocks``
joint transformer blocks with bidirectional attention. Every token is
modulated from its own conditioning vector, so text token ``i`` in block ``j``
can receive ``y + shared_i + distinct_i^j`` while image tokens keep the plain
``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .config import BackboneConfig
from .numcore import Tensor
from .prompts import EMPTY, PROMPT_LENGTH, VOCAB, Prompt, prompt_ids

N_TXT = PROMPT_LENGTH


@dataclass
class TextEncoding:
    token_embeds: Tensor   # (B, N_txt, d_model)
    pooled: Tensor         # (B, d_pool)

    @property
    def batch(self) -> int:
        return self.token_embeds.shape[0]


@dataclass
class DeltaSet:
    """Per-text-token modulation directions for a batch."""

    shared: Tensor     # (B, N_txt, d_mod)
    distinct: Tensor   # (B, J, N_txt, d_mod)

    @property
    def batch(self) -> int:
        return self.shared.shape[0]

    @classmethod
    def zeros(cls, batch: int, cfg: BackboneConfig) -> "DeltaSet":
        return cls(Tensor(np.zeros((batch, N_TXT, cfg.d_mod))),
                   Tensor(np.zeros((batch, cfg.blocks, N_TXT, cfg.d_mod))))


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    cfg.validate()
    D, Dm, Dp, H = cfg.d_model, cfg.d_mod, cfg.d_pool, cfg.mlp_hidden
    patch_dim = cfg.channels * cfg.patch_size ** 2

    def w(fan_in, fan_out, gain=1.0):
        return rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))

    p = {
        "tok_embed": rng.normal(0.0, 0.5, size=(len(VOCAB), D)),
        "tok_pos": rng.normal(0.0, 0.5, size=(N_TXT, D)),
        "pool_w": w(D, Dp), "pool_b": np.zeros(Dp),
        "mp_w1": w(Dp, Dm), "mp_b1": np.zeros(Dm), "mp_w2": w(Dm, Dm), "mp_b2": np.zeros(Dm),
        "mt_w1": w(Dp, Dm), "mt_b1": np.zeros(Dm), "mt_w2": w(Dm, Dm), "mt_b2": np.zeros(Dm),
        "patch_w": w(patch_dim, D), "patch_b": np.zeros(D),
        "img_pos": rng.normal(0.0, 0.5, size=(cfg.n_image_tokens, D)),
        "final_mod_w": w(Dm, 2 * D, 0.1), "final_mod_b": np.zeros(2 * D),
        "head_w": w(D, patch_dim, 0.1), "head_b": np.zeros(patch_dim),
    }
    for j in range(cfg.blocks):
        p.update({
            f"blocks.{j}.mod_w": w(Dm, 6 * D, 0.1), f"blocks.{j}.mod_b": np.zeros(6 * D),
            f"blocks.{j}.qkv_w": w(D, 3 * D), f"blocks.{j}.qkv_b": np.zeros(3 * D),
            f"blocks.{j}.out_w": w(D, D), f"blocks.{j}.out_b": np.zeros(D),
            f"blocks.{j}.mlp_w1": w(D, H), f"blocks.{j}.mlp_b1": np.zeros(H),
            f"blocks.{j}.mlp_w2": w(H, D), f"blocks.{j}.mlp_b2": np.zeros(D),
        })
    return p


# --------------------------------------------------------------------------
# text and timestep conditioning
# --------------------------------------------------------------------------

def encode_prompt(params, prompts: Sequence[Prompt] | Prompt) -> TextEncoding:
    """Embedding-table lookup plus positional rows; pooled = projection of the token mean."""
    if isinstance(prompts, Prompt):
        prompts = [prompts]
    ids = np.stack([prompt_ids(p) for p in prompts])
    B = len(prompts)
    tok = nc.take(params["tok_embed"], ids) + nc.expand(params["tok_pos"], B)
    pooled = nc.linear(nc.mean(tok, axis=1), params["pool_w"], params["pool_b"])
    return TextEncoding(tok, pooled)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 * t``; shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _mlp2(x, params, prefix):
    h = nc.silu(nc.linear(x, params[prefix + "_w1"], params[prefix + "_b1"]))
    return nc.linear(h, params[prefix + "_w2"], params[prefix + "_b2"])


def check_timesteps(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"timestep outside [0, 1]: {t}")
    return t


def pooled_branch(params, pooled: Tensor) -> Tensor:
    return _mlp2(pooled, params, "mp")


def timestep_branch(params, t, d_pool: int) -> Tensor:
    t = check_timesteps(t)
    return _mlp2(Tensor(timestep_embedding(t, d_pool)), params, "mt")


def base_modulation(params, pooled: Tensor, t) -> Tensor:
    """y = M_p(pooled) + M_t(sinusoid(t)); shape (B, d_mod)."""
    d_pool = params["mt_w1"].shape[0]
    t = check_timesteps(t)
    if len(t) == 1 and pooled.shape[0] > 1:
        t = np.repeat(t, pooled.shape[0])
    return pooled_branch(params, pooled) + timestep_branch(params, t, d_pool)


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------

def patchify(image: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, (H/P)(W/P), C*P*P), row-major over patches."""
    B, C, H, W = image.shape
    if H % patch or W % patch:
        raise nc.ShapeError(f"image {H}x{W} not divisible by patch size {patch}")
    x = nc.reshape(image, (B, C, H // patch, patch, W // patch, patch))
    x = nc.transpose(x, (0, 2, 4, 1, 3, 5))
    return nc.reshape(x, (B, (H // patch) * (W // patch), C * patch * patch))


def unpatchify(tokens: Tensor, patch: int, channels: int, size: int) -> Tensor:
    B, N, F = tokens.shape
    n = size // patch
    if n * n != N or F != channels * patch * patch or size % patch:
        raise nc.ShapeError(f"cannot unpatchify {tokens.shape} into {channels}x{size}x{size}")
    x = nc.reshape(tokens, (B, n, n, channels, patch, patch))
    x = nc.transpose(x, (0, 3, 1, 4, 2, 5))
    return nc.reshape(x, (B, channels, size, size))


# --------------------------------------------------------------------------
# blocks
# --------------------------------------------------------------------------

def modulation_params(params, j: int, y_tok: Tensor) -> Tensor:
    """Per-token (shift, scale, gate) x2 for block ``j``: (..., d_mod) -> (..., 6 d_model)."""
    return nc.linear(nc.silu(y_tok), params[f"blocks.{j}.mod_w"], params[f"blocks.{j}.mod_b"])


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return nc.layer_norm(x) * (scale + 1.0) + shift


def _self_attention(params, j: int, h: Tensor, heads: int) -> Tensor:
    B, N, D = h.shape
    dh = D // heads
    qkv = nc.linear(h, params[f"blocks.{j}.qkv_w"], params[f"blocks.{j}.qkv_b"])
    qkv = nc.transpose(nc.reshape(qkv, (B, N, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (nc.reshape(part, (B, heads, N, dh)) for part in nc.split(qkv, 3, axis=0))
    out = nc.attention(q, k, v)
    out = nc.reshape(nc.transpose(out, (0, 2, 1, 3)), (B, N, D))
    return nc.linear(out, params[f"blocks.{j}.out_w"], params[f"blocks.{j}.out_b"])


def block_forward(params, j: int, x: Tensor, mod: Tensor, heads: int, trace=None) -> Tensor:
    """One joint block given precomputed per-token modulation ``mod`` (B, N, 6D)."""
    sh1, sc1, g1, sh2, sc2, g2 = nc.split(mod, 6, axis=-1)
    h = _modulate(x, sh1, sc1)
    if trace is not None:
        trace.append({"block": j, "shift": sh1, "scale": sc1, "gate": g1, "pre_attention": h})
    x = x + g1 * _self_attention(params, j, h, heads)
    h = _modulate(x, sh2, sc2)
    h = nc.linear(nc.silu(nc.linear(h, params[f"blocks.{j}.mlp_w1"], params[f"blocks.{j}.mlp_b1"])),
                  params[f"blocks.{j}.mlp_w2"], params[f"blocks.{j}.mlp_b2"])
    return x + g2 * h


def apply_modulation(params, j: int, tokens: Tensor, per_token_y: Tensor, heads: int,
                     trace=None) -> Tensor:
    """Run block ``j`` with one modulation vector per token: (B, N, D), (B, N, d_mod)."""
    if per_token_y.shape[:2] != tokens.shape[:2]:
        raise nc.ShapeError(f"need one modulation vector per token: tokens {tokens.shape}, "
                            f"modulation {per_token_y.shape}")
    return block_forward(params, j, tokens, modulation_params(params, j, per_token_y), heads, trace)


# --------------------------------------------------------------------------
# velocity field
# --------------------------------------------------------------------------

def velocity(params, z_t, text: TextEncoding, t, cfg: BackboneConfig,
             deltas: DeltaSet | None = None, trace: list | None = None) -> Tensor:
    """Predicted velocity v(z_t, text, t), same shape as ``z_t`` (B, C, H, W)."""
    z_t = nc.as_tensor(z_t)
    B = z_t.shape[0]
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if z_t.ndim != 4 or z_t.shape[1:] != expected:
        raise nc.ShapeError(f"z_t has shape {z_t.shape}, expected (B, {expected})")
    if text.batch != B:
        raise nc.ShapeError(f"text batch {text.batch} != image batch {B}")
    if deltas is not None:
        want_s = (B, N_TXT, cfg.d_mod)
        want_d = (B, cfg.blocks, N_TXT, cfg.d_mod)
        if deltas.shared.shape != want_s or deltas.distinct.shape != want_d:
            raise nc.ShapeError(f"deltas {deltas.shared.shape}/{deltas.distinct.shape} do not "
                                f"match {want_s}/{want_d}")
    t = check_timesteps(t)
    if len(t) == 1 and B > 1:
        t = np.repeat(t, B)
    n_img = cfg.n_image_tokens
    y = base_modulation(params, text.pooled, t)                       # (B, Dm)
    y_txt = nc.repeat(nc.reshape(y, (B, 1, cfg.d_mod)), N_TXT, axis=1)  # (B, N_txt, Dm)

    x_img = nc.linear(patchify(z_t, cfg.patch_size), params["patch_w"], params["patch_b"])
    x_img = x_img + nc.expand(params["img_pos"], B)
    x = nc.concat([text.token_embeds, x_img], axis=1)

    distinct = None
    if deltas is not None:
        distinct = nc.split(deltas.distinct, cfg.blocks, axis=1)
    for j in range(cfg.blocks):
        if deltas is not None:
            y_j = y_txt + deltas.shared + nc.reshape(distinct[j], (B, N_TXT, cfg.d_mod))
        else:
            y_j = y_txt
        mod_txt = modulation_params(params, j, y_j)
        if deltas is not None and cfg.modulate_image_tokens:
            # ablation knob: image tokens also see the token-mean preference direction
            y_img = nc.repeat(nc.reshape(nc.mean(y_j, axis=1), (B, 1, cfg.d_mod)), n_img, axis=1)
            mod_img = modulation_params(params, j, y_img)
        else:
            mod_img = nc.repeat(nc.reshape(modulation_params(params, j, y), (B, 1, 6 * cfg.d_model)),
                                n_img, axis=1)
        mod = nc.concat([mod_txt, mod_img], axis=1)
        x = block_forward(params, j, x, mod, cfg.heads, trace)

    x_img = nc.split(x, [N_TXT, n_img], axis=1)[1]
    fmod = nc.linear(nc.silu(y), params["final_mod_w"], params["final_mod_b"])
    fmod = nc.repeat(nc.reshape(fmod, (B, 1, 2 * cfg.d_model)), n_img, axis=1)
    shift, scl = nc.split(fmod, 2, axis=-1)
    out = nc.linear(_modulate(x_img, shift, scl), params["head_w"], params["head_b"])
    return unpatchify(out, cfg.patch_size, cfg.channels, cfg.image_size)


def empty_encoding(params, batch: int) -> TextEncoding:
    return encode_prompt(params, [EMPTY] * batch)
