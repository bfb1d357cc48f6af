"""Preference adapters, the user-embedding bank, and linear-combination users.

Each adapter is a stack of cross-attention blocks. Text-token states are the
queries and the ``M`` rows of a user embedding are the keys and values, so the
output is one modulation direction per text token. The block-shared adapter
emits ``d_mod`` values per token. The block-distinct adapter emits
``blocks * d_mod`` values per token, which are reshaped to one direction per
backbone block. Both output heads start at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .backbone import N_TXT, DeltaSet, TextEncoding
from .config import AdapterConfig, BackboneConfig
from .numcore import Tensor

ADAPTERS = ("shared", "distinct")


@dataclass
class UserEmbedding:
    user_id: int
    matrix: Tensor   # (M, D_u)


@dataclass
class EmbeddingBank:
    """Stacked embeddings of the training users; row k belongs to ``user_ids[k]``."""

    user_ids: list[int]
    table: Tensor    # (U, M, D_u)

    def __post_init__(self):
        if len(set(self.user_ids)) != len(self.user_ids):
            raise ValueError("duplicate user ids in embedding bank")
        if self.table.ndim != 3 or self.table.shape[0] != len(self.user_ids):
            raise nc.ShapeError(f"bank table {self.table.shape} does not match "
                                f"{len(self.user_ids)} users")

    def __len__(self) -> int:
        return len(self.user_ids)

    def index(self, user_id: int) -> int:
        return self.user_ids.index(user_id)

    def __getitem__(self, k: int) -> UserEmbedding:
        return UserEmbedding(self.user_ids[k], Tensor._wrap(self.table.data[k]))

    @classmethod
    def init(cls, user_ids: Sequence[int], cfg: AdapterConfig,
             rng: np.random.Generator) -> "EmbeddingBank":
        table = rng.normal(0.0, cfg.init_std, size=(len(user_ids), cfg.tokens, cfg.d_user))
        return cls(list(user_ids), Tensor(table, requires_grad=True))


def init_user_embedding(cfg: AdapterConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, cfg.init_std, size=(cfg.tokens, cfg.d_user))


def init_adapter(cfg: AdapterConfig, d_model: int, out_dim: int,
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    D, Du, H = d_model, cfg.d_user, cfg.mlp_hidden

    def w(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    p: dict[str, np.ndarray] = {}
    for b in range(cfg.blocks):
        p.update({
            f"{b}.ln_q_g": np.ones(D), f"{b}.ln_q_b": np.zeros(D),
            f"{b}.wq": w(D, D), f"{b}.wk": w(Du, D), f"{b}.wv": w(Du, D),
            f"{b}.wo": w(D, D), f"{b}.bo": np.zeros(D),
            f"{b}.ln_f_g": np.ones(D), f"{b}.ln_f_b": np.zeros(D),
            f"{b}.ff_w1": w(D, H), f"{b}.ff_b1": np.zeros(H),
            f"{b}.ff_w2": w(H, D), f"{b}.ff_b2": np.zeros(D),
        })
    p.update({
        "head_ln_g": np.ones(D), "head_ln_b": np.zeros(D),
        "head_w": np.zeros((D, out_dim)), "head_b": np.zeros(out_dim),
    })
    return p


def init_adapters(cfg: AdapterConfig, bcfg: BackboneConfig,
                  rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Both adapters in one flat dict, keys prefixed ``shared.`` and ``distinct.``."""
    out = {}
    for name, dim in (("shared", bcfg.d_mod), ("distinct", bcfg.blocks * bcfg.d_mod)):
        for k, v in init_adapter(cfg, bcfg.d_model, dim, rng).items():
            out[f"{name}.{k}"] = v
    return out


def adapter_forward(params, prefix: str, e_u: Tensor, text_tokens: Tensor,
                    cfg: AdapterConfig) -> Tensor:
    """Cross-attention stack: (B, M, D_u) keys/values, (B, N_txt, D) queries -> (B, N_txt, out)."""
    if e_u.ndim != 3 or text_tokens.ndim != 3 or e_u.shape[0] != text_tokens.shape[0]:
        raise nc.ShapeError(f"adapter inputs e_u {e_u.shape} and text {text_tokens.shape} "
                            "must be batched alike")
    if e_u.shape[-1] != params[f"{prefix}.0.wk"].shape[0]:
        raise nc.ShapeError(f"user embedding width {e_u.shape[-1]} != "
                            f"{params[f'{prefix}.0.wk'].shape[0]}")
    B, N, D = text_tokens.shape
    M = e_u.shape[1]
    heads = cfg.heads
    dh = D // heads
    h = text_tokens
    for b in range(cfg.blocks):
        P = lambda name: params[f"{prefix}.{b}.{name}"]  # noqa: E731
        q = nc.linear(nc.layer_norm(h, P("ln_q_g"), P("ln_q_b")), P("wq"))
        k = nc.linear(e_u, P("wk"))
        v = nc.linear(e_u, P("wv"))
        q = nc.transpose(nc.reshape(q, (B, N, heads, dh)), (0, 2, 1, 3))
        k = nc.transpose(nc.reshape(k, (B, M, heads, dh)), (0, 2, 1, 3))
        v = nc.transpose(nc.reshape(v, (B, M, heads, dh)), (0, 2, 1, 3))
        a = nc.reshape(nc.transpose(nc.attention(q, k, v), (0, 2, 1, 3)), (B, N, D))
        h = h + nc.linear(a, P("wo"), P("bo"))
        f = nc.layer_norm(h, P("ln_f_g"), P("ln_f_b"))
        f = nc.linear(nc.silu(nc.linear(f, P("ff_w1"), P("ff_b1"))), P("ff_w2"), P("ff_b2"))
        h = h + f
    h = nc.layer_norm(h, params[f"{prefix}.head_ln_g"], params[f"{prefix}.head_ln_b"])
    out = nc.linear(h, params[f"{prefix}.head_w"], params[f"{prefix}.head_b"])
    if cfg.delta_bound is None:
        return out
    return nc.scale(nc.tanh(nc.scale(out, 1.0 / cfg.delta_bound)), cfg.delta_bound)


def shared_delta(params, e_u: Tensor, text: TextEncoding, cfg: AdapterConfig) -> Tensor:
    """(B, N_txt, d_mod), identical for every backbone block."""
    return adapter_forward(params, "shared", e_u, text.token_embeds, cfg)


def distinct_delta(params, e_u: Tensor, text: TextEncoding, cfg: AdapterConfig,
                   blocks: int) -> Tensor:
    """(B, J, N_txt, d_mod): the expanded head reshaped to one direction per block."""
    out = adapter_forward(params, "distinct", e_u, text.token_embeds, cfg)
    B, N, F = out.shape
    if F % blocks:
        raise nc.ShapeError(f"distinct head width {F} not divisible by {blocks} blocks")
    return nc.transpose(nc.reshape(out, (B, N, blocks, F // blocks)), (0, 2, 1, 3))


def compute_deltas(params, e_u: Tensor, text: TextEncoding, cfg: AdapterConfig,
                   bcfg: BackboneConfig) -> DeltaSet:
    """Both adapters, honouring the ``use_shared`` / ``use_distinct`` ablation switches."""
    B = e_u.shape[0]
    if cfg.use_shared:
        shared = shared_delta(params, e_u, text, cfg)
    else:
        shared = Tensor(np.zeros((B, N_TXT, bcfg.d_mod)))
    if cfg.use_distinct:
        distinct = distinct_delta(params, e_u, text, cfg, bcfg.blocks)
    else:
        distinct = Tensor(np.zeros((B, bcfg.blocks, N_TXT, bcfg.d_mod)))
    return DeltaSet(shared, distinct)


def compose(y: Tensor, deltas: DeltaSet, i: int, j: int) -> Tensor:
    """y_i^j = y + shared_i + distinct_i^j for a batch: (B, d_mod)."""
    B, J, N, Dm = deltas.distinct.shape
    if not 0 <= i < N:
        raise IndexError(f"token index {i} out of range [0, {N})")
    if not 0 <= j < J:
        raise IndexError(f"block index {j} out of range [0, {J})")
    shared_i = nc.reshape(nc.split(deltas.shared, N, axis=1)[i], (B, Dm))
    distinct_block = nc.split(deltas.distinct, J, axis=1)[j]
    distinct_ij = nc.reshape(nc.split(distinct_block, N, axis=2)[i], (B, Dm))
    return y + shared_i + distinct_ij


def combine(bank: Tensor | EmbeddingBank, alpha: Tensor) -> Tensor:
    """sum_k alpha_k * bank_k, entrywise: (U, M, D_u), (U,) -> (M, D_u)."""
    table = bank.table if isinstance(bank, EmbeddingBank) else bank
    U = table.shape[0]
    if alpha.shape != (U,):
        raise nc.ShapeError(f"need {U} coefficients, got shape {alpha.shape}")
    flat = nc.reshape(table, (U, table.size // U))
    out = nc.matmul(nc.reshape(alpha, (1, U)), flat)
    return nc.reshape(out, table.shape[1:])


def initial_alpha(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)
