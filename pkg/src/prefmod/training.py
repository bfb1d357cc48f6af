"""Stage 0 backbone pretraining, stage 1 adapter + bank training, stage 2 new-user fitting.

Every random draw in a training step comes from a generator keyed by
``(experiment seed, stage, stage seed, step)``, and the batch order is a pure
function of the same seeds. A run interrupted after any step and resumed from
its checkpoint therefore replays the remaining steps bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from . import numcore as nc
from .adapters import EmbeddingBank, UserEmbedding, combine, compute_deltas, init_adapters, initial_alpha
from .backbone import DeltaSet, empty_encoding, encode_prompt, init_params, velocity
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, ExperimentConfig, StageConfig
from .losses import LossWeights, dispersion_loss, flatten_deltas, flow_loss, interpolate, total_loss
from .numcore import NonFiniteError, Tensor
from .synthdata import Dataset, Sample


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite value; carries the last finite checkpoint."""

    def __init__(self, message: str, last_checkpoint: Checkpoint | None, step: int):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.step = step


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

@dataclass
class Batch:
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def user_ids(self) -> list:
        return [s.user_id for s in self.samples]

    def distinct_users(self) -> list:
        """User ids in first-appearance order."""
        return list(dict.fromkeys(self.user_ids))


def _chunk_sizes(n: int, batch_size: int, require_distinct: bool) -> list[int]:
    sizes = [batch_size] * (n // batch_size)
    if n % batch_size:
        sizes.append(n % batch_size)
    if require_distinct and len(sizes) > 1 and sizes[-1] == 1:
        sizes.pop()
        sizes[-1] += 1
    return sizes


def _repair(chunks: list[list[int]], users: Sequence) -> None:
    """Swap items between chunks until every chunk holds two user ids."""
    for ci, chunk in enumerate(chunks):
        if len({users[i] for i in chunk}) >= 2:
            continue
        mine = users[chunk[0]]
        done = False
        for cj, other in enumerate(chunks):
            if cj == ci:
                continue
            for pos, item in enumerate(other):
                if users[item] == mine:
                    continue
                rest = other[:pos] + other[pos + 1:] + [chunk[-1]]
                if len({users[i] for i in rest}) >= 2:
                    other[pos], chunk[-1] = chunk[-1], item
                    done = True
                    break
            if done:
                break
        if not done:
            raise ConfigError("cannot build batches with two distinct users from this data")


def epoch_batches(samples: Sequence[Sample], batch_size: int, require_distinct_users: bool,
                  seed: int, epoch: int) -> list[Batch]:
    """One shuffled pass over ``samples``; each sample appears exactly once."""
    n = len(samples)
    if n == 0:
        raise ConfigError("no samples to batch")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    users = [s.user_id for s in samples]
    if require_distinct_users:
        if len(set(users)) < 2:
            raise ConfigError("dispersion loss needs at least two distinct users in the data")
        if batch_size < 2:
            raise ConfigError("batch_size must be at least 2 when batches need two users")
    rng = np.random.default_rng([seed, epoch])
    order = [int(i) for i in rng.permutation(n)]
    chunks, lo = [], 0
    for size in _chunk_sizes(n, batch_size, require_distinct_users):
        chunks.append(order[lo:lo + size])
        lo += size
    if require_distinct_users:
        _repair(chunks, users)
    return [Batch([samples[i] for i in c]) for c in chunks]


def make_batches(samples: Sequence[Sample], batch_size: int, require_distinct_users: bool,
                 seed: int) -> Iterator[Batch]:
    """Endless stream of batches, epoch after epoch."""
    epoch = 0
    while True:
        yield from epoch_batches(samples, batch_size, require_distinct_users, seed, epoch)
        epoch += 1


class _BatchSchedule:
    """Random access to the batch stream by step index."""

    def __init__(self, samples, batch_size, require_distinct, seed):
        self.args = (list(samples), batch_size, require_distinct, seed)
        self.per_epoch = len(_chunk_sizes(len(samples), batch_size, require_distinct))
        self._epoch = -1
        self._batches: list[Batch] = []

    def __call__(self, step: int) -> Batch:
        epoch, pos = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            samples, bs, req, seed = self.args
            self._batches = epoch_batches(samples, bs, req, seed, epoch)
            self._epoch = epoch
        return self._batches[pos]


# --------------------------------------------------------------------------
# shared step plumbing
# --------------------------------------------------------------------------

def _stage_seed(cfg: ExperimentConfig, st: StageConfig) -> list[int]:
    return [cfg.seed, st.stage, st.seed]


def step_rng(cfg: ExperimentConfig, st: StageConfig, step: int) -> np.random.Generator:
    return np.random.default_rng(_stage_seed(cfg, st) + [step, 1])


def _noise_and_time(rng: np.random.Generator, z0: np.ndarray):
    z1 = rng.standard_normal(z0.shape)
    t = rng.uniform(0.0, 1.0, size=z0.shape[0])
    return z1, t


def _images(batch: Batch) -> np.ndarray:
    return np.stack([s.image for s in batch.samples])


def _prompts(batch: Batch) -> list:
    return [s.prompt for s in batch.samples]


def param_digest(arrays: dict[str, np.ndarray]) -> str:
    """Hash of a parameter group, for frozen-weight checks."""
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    return h.hexdigest()


def _check_resume(resume: Checkpoint | None, cfg: ExperimentConfig, stage: int) -> None:
    if resume is None:
        return
    if resume.fingerprint != cfg.fingerprint():
        raise CheckpointError("resume checkpoint was written under a different config")
    if resume.meta.get("stage") != stage:
        raise CheckpointError(f"resume checkpoint is from stage {resume.meta.get('stage')}, "
                              f"not stage {stage}")


Logger = Callable[[dict[str, Any]], None]


# --------------------------------------------------------------------------
# stage 0
# --------------------------------------------------------------------------

def _stage0_samples(dataset: Dataset) -> list[Sample]:
    return list(dataset.prior_samples) or list(dataset.samples)


def pretrain_backbone(dataset: Dataset, cfg: ExperimentConfig, *, resume: Checkpoint | None = None,
                      stop_at: int | None = None, log: Logger | None = None) -> Checkpoint:
    """Flow-matching pretraining of the backbone and prompt encoder, no user conditioning."""
    st = cfg.stage0
    samples = _stage0_samples(dataset)
    if not samples:
        raise ConfigError("stage 0 needs a nonempty dataset")
    _check_resume(resume, cfg, 0)
    bcfg = cfg.backbone
    if resume is None:
        params = init_params(bcfg, np.random.default_rng(_stage_seed(cfg, st) + [0]))
        opt = nc.AdamState(lr=st.lr)
        history: list[dict[str, Any]] = []
        step = 0
    else:
        params = dict(resume.group("backbone"))
        opt = resume.optimizer
        history = list(resume.history)
        step = resume.step
    schedule = _BatchSchedule(samples, st.batch_size, False, st.seed)
    end = st.steps if stop_at is None else min(stop_at, st.steps)

    def snapshot() -> Checkpoint:
        return Checkpoint(cfg.to_dict(), cfg.fingerprint(), {"backbone": dict(params)},
                          _copy_opt(opt), {"seed": _stage_seed(cfg, st), "next_step": step},
                          step, list(history), {"stage": 0})

    while step < end:
        batch = schedule(step)
        z0 = _images(batch)
        z1, t = _noise_and_time(step_rng(cfg, st, step), z0)
        try:
            with nc.Tape() as tape:
                P = nc.parameters(params)
                text = encode_prompt(P, _prompts(batch))
                v = velocity(P, interpolate(z0, z1, t), text, t, bcfg)
                loss = flow_loss(v, z0, z1)
            grads = nc.backward(tape, loss, P)
            _check_grads(grads)
        except NonFiniteError as e:
            raise TrainingDiverged(f"stage 0 diverged at step {step}: {e}", snapshot(), step) from e
        new, opt = nc.adam_step(P, grads, opt)
        params = {k: p.data for k, p in new.items()}
        rec = {"step": step, "loss": float(loss.data)}
        history.append(rec)
        step += 1
        if log is not None and (step % st.log_every == 0 or step == end):
            log(rec)
    return snapshot()


def _check_grads(grads) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")


def _copy_opt(opt: nc.AdamState) -> nc.AdamState:
    return nc.AdamState(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step,
                        dict(opt.m), dict(opt.v))


# --------------------------------------------------------------------------
# stage 1
# --------------------------------------------------------------------------

@dataclass
class Stage1State:
    """The trainable pieces of stage 1 plus the frozen backbone they sit on."""

    backbone: dict[str, np.ndarray]
    adapters: dict[str, np.ndarray]
    bank: EmbeddingBank

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Stage1State":
        ids = ckpt.meta.get("bank_user_ids")
        if ids is None:
            raise CheckpointError("checkpoint has no embedding bank")
        bank = EmbeddingBank(list(ids), Tensor(ckpt.group("bank")["table"]))
        return cls(dict(ckpt.group("backbone")), dict(ckpt.group("adapters")), bank)


def user_separation(backbone, adapters, table: np.ndarray, cfg: ExperimentConfig) -> float:
    """Mean pairwise L2 distance between users' EMPTY-prompt deltas, both adapters concatenated."""
    U = table.shape[0]
    if U < 2:
        return 0.0
    with nc.no_grad():
        d = compute_deltas(nc.constants(adapters), Tensor(table),
                           empty_encoding(nc.constants(backbone), U), cfg.adapter, cfg.backbone)
    flat = np.concatenate([d.shared.data.reshape(U, -1), d.distinct.data.reshape(U, -1)], axis=1)
    dists = [np.linalg.norm(flat[a] - flat[b]) for a in range(U) for b in range(a + 1, U)]
    return float(np.mean(dists))


def _dropout_deltas(deltas: DeltaSet, keep: np.ndarray) -> DeltaSet:
    if keep.all():
        return deltas
    ms = np.broadcast_to(keep[:, None, None], deltas.shared.shape).astype(np.float64)
    md = np.broadcast_to(keep[:, None, None, None], deltas.distinct.shape).astype(np.float64)
    return DeltaSet(deltas.shared * Tensor(ms), deltas.distinct * Tensor(md))


def stage1_losses(backbone, adapters, table: Tensor, bank_ids: list, batch: Batch,
                  z1: np.ndarray, t: np.ndarray, keep: np.ndarray | None,
                  cfg: ExperimentConfig) -> tuple[Tensor, dict[str, Tensor | None]]:
    """Total stage-1 objective for one batch, plus its parts."""
    acfg, bcfg = cfg.adapter, cfg.backbone
    B = len(batch)
    idx = np.array([bank_ids.index(u) for u in batch.user_ids])
    z0 = _images(batch)
    text = encode_prompt(backbone, _prompts(batch))
    adapter_text = text if acfg.prompt_modulation else empty_encoding(backbone, B)
    deltas = compute_deltas(adapters, nc.take(table, idx), adapter_text, acfg, bcfg)
    if keep is not None:
        deltas = _dropout_deltas(deltas, keep)
    v = velocity(backbone, interpolate(z0, z1, t), text, t, bcfg, deltas)
    flow = flow_loss(v, z0, z1)

    lam_s, lam_d = cfg.loss.weights()
    parts: dict[str, Tensor | None] = {"flow": flow, "disp_shared": None, "disp_distinct": None}
    want_s = lam_s > 0 and acfg.use_shared
    want_d = lam_d > 0 and acfg.use_distinct
    if want_s or want_d:
        users = batch.distinct_users()
        if len(users) < 2:
            raise ConfigError("stage-1 batch holds fewer than two distinct users")
        uidx = np.array([bank_ids.index(u) for u in users])
        d_empty = compute_deltas(adapters, nc.take(table, uidx), empty_encoding(backbone, len(users)),
                                 acfg, bcfg)
        if want_s:
            parts["disp_shared"] = dispersion_loss(
                flatten_deltas(d_empty, "shared", acfg.dispersion_flatten))
        if want_d:
            parts["disp_distinct"] = dispersion_loss(
                flatten_deltas(d_empty, "distinct", acfg.dispersion_flatten))
    total = total_loss(flow, parts["disp_shared"], parts["disp_distinct"], LossWeights(lam_s, lam_d))
    return total, parts


def init_stage1(base: Checkpoint, dataset: Dataset, cfg: ExperimentConfig) -> Stage1State:
    st = cfg.stage1
    rng = np.random.default_rng(_stage_seed(cfg, st) + [0])
    adapters = init_adapters(cfg.adapter, cfg.backbone, rng)
    bank = EmbeddingBank.init([u.user_id for u in dataset.train_users], cfg.adapter, rng)
    return Stage1State(dict(base.group("backbone")), adapters, bank)


def train_stage1(dataset: Dataset, base: Checkpoint, cfg: ExperimentConfig, *,
                 resume: Checkpoint | None = None, stop_at: int | None = None,
                 log: Logger | None = None) -> Checkpoint:
    """Jointly train both adapters and the training-user bank on a frozen backbone."""
    st = cfg.stage1
    samples = dataset.train_samples()
    if len({s.user_id for s in samples}) < 2:
        raise ConfigError("stage 1 needs at least two training users with samples")
    _check_resume(resume, cfg, 1)
    if base.meta.get("stage") != 0:
        raise CheckpointError("stage 1 must start from a stage-0 checkpoint")
    if resume is None:
        state = init_stage1(base, dataset, cfg)
        opt = nc.AdamState(lr=st.lr)
        history: list[dict[str, Any]] = []
        step = 0
    else:
        state = Stage1State.from_checkpoint(resume)
        if param_digest(state.backbone) != param_digest(base.group("backbone")):
            raise CheckpointError("resume checkpoint's backbone does not match the base")
        opt = resume.optimizer
        history = list(resume.history)
        step = resume.step
    backbone = nc.constants(state.backbone)
    adapters = dict(state.adapters)
    table = state.bank.table.data
    bank_ids = list(state.bank.user_ids)
    lam_s, lam_d = cfg.loss.weights()
    schedule = _BatchSchedule(samples, st.batch_size, True, st.seed)
    end = st.steps if stop_at is None else min(stop_at, st.steps)

    def snapshot() -> Checkpoint:
        tensors = {"backbone": dict(state.backbone), "adapters": dict(adapters),
                   "bank": {"table": table}}
        return Checkpoint(cfg.to_dict(), cfg.fingerprint(), tensors, _copy_opt(opt),
                          {"seed": _stage_seed(cfg, st), "next_step": step}, step, list(history),
                          {"stage": 1, "bank_user_ids": bank_ids,
                           "base_digest": param_digest(state.backbone)})

    while step < end:
        batch = schedule(step)
        rng = step_rng(cfg, st, step)
        z1, t = _noise_and_time(rng, _images(batch))
        keep = rng.uniform(size=len(batch)) >= st.cond_dropout
        rec: dict[str, Any] = {"step": step}
        if step == 0 or (step + 1) % st.log_every == 0:
            rec["separation"] = user_separation(backbone, adapters, table, cfg)
        try:
            with nc.Tape() as tape:
                A = nc.parameters(adapters)
                T = Tensor(table, requires_grad=True)
                loss, parts = stage1_losses(backbone, A, T, bank_ids, batch, z1, t, keep, cfg)
            grads = nc.backward(tape, loss, {**{f"adapters.{k}": v for k, v in A.items()},
                                             "bank.table": T})
            _check_grads(grads)
        except NonFiniteError as e:
            raise TrainingDiverged(f"stage 1 diverged at step {step}: {e}", snapshot(), step) from e
        current = {**{f"adapters.{k}": v for k, v in A.items()}, "bank.table": T}
        new, opt = nc.adam_step(current, grads, opt)
        adapters = {k: new[f"adapters.{k}"].data for k in adapters}
        table = new["bank.table"].data
        rec["loss"] = float(loss.data)
        for name, val in parts.items():
            if val is not None:
                rec[name] = float(val.data)
        history.append(rec)
        step += 1
        if log is not None and (step % st.log_every == 0 or step == end):
            log(rec)
    if step == st.steps and history and "separation_final" not in history[-1]:
        history[-1]["separation_final"] = user_separation(backbone, adapters, table, cfg)
    return snapshot()


def separation_trace(ckpt: Checkpoint) -> list[tuple[int, float]]:
    out = [(r["step"], r["separation"]) for r in ckpt.history if "separation" in r]
    out += [(r["step"] + 1, r["separation_final"]) for r in ckpt.history if "separation_final" in r]
    return out


# --------------------------------------------------------------------------
# stage 2
# --------------------------------------------------------------------------

@dataclass
class NewUserFit:
    embedding: UserEmbedding
    alpha: np.ndarray | None
    bank_rows: list[int] | None
    history: list[dict[str, Any]] = field(default_factory=list)


def _bank_rows(n: int, subset: int | None, rng: np.random.Generator) -> list[int]:
    if subset is None or subset >= n:
        return list(range(n))
    if subset < 1:
        raise ConfigError("bank_subset must be at least 1")
    return sorted(int(i) for i in rng.choice(n, size=subset, replace=False))


def train_new_user(history: Sequence[Sample], bank: EmbeddingBank, adapters: dict[str, np.ndarray],
                   backbone: dict[str, np.ndarray], cfg: ExperimentConfig, *, user_id: int = -1,
                   seed: int | None = None, mode: str | None = None,
                   log: Logger | None = None) -> NewUserFit:
    """Fit one new user from a few preferred samples; adapters and backbone stay frozen.

    ``linear_combination`` optimises only the coefficients over the bank,
    ``direct`` optimises a freshly initialised embedding.
    """
    st = cfg.stage2
    mode = mode or st.mode
    if mode not in ("linear_combination", "direct"):
        raise ConfigError(f"unknown stage-2 mode {mode!r}")
    history = list(history)
    if not history:
        raise ValueError("train_new_user needs a nonempty preference history")
    seed = st.seed if seed is None else seed
    key = [cfg.seed, 2, seed]
    acfg, bcfg = cfg.adapter, cfg.backbone
    B = min(st.batch_size, len(history))
    schedule = _BatchSchedule(history, B, False, seed)
    BB = nc.constants(backbone)
    AA = nc.constants(adapters)
    init_rng = np.random.default_rng(key + [0])
    rows = None
    if mode == "linear_combination":
        rows = _bank_rows(len(bank), st.bank_subset, init_rng)
        sub = Tensor(bank.table.data[rows])
        param = initial_alpha(len(rows))
        name = "alpha"
    else:
        param = init_rng.normal(0.0, acfg.init_std, size=(acfg.tokens, acfg.d_user))
        name = "embedding"
    opt = nc.AdamState(lr=st.lr)
    texts: dict[int, Any] = {}
    log_rows: list[dict[str, Any]] = []
    for step in range(st.steps):
        batch = schedule(step)
        z0 = _images(batch)
        rng = np.random.default_rng(key + [step, 1])
        z1, t = _noise_and_time(rng, z0)
        n = len(batch)
        with nc.Tape() as tape:
            P = Tensor(param, requires_grad=True)
            e = combine(sub, P) if mode == "linear_combination" else P
            text = encode_prompt(BB, _prompts(batch))
            if n not in texts:
                texts[n] = empty_encoding(BB, n)
            adapter_text = text if acfg.prompt_modulation else texts[n]
            deltas = compute_deltas(AA, nc.expand(e, n), adapter_text, acfg, bcfg)
            v = velocity(BB, interpolate(z0, z1, t), text, t, bcfg, deltas)
            loss = flow_loss(v, z0, z1)
        grads = nc.backward(tape, loss, {name: P})
        _check_grads(grads)
        new, opt = nc.adam_step({name: P}, grads, opt)
        param = new[name].data
        rec = {"step": step, "loss": float(loss.data)}
        log_rows.append(rec)
        if log is not None and (step + 1) % st.log_every == 0:
            log(rec)
    if mode == "linear_combination":
        with nc.no_grad():
            matrix = combine(sub, Tensor(param))
        return NewUserFit(UserEmbedding(user_id, matrix), param, rows, log_rows)
    return NewUserFit(UserEmbedding(user_id, Tensor(param)), None, None, log_rows)


def window_means(values: Sequence[float], window: int = 50) -> list[float]:
    n = len(values) // window
    return [float(np.mean(values[i * window:(i + 1) * window])) for i in range(n)]


__all__ = [
    "Batch", "NewUserFit", "Stage1State", "TrainingDiverged", "epoch_batches", "make_batches",
    "param_digest", "pretrain_backbone", "separation_trace", "stage1_losses", "step_rng",
    "train_new_user", "train_stage1", "user_separation", "window_means",
]
