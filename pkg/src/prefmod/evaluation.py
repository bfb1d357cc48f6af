"""Oracle metrics over generated grids, ablation variants, and the history-length sweep.

Desk metrics and what they stand in for:

* style error: mean oracle style distance between a generated image and the
  user's true style (lower is better; a personalisation score analog)
* win rate: fraction of (prompt, seed) cells where the conditioned image has
  lower style error than the unconditional one from the same noise (ties 1/2)
* content score: mean ``content_check`` (a text-image consistency analog)
* perceptual distance: multi-scale pixel distance to a fresh render of the
  prompt in the user's style (a learned perceptual metric analog)
* separation: mean pairwise distance of users' empty-prompt deltas
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import config as config_mod
from .adapters import EmbeddingBank
from .checkpoint import Checkpoint
from .config import ConfigError, ExperimentConfig
from .numcore import Tensor
from .prompts import COUNTS, POSITIONS, SHAPES, Prompt
from .sampling import sample_images
from .synthdata import (Dataset, StyleParams, UserProfile, content_check, derive_seed, estimate_style,
                        perceptual_distance, render)
from .training import Stage1State, train_new_user, train_stage1, user_separation

METRIC_NOTES = {
    "style_error": "oracle style distance to the user's true style; stands in for a learned "
                   "preference score, no context images involved",
    "win_rate": "conditioned vs unconditional generation from the same noise, judged by oracle "
                "style error; ties count one half",
    "content_score": "template correlation with the prompt's subject, zero on a count mismatch; "
                     "stands in for text-image consistency",
    "perceptual_distance": "multi-scale mean absolute pixel difference to a fresh render of the "
                           "prompt in the user's style; stands in for a learned perceptual metric",
    "separation": "mean pairwise L2 distance between users' empty-prompt deltas",
    "assignment_accuracy": "fraction of conditioned images whose oracle style is nearest to the "
                           "conditioning user's style among the evaluated users",
}

ABLATIONS: dict[str, dict[str, Any]] = {
    "full": {},
    "no_shared": {"adapter.use_shared": False},
    "no_distinct": {"adapter.use_distinct": False},
    "no_dispersion": {"loss.use_dispersion": False},
    "no_ppm": {"adapter.prompt_modulation": False},
}


def eval_prompts(n: int = 9) -> list[Prompt]:
    """Fixed prompt set cycling shapes, counts and positions so each appears evenly."""
    return [Prompt(SHAPES[i % len(SHAPES)], COUNTS[i % len(COUNTS)],
                   POSITIONS[(i // len(COUNTS)) % len(POSITIONS)]) for i in range(n)]


def eval_seed(master: int, prompt_index: int, seed_index: int) -> int:
    # independent of the user, so every user and the baseline share noise per cell
    return derive_seed(master, "eval", prompt_index, seed_index)


def revision() -> str:
    """Content hash of the package sources."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return "src-" + h.hexdigest()[:12]


@dataclass
class EvalReport:
    user_ids: list[int]
    style_error: dict[int, float]              # per user, conditioned
    baseline_style_error: dict[int, float]     # per user, unconditional
    win_rate: float
    content_score: float
    baseline_content_score: float
    perceptual_distance: float
    baseline_perceptual_distance: float
    separation: float
    assignment_accuracy: float
    baseline_assignment_accuracy: float
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def mean_style_error(self) -> float:
        return float(np.mean(list(self.style_error.values())))

    @property
    def mean_baseline_style_error(self) -> float:
        return float(np.mean(list(self.baseline_style_error.values())))

    def validate(self) -> None:
        if not 0.0 <= self.win_rate <= 1.0:
            raise ValueError(f"win rate {self.win_rate} outside [0, 1]")
        for k, v in self.summary().items():
            if not np.isfinite(v):
                raise ValueError(f"non-finite metric {k}")

    def summary(self) -> dict[str, float]:
        return {
            "style_error": self.mean_style_error,
            "baseline_style_error": self.mean_baseline_style_error,
            "win_rate": self.win_rate,
            "content_score": self.content_score,
            "baseline_content_score": self.baseline_content_score,
            "perceptual_distance": self.perceptual_distance,
            "baseline_perceptual_distance": self.baseline_perceptual_distance,
            "separation": self.separation,
            "assignment_accuracy": self.assignment_accuracy,
            "baseline_assignment_accuracy": self.baseline_assignment_accuracy,
        }

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["style_error"] = {str(k): v for k, v in self.style_error.items()}
        d["baseline_style_error"] = {str(k): v for k, v in self.baseline_style_error.items()}
        d["summary"] = self.summary()
        d["metric_notes"] = METRIC_NOTES
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalReport":
        return cls(
            user_ids=list(d["user_ids"]),
            style_error={int(k): v for k, v in d["style_error"].items()},
            baseline_style_error={int(k): v for k, v in d["baseline_style_error"].items()},
            **{k: d[k] for k in ("win_rate", "content_score", "baseline_content_score",
                                 "perceptual_distance", "baseline_perceptual_distance",
                                 "separation", "assignment_accuracy",
                                 "baseline_assignment_accuracy", "metadata")})

    def rows(self) -> list[dict[str, Any]]:
        """Tidy (metric, user_id, value) rows; user_id is empty for aggregate metrics."""
        out = []
        for u in self.user_ids:
            out.append({"metric": "style_error", "user_id": u, "value": self.style_error[u]})
            out.append({"metric": "baseline_style_error", "user_id": u,
                        "value": self.baseline_style_error[u]})
        for k, v in self.summary().items():
            out.append({"metric": k, "user_id": "", "value": v})
        return out


def _nearest(style: StyleParams, candidates: Sequence[StyleParams]) -> int:
    return int(np.argmin([style.distance(c) for c in candidates]))


def evaluate(backbone, adapters, cfg: ExperimentConfig, users: Sequence[UserProfile],
             embeddings: Sequence[Tensor], *, prompts: Sequence[Prompt] | None = None,
             n_seeds: int | None = None, metadata: dict[str, Any] | None = None,
             conditioned: bool = True) -> EvalReport:
    """Generate the user x prompt x seed grid, conditioned and unconditional, and score it.

    With ``conditioned=False`` both arms are unconditional (a self-comparison null).
    """
    if len(users) != len(embeddings):
        raise ValueError("need one embedding per user")
    if not users:
        raise ValueError("evaluate needs at least one user")
    for u, e in zip(users, embeddings):
        if conditioned and e is None:
            raise ValueError(f"user {u.user_id} has no embedding")
    prompts = list(prompts or eval_prompts(cfg.eval.prompts))
    n_seeds = cfg.eval.seeds if n_seeds is None else n_seeds
    master = cfg.sampler.seed
    steps = cfg.sampler.steps
    bcfg, acfg = cfg.backbone, cfg.adapter
    size = cfg.data.image_size

    cells = [(pi, si) for pi in range(len(prompts)) for si in range(n_seeds)]
    cell_prompts = [prompts[pi] for pi, _ in cells]
    cell_seeds = [eval_seed(master, pi, si) for pi, si in cells]
    base_imgs = sample_images(backbone, bcfg, cell_prompts, cell_seeds, steps)
    if conditioned:
        all_p, all_s, all_e = [], [], []
        for e in embeddings:
            all_p += cell_prompts
            all_s += cell_seeds
            all_e += [e] * len(cells)
        cond_imgs = sample_images(backbone, bcfg, all_p, all_s, steps, adapters=adapters, acfg=acfg,
                                  embeddings=all_e).reshape((len(users), len(cells)) + base_imgs.shape[1:])
    else:
        cond_imgs = np.broadcast_to(base_imgs, (len(users),) + base_imgs.shape)

    styles = [u.style for u in users]
    base_est = [estimate_style(img, p) for img, p in zip(base_imgs, cell_prompts)]
    base_content = [content_check(img, p) for img, p in zip(base_imgs, cell_prompts)]
    err, base_err = {}, {}
    wins, content, percept, base_percept = [], [], [], []
    hits, base_hits = [], []
    for ui, u in enumerate(users):
        e_c, e_b = [], []
        for ci, (p, s) in enumerate(zip(cell_prompts, cell_seeds)):
            est = estimate_style(cond_imgs[ui, ci], p)
            dc = est.distance(u.style)
            db = base_est[ci].distance(u.style)
            e_c.append(dc)
            e_b.append(db)
            wins.append(1.0 if dc < db else 0.5 if dc == db else 0.0)
            content.append(content_check(cond_imgs[ui, ci], p))
            ref = render(p, u.style, s, size)
            percept.append(perceptual_distance(cond_imgs[ui, ci], ref))
            base_percept.append(perceptual_distance(base_imgs[ci], ref))
            hits.append(_nearest(est, styles) == ui)
            base_hits.append(_nearest(base_est[ci], styles) == ui)
        err[u.user_id] = float(np.mean(e_c))
        base_err[u.user_id] = float(np.mean(e_b))
    table = np.stack([e.data for e in embeddings]) if conditioned else None
    sep = user_separation(backbone, adapters, table, cfg) if conditioned and adapters is not None else 0.0
    meta = {"seed": cfg.seed, "sampler_seed": master, "sampler_steps": steps,
            "config_fingerprint": cfg.fingerprint(), "revision": revision(),
            "prompts": [str(p) for p in prompts], "seeds_per_prompt": n_seeds,
            "conditioned": conditioned}
    meta.update(metadata or {})
    report = EvalReport(
        user_ids=[u.user_id for u in users], style_error=err, baseline_style_error=base_err,
        win_rate=float(np.mean(wins)), content_score=float(np.mean(content)),
        baseline_content_score=float(np.mean(base_content)),
        perceptual_distance=float(np.mean(percept)),
        baseline_perceptual_distance=float(np.mean(base_percept)),
        separation=float(sep), assignment_accuracy=float(np.mean(hits)),
        baseline_assignment_accuracy=float(np.mean(base_hits)), metadata=meta)
    report.validate()
    return report


def evaluate_checkpoint(ckpt: Checkpoint, dataset: Dataset, cfg: ExperimentConfig,
                        **kwargs) -> EvalReport:
    """Evaluate the training users of a stage-1 checkpoint with their bank embeddings."""
    state = Stage1State.from_checkpoint(ckpt)
    users = [dataset.user(uid) for uid in state.bank.user_ids]
    embs = [state.bank[k].matrix for k in range(len(state.bank))]
    meta = {"checkpoint_step": ckpt.step, "checkpoint_fingerprint": ckpt.fingerprint}
    meta.update(kwargs.pop("metadata", {}) or {})
    return evaluate(state.backbone, state.adapters, cfg, users, embs, metadata=meta, **kwargs)


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

def ablation_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation {variant!r}; choose from {sorted(ABLATIONS)}")
    return config_mod.replace(cfg, **ABLATIONS[variant])


def run_ablation(variant: str, dataset: Dataset, base: Checkpoint, cfg: ExperimentConfig,
                 log=None) -> tuple[ExperimentConfig, Checkpoint, EvalReport]:
    vcfg = ablation_config(cfg, variant)
    ckpt = train_stage1(dataset, base, vcfg, log=log)
    report = evaluate_checkpoint(ckpt, dataset, vcfg, metadata={"variant": variant})
    return vcfg, ckpt, report


# --------------------------------------------------------------------------
# history sweep
# --------------------------------------------------------------------------

SWEEP_COLUMNS = ("length", "mode", "seed", "user_id", "style_error", "perceptual_distance")


def history_for(dataset: Dataset, user_id: int, length: int, seed: int) -> list:
    """First ``length`` samples of a seeded shuffle; shorter histories are prefixes of longer ones."""
    samples = dataset.samples_of(user_id)
    if len(samples) < length:
        raise ValueError(f"user {user_id} has {len(samples)} samples, history of {length} requested")
    order = np.random.default_rng([dataset.master_seed, user_id, seed]).permutation(len(samples))
    return [samples[i] for i in order[:length]]


def score_embedding(backbone, adapters, cfg: ExperimentConfig, user: UserProfile, embedding: Tensor,
                    prompts: Sequence[Prompt], n_seeds: int) -> tuple[float, float]:
    """(style error, perceptual distance) of one user's conditioned generations."""
    cells = [(pi, si) for pi in range(len(prompts)) for si in range(n_seeds)]
    ps = [prompts[pi] for pi, _ in cells]
    seeds = [eval_seed(cfg.sampler.seed, pi, si) for pi, si in cells]
    imgs = sample_images(backbone, cfg.backbone, ps, seeds, cfg.sampler.steps, adapters=adapters,
                         acfg=cfg.adapter, embeddings=[embedding] * len(cells))
    errs = [estimate_style(img, p).distance(user.style) for img, p in zip(imgs, ps)]
    dists = [perceptual_distance(img, render(p, user.style, s, cfg.data.image_size))
             for img, p, s in zip(imgs, ps, seeds)]
    return float(np.mean(errs)), float(np.mean(dists))


def history_sweep(dataset: Dataset, ckpt: Checkpoint, cfg: ExperimentConfig, *,
                  lengths: Sequence[int] | None = None, modes: Sequence[str] | None = None,
                  n_users: int | None = None, n_seeds: int | None = None,
                  log=None) -> list[dict[str, Any]]:
    """Fit held-out users from histories of each length in each mode; one row per fit."""
    lengths = list(lengths or cfg.eval.history_lengths)
    modes = list(modes or cfg.eval.history_modes)
    n_users = cfg.eval.history_users if n_users is None else n_users
    n_seeds = cfg.eval.history_seeds if n_seeds is None else n_seeds
    users = dataset.heldout_users[:n_users]
    if len(users) < n_users:
        raise ValueError(f"dataset has {len(dataset.heldout_users)} held-out users, "
                         f"{n_users} requested")
    need = max(lengths)
    for u in users:
        if len(dataset.samples_of(u.user_id)) < need:
            raise ValueError(f"held-out user {u.user_id} has too few samples for length {need}")
    state = Stage1State.from_checkpoint(ckpt)
    bank = EmbeddingBank(state.bank.user_ids, state.bank.table)
    prompts = eval_prompts(cfg.eval.prompts)
    rows = []
    for length in lengths:
        for mode in modes:
            for seed in range(n_seeds):
                for u in users:
                    hist = history_for(dataset, u.user_id, length, seed)
                    fit = train_new_user(hist, bank, state.adapters, state.backbone, cfg,
                                         user_id=u.user_id, seed=seed, mode=mode)
                    err, dist = score_embedding(state.backbone, state.adapters, cfg, u,
                                                fit.embedding.matrix, prompts, cfg.eval.seeds)
                    row = {"length": length, "mode": mode, "seed": seed, "user_id": u.user_id,
                           "style_error": err, "perceptual_distance": dist}
                    rows.append(row)
                    if log is not None:
                        log(row)
    return rows


def sweep_means(rows: Sequence[dict[str, Any]], metric: str = "style_error") -> dict[tuple[int, str], float]:
    acc: dict[tuple[int, str], list[float]] = {}
    for r in rows:
        acc.setdefault((int(r["length"]), r["mode"]), []).append(float(r[metric]))
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def rows_to_csv(rows: Sequence[dict[str, Any]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def csv_to_rows(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))
