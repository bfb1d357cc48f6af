"""Command-line entry point: ``prefmod <subcommand> [flags]``.

Every subcommand writes into a fresh directory ``<run-dir>/<timestamp>-<fingerprint>-<command>``
and prints that path as its last line of output.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import checkpoint as ckpt_mod
from . import evaluation as ev
from . import prompts as prompts_mod
from . import sampling, synthdata, training
from .adapters import UserEmbedding
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .numcore import NonFiniteError, Tensor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

log = logging.getLogger("prefmod")


class InputError(Exception):
    """Missing or unreadable inputs; the message lists all of them."""


# --------------------------------------------------------------------------
# run directories and outputs
# --------------------------------------------------------------------------

def new_run_dir(root: Path, cfg: ExperimentConfig, command: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{cfg.fingerprint()}-{command}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = Path(f"{base}-{n}")
    path.mkdir(parents=True)
    return path


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(run: Path, command: str, cfg: ExperimentConfig, inputs: dict[str, str],
                   outputs: Sequence[str], extra: dict[str, Any] | None = None) -> None:
    (run / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    manifest = {"command": command, "config_fingerprint": cfg.fingerprint(), "seed": cfg.seed,
                "revision": ev.revision(), "inputs": inputs, "outputs": sorted(outputs)}
    manifest.update(extra or {})
    write_json(run / "manifest.json", manifest)


def write_csv(path: Path, rows: Sequence[dict[str, Any]], columns: Sequence[str]) -> None:
    path.write_text(ev.rows_to_csv(rows, columns))


def _log_row(row: dict) -> None:
    log.info(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args, cfg: ExperimentConfig, run: Path) -> None:
    ds = synthdata.dataset_from_config(cfg.data, cfg.seed)
    synthdata.save_dataset(ds, run / "dataset")
    write_manifest(run, "gen-data", cfg, {}, ["dataset"],
                   {"train_users": len(ds.train_users), "heldout_users": len(ds.heldout_users),
                    "samples": len(ds.samples), "prior_samples": len(ds.prior_samples)})


def _load_data(path: Path) -> synthdata.Dataset:
    return synthdata.load_dataset(path)


def cmd_pretrain(args, cfg, run) -> None:
    ds = _load_data(args.data)
    try:
        ck = training.pretrain_backbone(ds, cfg, log=_log_row)
    except training.TrainingDiverged as e:
        if e.last_checkpoint is not None:
            ckpt_mod.save_checkpoint(run / "last_finite.ckpt", e.last_checkpoint)
        raise
    ckpt_mod.save_checkpoint(run / "stage0.ckpt", ck)
    write_csv(run / "metrics.csv", ck.history, ("step", "loss"))
    write_manifest(run, "pretrain", cfg, {"data": str(args.data)}, ["stage0.ckpt", "metrics.csv"])


STAGE1_COLUMNS = ("step", "loss", "flow", "disp_shared", "disp_distinct", "separation",
                  "separation_final")


def _stage1_rows(ck) -> list[dict]:
    return [{k: r.get(k, "") for k in STAGE1_COLUMNS} for r in ck.history]


def cmd_train_stage1(args, cfg, run) -> None:
    ds = _load_data(args.data)
    base = ckpt_mod.load_checkpoint(args.base)
    resume = ckpt_mod.load_checkpoint(args.resume) if args.resume else None
    try:
        ck = training.train_stage1(ds, base, cfg, resume=resume, stop_at=args.stop_at, log=_log_row)
    except training.TrainingDiverged as e:
        if e.last_checkpoint is not None:
            ckpt_mod.save_checkpoint(run / "last_finite.ckpt", e.last_checkpoint)
        raise
    ckpt_mod.save_checkpoint(run / "stage1.ckpt", ck)
    write_csv(run / "metrics.csv", _stage1_rows(ck), STAGE1_COLUMNS)
    inputs = {"data": str(args.data), "base": str(args.base)}
    if args.resume:
        inputs["resume"] = str(args.resume)
    write_manifest(run, "train-stage1", cfg, inputs, ["stage1.ckpt", "metrics.csv"])


def cmd_train_new_user(args, cfg, run) -> None:
    ds = _load_data(args.data)
    ck = ckpt_mod.load_checkpoint(args.checkpoint)
    state = training.Stage1State.from_checkpoint(ck)
    hist = ev.history_for(ds, args.user, args.history, args.history_seed)
    fit = training.train_new_user(hist, state.bank, state.adapters, state.backbone, cfg,
                                  user_id=args.user, log=_log_row)
    tensors = {"new_user": {"embedding": fit.embedding.matrix.data}}
    if fit.alpha is not None:
        tensors["new_user"]["alpha"] = fit.alpha
    out = ckpt_mod.Checkpoint(cfg.to_dict(), cfg.fingerprint(), tensors, None, {},
                              cfg.stage2.steps, fit.history,
                              {"stage": 2, "user_id": args.user, "mode": cfg.stage2.mode,
                               "bank_rows": fit.bank_rows, "history_length": args.history})
    ckpt_mod.save_checkpoint(run / "new_user.ckpt", out)
    write_csv(run / "metrics.csv", fit.history, ("step", "loss"))
    err, dist = ev.score_embedding(state.backbone, state.adapters, cfg, ds.user(args.user),
                                   fit.embedding.matrix, ev.eval_prompts(cfg.eval.prompts),
                                   cfg.eval.seeds)
    write_json(run / "report.json", {"user_id": args.user, "mode": cfg.stage2.mode,
                                     "history_length": args.history, "style_error": err,
                                     "perceptual_distance": dist})
    write_manifest(run, "train-new-user", cfg,
                   {"data": str(args.data), "checkpoint": str(args.checkpoint)},
                   ["new_user.ckpt", "metrics.csv", "report.json"])


def _embedding_from(path: Path) -> Tensor:
    ck = ckpt_mod.load_checkpoint(path)
    return Tensor(ck.group("new_user")["embedding"])


def cmd_sample(args, cfg, run) -> None:
    ck = ckpt_mod.load_checkpoint(args.checkpoint)
    prompts = [prompts_mod.parse(p) for p in (args.prompt or [])] or ev.eval_prompts(cfg.eval.prompts)
    if "bank" in ck.tensors:
        state = training.Stage1State.from_checkpoint(ck)
        backbone, adapters = state.backbone, state.adapters
    else:
        state, backbone, adapters = None, ck.group("backbone"), None
    users: list = []
    for spec in args.user or []:
        if spec == "none":
            users.append(None)
        elif state is None:
            raise ConfigError("conditioned sampling needs a stage-1 checkpoint")
        else:
            k = state.bank.index(int(spec))
            users.append(state.bank[k])
    for path in args.embedding or []:
        if state is None:
            raise ConfigError("conditioned sampling needs a stage-1 checkpoint")
        users.append(UserEmbedding(-1, _embedding_from(path)))
    if not users:
        users = [None]
    grid = sampling.sample_batch(prompts, users, backbone, cfg.backbone, cfg.sampler,
                                 adapters=adapters, acfg=cfg.adapter)
    sampling.export_grid(grid, run)
    cells = run / "cells"
    cells.mkdir()
    for c in grid.manifest["cells"]:
        img = grid.images[c["user_index"], c["prompt_index"]]
        stem = f"u{c['user_index']:02d}_p{c['prompt_index']:02d}"
        synthdata.write_raw(cells / f"{stem}.f64", img)
        sampling.write_ppm(cells / f"{stem}.ppm", img)
    grid.manifest.update({"command": "sample", "config_fingerprint": cfg.fingerprint(),
                          "revision": ev.revision(), "inputs": {"checkpoint": str(args.checkpoint)}})
    write_json(run / "manifest.json", grid.manifest)
    (run / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def _write_report(run: Path, report: ev.EvalReport) -> None:
    write_json(run / "report.json", report.to_dict())
    write_csv(run / "metrics.csv", report.rows(), ("metric", "user_id", "value"))


def _eval_grid(run: Path, ck, ds, cfg) -> None:
    """A small users x prompts preview grid next to the report."""
    state = training.Stage1State.from_checkpoint(ck)
    users = [None] + [state.bank[k] for k in range(len(state.bank))]
    grid = sampling.sample_batch(ev.eval_prompts(cfg.eval.prompts), users, state.backbone,
                                 cfg.backbone, cfg.sampler, adapters=state.adapters, acfg=cfg.adapter)
    sampling.write_ppm(run / "grid.ppm", sampling.tile(grid.images))


def cmd_eval(args, cfg, run) -> None:
    ds = _load_data(args.data)
    ck = ckpt_mod.load_checkpoint(args.checkpoint)
    if "bank" in ck.tensors:
        report = ev.evaluate_checkpoint(ck, ds, cfg)
        if not args.no_grid:
            _eval_grid(run, ck, ds, cfg)
    else:
        # a stage-0 checkpoint has no users to condition on: compare it with itself
        users = ds.train_users
        report = ev.evaluate(ck.group("backbone"), None, cfg, users, [None] * len(users),
                             conditioned=False, metadata={"checkpoint_step": ck.step})
    _write_report(run, report)
    write_manifest(run, "eval", cfg, {"data": str(args.data), "checkpoint": str(args.checkpoint)},
                   ["report.json", "metrics.csv"] + ([] if args.no_grid else ["grid.ppm"]))


def cmd_ablate(args, cfg, run) -> None:
    ds = _load_data(args.data)
    base = ckpt_mod.load_checkpoint(args.base)
    vcfg, ck, report = ev.run_ablation(args.variant, ds, base, cfg, log=_log_row)
    ckpt_mod.save_checkpoint(run / "stage1.ckpt", ck)
    _write_report(run, report)
    write_csv(run / "training.csv", _stage1_rows(ck), STAGE1_COLUMNS)
    write_manifest(run, "ablate", vcfg, {"data": str(args.data), "base": str(args.base)},
                   ["stage1.ckpt", "report.json", "metrics.csv", "training.csv"],
                   {"variant": args.variant, "changed": ev.ABLATIONS[args.variant]})


def cmd_history_sweep(args, cfg, run) -> None:
    ds = _load_data(args.data)
    ck = ckpt_mod.load_checkpoint(args.checkpoint)
    rows = ev.history_sweep(ds, ck, cfg, lengths=args.lengths, modes=args.modes,
                            n_users=args.users, n_seeds=args.seeds, log=_log_row)
    write_csv(run / "metrics.csv", rows, ev.SWEEP_COLUMNS)
    means = ev.sweep_means(rows)
    write_json(run / "report.json", {
        "mean_style_error": [{"length": k[0], "mode": k[1], "value": v} for k, v in means.items()],
        "rows": len(rows), "metric_notes": ev.METRIC_NOTES})
    write_manifest(run, "history-sweep", cfg,
                   {"data": str(args.data), "checkpoint": str(args.checkpoint)},
                   ["metrics.csv", "report.json"])


def build_report(run_dirs: Sequence[Path]) -> tuple[dict, list[dict]]:
    """Side-by-side summary of existing eval/ablate runs, in the order given."""
    entries, rows = [], []
    for d in run_dirs:
        rep = json.loads((d / "report.json").read_text())
        man = json.loads((d / "manifest.json").read_text())
        name = man.get("variant") or d.name
        summary = rep.get("summary", {})
        entries.append({"name": name, "run": d.name, "summary": summary,
                        "config_fingerprint": man.get("config_fingerprint")})
        for k, v in sorted(summary.items()):
            rows.append({"run": name, "metric": k, "value": v})
    return {"runs": entries, "metric_notes": ev.METRIC_NOTES}, rows


def cmd_report(args, cfg, run) -> None:
    report, rows = build_report(args.runs)
    write_json(run / "report.json", report)
    write_csv(run / "metrics.csv", rows, ("run", "metric", "value"))
    for e in report["runs"]:
        s = e["summary"]
        print(f"{e['name']:>16}  style_error={s.get('style_error', float('nan')):.4f}  "
              f"separation={s.get('separation', float('nan')):.4f}")
    write_manifest(run, "report", cfg, {"runs": ",".join(str(r) for r in args.runs)},
                   ["report.json", "metrics.csv"])


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file (defaults apply otherwise)")
    p.add_argument("--run-dir", type=Path, default=Path("runs"),
                   help="root under which the run directory is created")
    p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prefmod", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic preference dataset")
    _common(p)

    p = sub.add_parser("pretrain", help="stage 0: backbone pretraining")
    _common(p)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("train-stage1", help="stage 1: adapters and user embeddings")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--base", type=Path, required=True, help="stage-0 checkpoint")
    p.add_argument("--resume", type=Path, help="partial stage-1 checkpoint to continue")
    p.add_argument("--stop-at", type=int, help="stop after this many total steps")

    p = sub.add_parser("train-new-user", help="stage 2: fit a held-out user")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="stage-1 checkpoint")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--history", type=int, default=4, help="number of preferred samples")
    p.add_argument("--history-seed", type=int, default=0)

    p = sub.add_parser("sample", help="generate a users x prompts grid")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--prompt", action="append", help='e.g. "circle two left"; repeatable')
    p.add_argument("--user", action="append", help="bank user id or 'none'; repeatable")
    p.add_argument("--embedding", action="append", type=Path, help="new-user checkpoint; repeatable")

    p = sub.add_parser("eval", help="oracle evaluation of a checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--no-grid", action="store_true", help="skip the preview grid")

    p = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    _common(p)
    p.add_argument("variant", choices=sorted(ev.ABLATIONS))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--base", type=Path, required=True, help="stage-0 checkpoint")

    p = sub.add_parser("history-sweep", help="cold-start sweep over history lengths")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="stage-1 checkpoint")
    p.add_argument("--lengths", type=int, nargs="+")
    p.add_argument("--modes", nargs="+", choices=["linear_combination", "direct"])
    p.add_argument("--users", type=int)
    p.add_argument("--seeds", type=int)

    p = sub.add_parser("report", help="compare finished eval/ablate runs")
    _common(p)
    p.add_argument("runs", type=Path, nargs="+")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train-stage1": cmd_train_stage1,
    "train-new-user": cmd_train_new_user, "sample": cmd_sample, "eval": cmd_eval,
    "ablate": cmd_ablate, "history-sweep": cmd_history_sweep, "report": cmd_report,
}

INPUT_FLAGS = ("data", "base", "resume", "checkpoint", "config")


def _check_inputs(args) -> None:
    """Every missing input path is reported in one message."""
    paths = {k: getattr(args, k, None) for k in INPUT_FLAGS}
    for i, e in enumerate(getattr(args, "embedding", None) or []):
        paths[f"embedding[{i}]"] = e
    missing = [f"--{k.replace('_', '-')} {p}" for k, p in paths.items() if p is not None and not Path(p).exists()]
    for r in getattr(args, "runs", None) or []:
        for f in ("report.json", "manifest.json"):
            if not (r / f).is_file():
                missing.append(f"{r / f}")
    if missing:
        raise InputError("missing inputs: " + ", ".join(missing))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        _check_inputs(args)
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        if args.command == "ablate":
            ev.ablation_config(cfg, args.variant)
        if args.command == "train-new-user" and args.history < 1:
            raise ConfigError("--history must be at least 1")
        run = new_run_dir(args.run_dir, cfg, args.command)
        COMMANDS[args.command](args, cfg, run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, CheckpointError, synthdata.DataError, KeyError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (training.TrainingDiverged, NonFiniteError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(run)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
