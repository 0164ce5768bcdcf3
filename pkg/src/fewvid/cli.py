"""Command-line entry points: gen-data, train, eval, ablate, diagnose, plot.

Every command works inside a run directory (--out, defaulting under the
FEWVID_OUT root) and never writes elsewhere. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, plots, trainer
from .config import RunConfig, apply_overrides, load_config, save_config

OUT_ROOT_ENV = "FEWVID_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so we control exit codes."""

    def error(self, message):
        raise UsageError(f"{message}\nusage: {self.format_usage().strip()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="fewvid", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, checkpoint=False, episodes=None):
        p.add_argument("--config", type=str, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="run seed override")
        p.add_argument("--out", type=str, default=None, help="run directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")
        if checkpoint:
            p.add_argument("--checkpoint", type=str, required=True,
                           help="path to a training checkpoint")
        if episodes is not None:
            p.add_argument("--episodes", type=int, default=episodes,
                           help="number of episodes")

    p = sub.add_parser("gen-data", help="render episode archives for replay")
    common(p, episodes=20)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("train", help="run the episodic training loop")
    common(p)
    p.add_argument("--log-every", type=int, default=0, help="print progress every N episodes")

    p = sub.add_parser("eval", help="evaluate a checkpoint on test episodes")
    common(p, checkpoint=True, episodes=1000)
    p.add_argument("--dump-diagnostics", type=int, default=0, metavar="N",
                   help="also dump per-episode diagnostic arrays for N episodes")

    p = sub.add_parser("ablate", help="train and evaluate a toggle grid")
    common(p, episodes=1000)
    p.add_argument("--grid", choices=sorted(trainer.NAMED_GRIDS), default="components")

    p = sub.add_parser("diagnose", help="alignment cost with vs without the sampler")
    common(p, checkpoint=True, episodes=500)

    p = sub.add_parser("plot", help="render plots from a run directory")
    p.add_argument("--run", type=str, required=True, help="run directory to read")
    p.add_argument("--out", type=str, default=None, help="output directory for images")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.override:
        cfg = apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _run_dir(args, verb: str) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path(os.environ.get(OUT_ROOT_ENV, "runs")) / verb
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _run_dir(args, "gen-data")
    banks = trainer.build_banks(cfg, splits=(args.split,))
    bank = banks[args.split]
    episodes, seeds = [], []
    for i in range(args.episodes):
        rng = np.random.default_rng((cfg.seed, i))
        episodes.append(data.sample_episode(bank.class_ids, cfg.way, cfg.shot,
                                            cfg.eval_queries, cfg.misalignment(), rng,
                                            bank=bank))
        seeds.append(i)
    data.save_episodes(run_dir / "episodes", episodes, seeds=seeds)
    save_config(cfg, run_dir / "dataset.cfg")
    print(f"wrote {args.episodes} episodes ({args.split} split) to {run_dir / 'episodes'}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _run_dir(args, "train")
    save_config(cfg, run_dir / "config.cfg")
    _, log = trainer.train(cfg, run_dir=run_dir, log_every=args.log_every)
    last = log.records[-1]
    print(f"trained {cfg.epochs} epochs x {cfg.episodes_per_epoch} episodes; "
          f"final loss {last['loss_total']:.4f}, checkpoint at {run_dir / 'checkpoint.pt'}")
    return 0


def _cmd_eval(args) -> int:
    cfg_eval = _resolve_config(args)
    model, cfg_ckpt = trainer.model_from_checkpoint(args.checkpoint)
    # checkpoint fixes the architecture; command line controls eval-time toggles
    cfg = cfg_ckpt
    if args.override:
        cfg = apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    run_dir = _run_dir(args, "eval")
    bank = trainer.build_banks(cfg, splits=("test",))["test"]
    result = trainer.evaluate(model, cfg, episodes=args.episodes, seed=cfg.seed + 10_000,
                              bank=bank, collect_costs=True)
    payload = {"accuracy": result.accuracy, "ci95": result.ci95,
               "episodes": args.episodes, "mean_align_cost": result.mean_align_cost}
    (run_dir / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
    if args.dump_diagnostics:
        trainer.dump_eval_diagnostics(model, cfg, run_dir, episodes=args.dump_diagnostics,
                                      seed=cfg.seed + 20_000, bank=bank)
    print(f"accuracy {100 * result.accuracy:.2f}% +/- {100 * result.ci95:.2f} "
          f"({args.episodes} episodes)")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _run_dir(args, "ablate")
    grid = trainer.NAMED_GRIDS[args.grid]
    rows = trainer.ablate(cfg, grid, eval_episodes=args.episodes)
    toggle_cols = list(trainer.TOGGLE_KEYS)
    header = ["name", *toggle_cols, "accuracy", "ci95"]
    with open(run_dir / "ablation.tsv", "w") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(str(row[k]) for k in header) + "\n")
    lines = [f"{'cell':<18} " + " ".join(f"{k.split('_')[0]:>7}" for k in toggle_cols)
             + f" {'accuracy':>10}"]
    for row in rows:
        marks = " ".join(f"{'x' if row[k] else '-':>7}" for k in toggle_cols)
        lines.append(f"{row['name']:<18} {marks} "
                     f"{100 * row['accuracy']:6.2f}+/-{100 * row['ci95']:.2f}")
    table = "\n".join(lines)
    (run_dir / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def _cmd_diagnose(args) -> int:
    cfg = _resolve_config(args)
    model, cfg_ckpt = trainer.model_from_checkpoint(args.checkpoint)
    cfg = apply_overrides(cfg_ckpt, args.override) if args.override else cfg_ckpt
    run_dir = _run_dir(args, "diagnose")
    report = trainer.diagnose_alignment(model, cfg, episodes=args.episodes,
                                        seed=cfg.seed + 30_000)
    (run_dir / "diagnose.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"alignment cost (median): sampler {report['median_sampler']:.4f} "
          f"vs uniform {report['median_uniform']:.4f} over {args.episodes} episodes")
    return 0


def _cmd_plot(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.exists():
        raise UsageError(f"run directory {run_dir} does not exist")
    out_dir = Path(args.out) if args.out else run_dir / "plots"
    written = plots.render_all(run_dir, out_dir)
    if not written:
        print("nothing to plot (no metrics or diagnostics found)")
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "diagnose": _cmd_diagnose,
    "plot": _cmd_plot,
}


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.verb](args)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except (KeyError, ValueError) as err:  # bad config keys/values are usage errors
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - boundary: report and exit 2
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
