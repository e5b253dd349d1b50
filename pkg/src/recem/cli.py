"""Command-line entry point: ``recem <subcommand> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint, experiments as X, synthdata
from .config import ConfigError, RunConfig, load_config, parse_value
from .report import Curve, ExperimentResult, Table, emit_report
from .train import DivergenceError, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

SWEEPS = {"ablate": "ablation", "sweep-beta": "beta_sweep", "sweep-weights": "weight_sweep",
          "leakage": "leakage", "consistency": "consistency"}


def _config_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value file; flags override it")
    g = p.add_argument_group("run configuration")
    for f in fields(RunConfig):
        g.add_argument(f"--{f.name}", f"--{f.name.replace('_', '-')}", dest=f.name, metavar="V",
                       default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _config_parser()
    parser = argparse.ArgumentParser(prog="recem", description="Concept embedding model lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/val/test dataset files")
    sub.add_parser("train", parents=[common], help="train one checkpoint per seed")
    for name, help_ in (("eval", "full metrics for checkpoints"),
                        ("intervene", "intervention curve for checkpoints"),
                        ("shift-eval", "task accuracy under each background shift")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("checkpoints", nargs="+", type=Path)
    for name, exp in SWEEPS.items():
        sub.add_parser(name, parents=[common], help=f"run the {exp} experiment")
    rp = sub.add_parser("report", parents=[common], help="run any named experiment and write its report")
    rp.add_argument("--name", choices=X.EXPERIMENTS, help="defaults to the config's experiment key")
    return parser


def config_from(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: parse_value(f.name, getattr(args, f.name))
                 for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return load_config(args.config, overrides)


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / name


def cmd_gen_data(cfg: RunConfig, args) -> None:
    out = _out(cfg, "data")
    out.mkdir(parents=True, exist_ok=True)
    for ds in synthdata.generate(cfg.data_spec()):
        synthdata.save(ds, out / f"{ds.split}.recemdata")
        print(f"{ds.split}: {len(ds)} samples -> {out / f'{ds.split}.recemdata'}")


def cmd_train(cfg: RunConfig, args) -> None:
    out = _out(cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    tr, va, _ = X.dataset(cfg.data_spec())
    for seed in cfg.seeds:
        res = train(cfg, seed, (tr, va))
        stem = f"{cfg.variant}{'_mech' if cfg.mechanisms else ''}_seed{seed}"
        digest = checkpoint.save(out / f"{stem}.ckpt", res.model, cfg, seed)
        keys = ["task", "concept", "mixup", "cvd", "rec", "total"]
        rows = [[e.epoch, *[e.losses[k] for k in keys], e.val_task_accuracy, e.val_concept_accuracy, e.beta,
                 e.seconds] for e in res.log.epochs]
        emit_report(ExperimentResult(tables=[Table(f"{stem}_log", ["epoch", *keys, "val_task_accuracy",
                                                                   "val_concept_accuracy", "beta", "seconds"],
                                                   rows)]), out)
        print(f"seed {seed}: best epoch {res.log.best_epoch}, val task "
              f"{res.log.best_val_task_accuracy:.2f}%, sha256 {digest[:16]}")


def _load_all(cfg: RunConfig, paths):
    for path in paths:
        model, ckcfg, seed = checkpoint.load(path)
        yield Path(path).stem, model, ckcfg, seed


def cmd_eval(cfg: RunConfig, args) -> None:
    rows = []
    for stem, model, ckcfg, seed in _load_all(cfg, args.checkpoints):
        test = X.dataset(ckcfg.data_spec())[2]
        r = X.evaluate(model, test, seed=seed)
        rows.append([stem, r.concept_accuracy, r.task_accuracy, r.cas, r.ois, r.shift_similarity.mean,
                     r.consistency_mean] + [r.shift_accuracy[k.value] for k in X.ALL_SHIFTS])
        print(f"{stem}: task {r.task_accuracy:.2f}% concept {r.concept_accuracy:.2f}% "
              f"CAS {r.cas:.2f} OIS {r.ois:.2f}")
    header = ["checkpoint", "concept_accuracy", "task_accuracy", "cas", "ois", "shift_similarity",
              "concept_consistency"] + [k.value for k in X.ALL_SHIFTS]
    emit_report(ExperimentResult(tables=[Table("eval", header, rows)]), _out(cfg, "eval"))


def cmd_intervene(cfg: RunConfig, args) -> None:
    series = {}
    for stem, model, ckcfg, seed in _load_all(cfg, args.checkpoints):
        test = X.dataset(ckcfg.data_spec())[2]
        series[stem] = X.evaluate(model, test, shifts=(), seed=seed, include={"intervention"}).intervention
        print(stem, " ".join(f"{k:g}:{v:.2f}" for k, v in series[stem].items()))
    emit_report(ExperimentResult(curves=[Curve("intervention_curve", series, "intervention ratio",
                                               "task accuracy (%)")]), _out(cfg, "intervene"))


def cmd_shift_eval(cfg: RunConfig, args) -> None:
    rows = []
    for stem, model, ckcfg, seed in _load_all(cfg, args.checkpoints):
        test = X.dataset(ckcfg.data_spec())[2]
        r = X.evaluate(model, test, seed=seed, include=())
        rows += [[stem, kind, acc] for kind, acc in r.shift_accuracy.items()]
        print(stem, " ".join(f"{k}:{v:.2f}" for k, v in r.shift_accuracy.items()))
    emit_report(ExperimentResult(tables=[Table("shift_eval", ["checkpoint", "shift", "task_accuracy"], rows)]),
                _out(cfg, "shift_eval"))


def _experiment(name: str):
    def run(cfg: RunConfig, args) -> None:
        result = X.run_experiment(name, cfg)
        for path in emit_report(result, _out(cfg, name)):
            print(path)
    return run


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "intervene": cmd_intervene,
                "shift-eval": cmd_shift_eval}
    handlers.update({cmd: _experiment(exp) for cmd, exp in SWEEPS.items()})
    try:
        cfg = config_from(args)
        if args.command == "report":
            handler = _experiment(args.name or cfg.experiment)
        else:
            handler = handlers[args.command]
        handler(cfg, args)
    except (ConfigError, checkpoint.CheckpointError, synthdata.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
