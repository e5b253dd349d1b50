"""Seeded train/evaluate grids and the named experiments built from them."""

from __future__ import annotations

import functools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from . import metrics as MX
from .config import EXPERIMENTS, RunConfig
from .models import ConceptModel
from .report import Curve, ExperimentResult, Histogram, Table
from .synthdata import ShiftKind, SynDataset, SyntheticSpec, apply_shift, generate
from .train import RunLog, train

logger = logging.getLogger(__name__)

SHIFTS = (ShiftKind.RANDOM, ShiftKind.FIXED, ShiftKind.ZERO)
ALL_SHIFTS = (ShiftKind.IN_DISTRIBUTION,) + SHIFTS
INTERVENTION_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
BETA_GRID = (0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0)
WEIGHT_GRID = {
    "lambda_m": (0.01, 0.1, 0.5, 1.0),
    "lambda_cvd": (0.01, 0.05, 0.1, 0.5),
    "lambda_rec": (0.1, 0.5, 1.0, 5.0),
}
ABLATIONS = {
    "full": (),
    "w/o L_m": ("lambda_m",),
    "w/o L_rec": ("lambda_rec",),
    "w/o L_cvd": ("lambda_cvd",),
    "w/o L_m+L_rec": ("lambda_m", "lambda_rec"),
    "w/o L_m+L_cvd": ("lambda_m", "lambda_cvd"),
    "w/o L_cvd+L_rec": ("lambda_cvd", "lambda_rec"),
}


@functools.lru_cache(maxsize=4)
def dataset(spec: SyntheticSpec) -> tuple[SynDataset, SynDataset, SynDataset]:
    """Cached per process. The test split comes back locked; evaluation unlocks a copy."""
    tr, va, te = generate(spec)
    return tr, va, te.lock()


@dataclass
class SeedRun:
    config: RunConfig
    seed: int
    checkpoint: bytes
    log: RunLog

    def model(self) -> ConceptModel:
        return checkpoint.loads(self.checkpoint, self.config)[0]


def _job(args: tuple[RunConfig, int]) -> SeedRun:
    config, seed = args
    tr, va, _ = dataset(config.data_spec())
    res = train(config, seed, (tr, va))
    return SeedRun(config, seed, checkpoint.dumps(res.model, config, seed), res.log)


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("RECEM_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


# Training is a pure function of (config, seed), so finished runs are reused within a process.
_RUNS: dict[tuple[str, int], SeedRun] = {}


def clear_run_cache() -> None:
    _RUNS.clear()


def _run_key(config: RunConfig, seed: int) -> tuple[str, int]:
    return config.with_(seeds=[seed], out_dir="", experiment="baselines").dumps(), seed


def run_grid(configs: list[RunConfig]) -> list[list[SeedRun]]:
    """Train every (config, seed) pair; results grouped per config in seed order."""
    keys = [(_run_key(c, s), c, s) for c in configs for s in c.seeds]
    todo = list({k: (c, s) for k, c, s in keys if k not in _RUNS}.items())
    n = worker_count(len(todo))
    if n <= 1:
        done = [_job(job) for _, job in todo]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            done = list(pool.map(_job, [job for _, job in todo]))
    for (key, _), run in zip(todo, done):
        _RUNS[key] = run
    out, i = [], 0
    for c in configs:
        out.append([_RUNS[k] for k, _, _ in keys[i:i + len(c.seeds)]])
        i += len(c.seeds)
    return out


# -- evaluation ----------------------------------------------------------------------

FULL_METRICS = frozenset({"cas", "ois", "similarity", "consistency", "variance", "intervention"})


def evaluate(model: ConceptModel, test: SynDataset, shifts=ALL_SHIFTS, seed: int = 0,
             include=FULL_METRICS) -> MX.MetricsReport:
    """Accuracies on each requested shift plus the selected reliability metrics on clean test."""
    if test.features.shape[1] != model.config.n_in or test.spec.K != model.config.K:
        raise ValueError(f"dataset (n_in={test.features.shape[1]}, K={test.spec.K}) does not match model "
                         f"(n_in={model.config.n_in}, K={model.config.K})")
    test = test.unlock()
    with T.no_grad():
        clean = model.forward(T.Tensor(test.features), mode="eval")
    emb = MX.concept_representation(clean)
    c, y = test.concepts, test.labels
    shift_acc = {}
    for kind in shifts:
        ds = apply_shift(test, kind, seed=test.spec.seed)
        with T.no_grad():
            logits = model.forward(T.Tensor(ds.features), mode="eval").logits
        shift_acc[ShiftKind(kind).value] = MX.task_accuracy(logits, y)
    nan = float("nan")
    return MX.MetricsReport(
        concept_accuracy=MX.concept_accuracy(clean.p_hat, c),
        task_accuracy=MX.task_accuracy(clean.logits, y),
        cas=MX.cas(emb, c, seed) if "cas" in include else nan,
        ois=MX.ois(emb, c, seed) if "ois" in include else nan,
        shift_similarity=(MX.cosine_shift_similarity(model, test, apply_shift(test, ShiftKind.RANDOM,
                                                                             test.spec.seed))
                          if "similarity" in include else None),
        consistency=MX.cosine_concept_consistency(model, test, seed=seed) if "consistency" in include else {},
        variance=MX.intra_concept_variances(emb, c) if "variance" in include else np.array([]),
        intervention=(MX.intervention_curve(model, test, INTERVENTION_RATIOS, seeds=(seed,))
                      if "intervention" in include else {}),
        shift_accuracy=shift_acc,
    )


def evaluate_runs(runs: list[SeedRun], include=FULL_METRICS, shifts=ALL_SHIFTS) -> list[MX.MetricsReport]:
    reports = []
    for run in runs:
        test = dataset(run.config.data_spec())[2]
        reports.append(evaluate(run.model(), test, shifts, seed=run.seed, include=include))
    return reports


def mean_ci(values) -> tuple[float, float]:
    v = [float(x) for x in values]
    return float(np.mean(v)), MX.ci_half_width(v)


def shifted_mean(report: MX.MetricsReport) -> float:
    return float(np.mean([report.shift_accuracy[k.value] for k in SHIFTS]))


def _label(cfg: RunConfig) -> str:
    return f"{cfg.variant}+mech" if cfg.mechanisms else cfg.variant


def _summary_table(name: str, labels: list[str], reports: list[list[MX.MetricsReport]],
                   columns: dict[str, callable]) -> Table:
    header = ["model"] + [h for col in columns for h in (col, f"{col}_ci")]
    rows = []
    for label, reps in zip(labels, reports):
        row = [label]
        for get in columns.values():
            row += list(mean_ci([get(r) for r in reps]))
        rows.append(row)
    return Table(name, header, rows)


# -- named experiments ---------------------------------------------------------------


def _baselines(cfg: RunConfig) -> ExperimentResult:
    configs = [cfg.with_(variant=v) for v in ("BoolCBM", "FuzzyCBM", "CEM", "RECEM")]
    configs += [cfg.with_(variant=v, mechanisms=True) for v in ("BoolCBM", "FuzzyCBM")]
    reps = [evaluate_runs(r, include={"cas"}, shifts=()) for r in run_grid(configs)]
    cols = {"concept_accuracy": lambda r: r.concept_accuracy, "task_accuracy": lambda r: r.task_accuracy,
            "cas": lambda r: r.cas}
    return ExperimentResult(tables=[_summary_table("baselines", [_label(c) for c in configs], reps, cols)])


def _ablation(cfg: RunConfig) -> ExperimentResult:
    base = cfg.with_(variant="RECEM")
    configs = [base.with_(**{k: 0.0 for k in drop}) for drop in ABLATIONS.values()]
    reps = [evaluate_runs(r, include=()) for r in run_grid(configs)]
    cols = {"task_accuracy": lambda r: r.task_accuracy, "concept_accuracy": lambda r: r.concept_accuracy,
            "shifted_task_accuracy": shifted_mean}
    return ExperimentResult(tables=[_summary_table("ablation", list(ABLATIONS), reps, cols)])


def _beta_sweep(cfg: RunConfig) -> ExperimentResult:
    configs = [cfg.with_(variant="RECEM", beta_max=b) for b in BETA_GRID]
    grid = run_grid(configs)
    reps = [evaluate_runs(r, include=(), shifts=()) for r in grid]
    val = [np.mean([run.log.best_val_task_accuracy for run in runs]) for runs in grid]
    table = Table("beta_sweep", ["beta_max", "val_task_accuracy", "test_task_accuracy", "test_task_accuracy_ci"],
                  [[b, float(v), *mean_ci([r.task_accuracy for r in rs])]
                   for b, v, rs in zip(BETA_GRID, val, reps)])
    curve = Curve("beta_sweep_curve", {"RECEM": {b: float(v) for b, v in zip(BETA_GRID, val)}},
                  "beta_max", "validation task accuracy (%)")
    return ExperimentResult(tables=[table], curves=[curve])


def _weight_sweep(cfg: RunConfig) -> ExperimentResult:
    base = cfg.with_(variant="RECEM")
    points = [(k, v) for k, vals in WEIGHT_GRID.items() for v in vals]
    configs = [base.with_(**{k: v}) for k, v in points]
    reps = [evaluate_runs(r, include=(), shifts=()) for r in run_grid(configs)]
    rows = [[k, v, *mean_ci([r.concept_accuracy for r in rs]), *mean_ci([r.task_accuracy for r in rs])]
            for (k, v), rs in zip(points, reps)]
    return ExperimentResult(tables=[Table("weight_sweep", ["weight", "value", "concept_accuracy",
                                                           "concept_accuracy_ci", "task_accuracy",
                                                           "task_accuracy_ci"], rows)])


def _intervention(cfg: RunConfig) -> ExperimentResult:
    configs = [cfg.with_(variant=v) for v in ("BoolCBM", "FuzzyCBM", "CEM", "RECEM")]
    reps = [evaluate_runs(r, include={"intervention"}, shifts=()) for r in run_grid(configs)]
    series = {c.variant: {ratio: float(np.mean([r.intervention[ratio] for r in rs]))
                          for ratio in INTERVENTION_RATIOS} for c, rs in zip(configs, reps)}
    rows = [[c.variant, ratio, *mean_ci([r.intervention[ratio] for r in rs])]
            for c, rs in zip(configs, reps) for ratio in INTERVENTION_RATIOS]
    return ExperimentResult(
        tables=[Table("intervention", ["model", "ratio", "task_accuracy", "task_accuracy_ci"], rows)],
        curves=[Curve("intervention_curve", series, "intervention ratio", "task accuracy (%)")])


def _shift(cfg: RunConfig) -> ExperimentResult:
    configs = [cfg.with_(variant=v) for v in ("CEM", "RECEM")]
    reps = [evaluate_runs(r, include=()) for r in run_grid(configs)]
    cols = {k.value: (lambda r, k=k: r.shift_accuracy[k.value]) for k in ALL_SHIFTS}
    return ExperimentResult(tables=[_summary_table("shift", [c.variant for c in configs], reps, cols)])


def _leakage(cfg: RunConfig) -> ExperimentResult:
    configs = [cfg.with_(variant=v, pair_corr=0.0) for v in ("CEM", "RECEM")]
    reps = [evaluate_runs(r, include={"cas", "ois"}, shifts=()) for r in run_grid(configs)]
    cols = {"ois": lambda r: r.ois, "cas": lambda r: r.cas}
    return ExperimentResult(tables=[_summary_table("leakage", [c.variant for c in configs], reps, cols)])


def _consistency(cfg: RunConfig) -> ExperimentResult:
    configs = [cfg.with_(variant=v) for v in ("CEM", "RECEM")]
    reps = [evaluate_runs(r, include={"similarity", "consistency", "variance"}, shifts=())
            for r in run_grid(configs)]
    cols = {"shift_similarity": lambda r: r.shift_similarity.mean,
            "concept_consistency": lambda r: r.consistency_mean,
            "intra_concept_variance": lambda r: float(np.nanmean(r.variance))}
    table = _summary_table("consistency", [c.variant for c in configs], reps, cols)
    first = {c.variant: rs[0] for c, rs in zip(configs, reps)}
    hists = [Histogram("shift_similarity_hist", {v: r.shift_similarity for v, r in first.items()})]
    ks = sorted(next(iter(first.values())).consistency)
    hists += [Histogram(f"concept_{k}_consistency_hist", {v: r.consistency[k] for v, r in first.items()})
              for k in ks]
    return ExperimentResult(tables=[table], histograms=hists)


_RUNNERS = {
    "baselines": _baselines, "ablation": _ablation, "beta_sweep": _beta_sweep,
    "weight_sweep": _weight_sweep, "intervention": _intervention, "shift": _shift,
    "leakage": _leakage, "consistency": _consistency,
}


def run_experiment(name: str, config: RunConfig) -> ExperimentResult:
    if name not in _RUNNERS:
        raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    result = _RUNNERS[name](config)
    result.header = dict(config.items()) | {"experiment": name}
    return result
