"""Mini-batch SGD training with best-on-validation selection."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import reliability as R
from . import tensor as T
from .config import RunConfig
from .models import ConceptModel, ForwardOutput
from .nn import SgdState, clip_grad_norm, binary_cross_entropy, flatten, philox, sgd_step, softmax_cross_entropy
from .synthdata import SynDataset, generate

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    val_task_accuracy: float
    val_concept_accuracy: float
    beta: float
    seconds: float


@dataclass
class RunLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_task_accuracy: float = float("nan")

    def trace(self, key: str) -> list[float]:
        return [rec.losses[key] for rec in self.epochs]


@dataclass
class TrainResult:
    model: ConceptModel
    log: RunLog
    config: RunConfig
    seed: int


def step_losses(model: ConceptModel, out: ForwardOutput, y, c_gt, hsic_beta: float) -> R.LossBreakdown:
    cfg = model.config
    task = softmax_cross_entropy(out.logits, y)
    concept = binary_cross_entropy(out.p_hat, c_gt)
    mixup = cvd = rec = None
    if cfg.has_reliability:
        mixup = softmax_cross_entropy(out.logits_mix, y)
        cvd = R.loss_cvd(out.adv_probs, y, out.z_hat, flatten(out.c_true), hsic_beta)
        rec = R.loss_rec(R.constant(out.h), out.h_rec, cfg.rec_reduction)
    return R.total_loss(task, concept, mixup, cvd, rec, cfg.weights)


def predict(model: ConceptModel, x: np.ndarray) -> ForwardOutput:
    with T.no_grad():
        return model.forward(T.Tensor(x), mode="eval")


def quick_accuracy(model: ConceptModel, ds: SynDataset) -> tuple[float, float]:
    out = predict(model, ds.features)
    task = 100.0 * float(np.mean(out.logits.data.argmax(axis=1) == ds.labels))
    concept = 100.0 * float(np.mean((out.p_hat.data >= 0.5) == (ds.concepts == 1)))
    return task, concept


def snapshot(model: ConceptModel) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.parameters().items()}


def restore(model: ConceptModel, state: dict[str, np.ndarray]) -> None:
    for k, v in model.parameters().items():
        v.data = state[k].copy()
        v.grad = None


def train(config: RunConfig, seed: int, data: tuple[SynDataset, SynDataset] | None = None) -> TrainResult:
    """Train one model; the returned model holds the best-validation parameters."""
    if data is None:
        train_ds, val_ds, _ = generate(config.data_spec())
    else:
        train_ds, val_ds = data
    mcfg = config.model_config(seed)
    model = ConceptModel(mcfg)
    log = RunLog()
    if config.epochs == 0:
        return TrainResult(model, log, config, seed)

    params = model.parameters()
    opt = SgdState(config.lr, config.momentum)
    x_all, c_all, y_all = train_ds.features, train_ds.concepts, train_ds.labels
    n = len(train_ds)
    best_state, best_acc = None, -np.inf
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        beta = R.beta_at(mcfg.beta_schedule, epoch)
        hsic_beta = R.beta_at(mcfg.hsic_schedule, epoch)
        order = philox(seed, "shuffle", epoch).permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            out = model.forward(T.Tensor(x_all[idx]), c_all[idx], mode="train", beta=beta,
                                rng=philox(seed, "randint", epoch, step))
            parts = step_losses(model, out, y_all[idx], c_all[idx], hsic_beta)
            if not np.isfinite(parts.total):
                raise DivergenceError(
                    f"loss diverged at epoch {epoch}, step {step}: {parts.as_dict()}")
            parts.total_tensor.backward()
            if config.grad_clip is not None:
                clip_grad_norm(params, config.grad_clip)
            sgd_step(params, opt, allow_missing=True)
            for k, v in parts.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        val_task, val_concept = quick_accuracy(model, val_ds)
        log.epochs.append(EpochRecord(epoch, {k: v / n_batches for k, v in sums.items()},
                                      val_task, val_concept, beta, time.perf_counter() - t0))
        if val_task > best_acc:
            best_acc, best_state = val_task, snapshot(model)
            log.best_epoch, log.best_val_task_accuracy = epoch, val_task
        logger.debug("epoch %d %s val_task=%.2f", epoch, log.epochs[-1].losses, val_task)
    restore(model, best_state)
    model.trained = True
    return TrainResult(model, log, config, seed)
