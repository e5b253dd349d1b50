"""Concept-level disentanglement, HSIC, concept mixup and the combined objective."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, grl, nll_from_probs, softmax_cross_entropy
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class BetaSchedule:
    beta_max: float = 0.2
    warmup_epochs: int = 30
    shape: str = "linear"

    def __post_init__(self):
        if not 0 <= self.beta_max <= 1:
            raise ValueError("beta_max must lie in [0, 1]")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be positive")
        if self.shape != "linear":
            raise ValueError(f"unsupported beta schedule shape {self.shape!r}")


def beta_at(schedule: BetaSchedule, epoch: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return schedule.beta_max * min(1.0, epoch / schedule.warmup_epochs)


class _ConstantReplay:
    def __init__(self):
        self.values: list = []
        self.pos = 0

    def take(self, value):
        if self.pos == len(self.values):
            self.values.append(value)
        out = self.values[self.pos]
        self.pos += 1
        return out

    def rewind(self) -> None:
        self.pos = 0


_replay: _ConstantReplay | None = None


def _const(value):
    return value if _replay is None else _replay.take(value)


def constant(x: Tensor) -> Tensor:
    """Detached copy of ``x``; replayed inside :func:`frozen_constants`."""
    return Tensor(_const(x.data.copy()))


@contextmanager
def frozen_constants():
    """Replay the stop-gradient constants of the first forward pass on every later one.

    Kernel bandwidths, per-batch concept means and detached targets carry no gradient. Finite
    differences only agree with backprop if they stay fixed, so call
    ``rewind()`` on the yielded object at the start of each evaluation.
    """
    global _replay
    prev, _replay = _replay, _ConstantReplay()
    try:
        yield _replay
    finally:
        _replay = prev


# -- disentanglement -----------------------------------------------------------------


def dis_encode(encoder: Linear, h: Tensor, K: int, d: int) -> Tensor:
    if encoder.n_out != K * d:
        raise ShapeError(f"disentanglement encoder emits {encoder.n_out} dims, expected {K * d}")
    return encoder(h)


def adversary(head: Linear, z_hat: Tensor, grl_lambda: float) -> Tensor:
    """Class probabilities predicted from the reversed disentangled vector."""
    return T.softmax(head(grl(z_hat, grl_lambda)))


def _centered_gram(X: Tensor) -> Tensor:
    # mean-centering first keeps the statistic translation invariant in floating point
    Xc = X - X.mean(axis=0, keepdims=True)
    sq = (Xc * Xc).sum(axis=1, keepdims=True)
    d2 = sq + sq.T - 2.0 * (Xc @ Xc.T)
    # the expanded form leaves ~1e-16 relative residue where points coincide; snap those
    # values to exactly 0 (value only, the gradient path is unchanged)
    tol = 1e-12 * (sq.data + sq.data.T)
    snapped = np.where(d2.data <= tol, 0.0, d2.data)
    d2 = d2 + Tensor(snapped - d2.data)
    dist = np.sqrt(snapped[np.triu_indices(X.shape[0], 1)])
    sigma = _const(max(float(np.median(dist)), 1e-8))
    K = T.exp(d2 * (-1.0 / (2.0 * sigma * sigma)))
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean(keepdims=True)


def hsic(X: Tensor, Y: Tensor) -> Tensor:
    """Biased HSIC with Gaussian kernels and median-distance bandwidths.

    tr(K H L H) / (B-1)^2, written as <HKH, HLH> so that swapping the
    arguments gives the identical sum. Bandwidths are treated as constants.
    """
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"hsic needs [B, p] and [B, q] inputs, got {X.shape}, {Y.shape}")
    B = X.shape[0]
    if B < 4:
        raise ValueError("hsic needs at least 4 samples")
    return (_centered_gram(X) * _centered_gram(Y)).sum() * (1.0 / (B - 1) ** 2)


def hsic_value(X: np.ndarray, Y: np.ndarray) -> float:
    with T.no_grad():
        return hsic(Tensor(X), Tensor(Y)).item()


def loss_cvd(adv_probs: Tensor, y, z_hat: Tensor, c_true_flat: Tensor, beta: float) -> Tensor:
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    ce = nll_from_probs(adv_probs, y)
    if beta == 0:
        return ce
    return ce + beta * hsic(z_hat, c_true_flat)


def decode(decoder: Linear, c_true_flat: Tensor, z_hat: Tensor) -> Tensor:
    out = decoder(T.concat([c_true_flat, z_hat], axis=1))
    return out


def loss_rec(h: Tensor, h_rec: Tensor, reduction: str = "sample") -> Tensor:
    """Per-sample L1 reconstruction error averaged over the batch.

    ``reduction="element"`` additionally divides by the latent width, i.e. the
    mean absolute error over all entries.
    """
    if h.shape != h_rec.shape:
        raise ShapeError(f"reconstruction shape {h_rec.shape} vs latent {h.shape}")
    if reduction not in ("sample", "element"):
        raise ValueError(f"unknown reduction {reduction!r}")
    n = h.shape[0] if reduction == "sample" else h.data.size
    return T.l1_norm(h - h_rec) * (1.0 / n)


# -- concept mixup -------------------------------------------------------------------


@dataclass
class SemanticMeanBank:
    """Per-concept mean active embedding; ``defined[k]`` is False when no sample had k active."""

    means: np.ndarray  # [K, d]
    counts: np.ndarray  # [K]
    defined: np.ndarray  # [K] bool
    ema_decay: float | None = None

    def update(self, other: "SemanticMeanBank") -> None:
        """Fold a fresh batch bank into this one (EMA mode)."""
        if self.ema_decay is None:
            self.means, self.counts, self.defined = other.means, other.counts, other.defined
            return
        a = self.ema_decay
        both = self.defined & other.defined
        only_new = other.defined & ~self.defined
        self.means = self.means.copy()
        self.means[both] = a * self.means[both] + (1 - a) * other.means[both]
        self.means[only_new] = other.means[only_new]
        self.counts = self.counts + other.counts
        self.defined = self.defined | other.defined


def semantic_mean(c_plus: Tensor | np.ndarray, c_gt) -> SemanticMeanBank:
    """Batch mean of active embeddings per concept; no gradient flows through it."""
    cp = c_plus.data if isinstance(c_plus, Tensor) else np.asarray(c_plus, dtype=np.float64)
    mu = np.asarray(c_gt, dtype=np.float64)
    counts = mu.sum(axis=0)
    sums = np.einsum("bk,bkd->kd", mu, cp)
    defined = counts > 0
    means = np.zeros_like(sums)
    means[defined] = sums[defined] / counts[defined, None]
    means, counts, defined = _const((means, counts, defined))
    return SemanticMeanBank(means=means, counts=counts.astype(np.int64), defined=defined)


def align(c_plus: Tensor, c_mixed: Tensor, c_gt, bank: SemanticMeanBank, beta: float) -> Tensor:
    """Pull active embeddings toward their concept mean; inactive rows keep the mixture."""
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    mu = np.asarray(c_gt, dtype=np.float64)
    B, K, d = c_plus.shape
    if mu.shape != (B, K):
        raise ShapeError(f"mask shape {mu.shape} vs embeddings {c_plus.shape}")
    act_def = (mu * bank.defined[None, :])[:, :, None]
    act_undef = (mu * ~bank.defined[None, :])[:, :, None]
    inactive = (1.0 - mu)[:, :, None]
    target = Tensor(act_def * (beta * bank.means[None, :, :]))
    pulled = c_plus * Tensor(act_def * (1.0 - beta) + act_undef)
    return target + pulled + c_mixed * Tensor(inactive)


def align_probs(p_hat: Tensor, p_used: Tensor, c_gt, beta: float) -> Tensor:
    """Probability-space analogue of :func:`align` for scalar-bottleneck models."""
    mu = np.asarray(c_gt, dtype=np.float64)
    counts = mu.sum(axis=0)
    defined = counts > 0
    means = np.zeros(mu.shape[1])
    means[defined] = (mu * p_hat.data).sum(axis=0)[defined] / counts[defined]
    means = _const(means)
    act_def = mu * defined[None, :]
    act_undef = mu * ~defined[None, :]
    target = Tensor(act_def * beta * means[None, :])
    return target + p_hat * Tensor(act_def * (1.0 - beta) + act_undef) + p_used * Tensor(1.0 - mu)


def loss_mixup(predictor: Linear, c_aligned_flat: Tensor, y) -> Tensor:
    return softmax_cross_entropy(predictor(c_aligned_flat), y)


# -- objective -----------------------------------------------------------------------


@dataclass
class LossWeights:
    alpha: float = 1.0
    lambda_m: float = 0.1
    lambda_cvd: float = 0.05
    lambda_rec: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "lambda_m", "lambda_cvd", "lambda_rec"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    task: float
    concept: float
    mixup: float
    cvd: float
    rec: float
    total: float
    total_tensor: Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("task", "concept", "mixup", "cvd", "rec", "total")}


def total_loss(task, concept, mixup, cvd, rec, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the five terms. Missing terms (None) count as 0."""
    parts = {"task": task, "concept": concept, "mixup": mixup, "cvd": cvd, "rec": rec}
    coeff = {"task": 1.0, "concept": weights.alpha, "mixup": weights.lambda_m,
             "cvd": weights.lambda_cvd, "rec": weights.lambda_rec}
    total: Tensor | float = 0.0
    for name, term in parts.items():
        if term is None:
            continue
        if coeff[name] < 0:
            raise ValueError(f"negative weight for {name}")
        total = total + term * coeff[name]
    if not isinstance(total, Tensor):
        total = Tensor(float(total))
    vals = {k: (v.item() if isinstance(v, Tensor) else float(v or 0.0)) for k, v in parts.items()}
    return LossBreakdown(**vals, total=total.item(), total_tensor=total)
