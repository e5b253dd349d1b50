"""Evaluation quantities: accuracies, cluster alignment, probe leakage, cosine diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import ConceptModel, ForwardOutput, intervene
from .nn import philox
from .tensor import ShapeError, Tensor

HIST_BINS = 20
MAX_PAIRS = 2000


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def concept_accuracy(p_hat, c_gt) -> float:
    p, c = _arr(p_hat), _arr(c_gt)
    if p.shape != c.shape:
        raise ShapeError(f"predictions {p.shape} vs concept labels {c.shape}")
    return 100.0 * float(np.mean((p >= 0.5) == (c >= 0.5)))


def task_accuracy(logits, y) -> float:
    """Top-1 accuracy in percent; np.argmax resolves ties to the lowest index."""
    z = _arr(logits)
    labels = np.asarray(y).reshape(-1)
    if z.ndim != 2 or z.shape[0] != labels.size:
        raise ShapeError(f"logits {z.shape} vs {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("labels out of range")
    return 100.0 * float(np.mean(z.argmax(axis=1) == labels))


def concept_representation(out: ForwardOutput) -> np.ndarray:
    """[B, K, d] per-concept representation: mixed embeddings, or the scalar used probability."""
    if out.c_mixed is not None:
        return out.c_mixed.data
    return out.p_used.data[:, :, None]


# -- alignment (2-means) -------------------------------------------------------------


def two_means(X: np.ndarray, seed: int = 0, iters: int = 50) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns 0/1 assignments."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    rng = philox(seed, "two_means")
    first = X[rng.integers(n)]
    d2 = np.sum((X - first) ** 2, axis=1)
    if d2.sum() <= 0:
        return np.zeros(n, dtype=np.int64)
    second = X[rng.choice(n, p=d2 / d2.sum())]
    centers = np.stack([first, second])
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if np.array_equal(new, assign) and _ > 0:
            break
        assign = new
        for c in range(2):
            if np.any(assign == c):
                centers[c] = X[assign == c].mean(axis=0)
    return assign


def cluster_alignment(X: np.ndarray, labels, seed: int = 0) -> float:
    """Best-of-two-assignments accuracy of 2-means clusters against binary labels."""
    lab = np.asarray(labels).reshape(-1) >= 0.5
    assign = two_means(np.asarray(X).reshape(len(lab), -1), seed) == 1
    if assign.all() or not assign.any():
        return float(max(lab.mean(), 1 - lab.mean()))
    acc = float(np.mean(assign == lab))
    return max(acc, 1.0 - acc)


def cas(embeddings, c_gt, seed: int = 0) -> float:
    E, C = _arr(embeddings), _arr(c_gt)
    if E.ndim == 2:
        E = E[:, :, None]
    if E.shape[:2] != C.shape:
        raise ShapeError(f"embeddings {E.shape} vs concept labels {C.shape}")
    return 100.0 * float(np.mean([cluster_alignment(E[:, k], C[:, k], seed) for k in range(C.shape[1])]))


# -- leakage (probe impurity) --------------------------------------------------------


def balanced_accuracy(pred, target) -> float:
    pred, target = np.asarray(pred, bool), np.asarray(target, bool)
    return 0.5 * (float(np.mean(pred[target])) + float(np.mean(~pred[~target])))


def _fit_probes(X: np.ndarray, Y: np.ndarray, epochs: int, lr: float) -> np.ndarray:
    """Independent logistic regressions X -> each column of Y, full-batch gradient descent."""
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    W = np.zeros((Xb.shape[1], Y.shape[1]))
    for _ in range(epochs):
        P = 1.0 / (1.0 + np.exp(-np.clip(Xb @ W, -50, 50)))
        W -= lr * Xb.T @ (P - Y) / X.shape[0]
    return W


def _probe_scores(X_tr, Y_tr, X_te, Y_te, epochs, lr) -> np.ndarray:
    mu, sd = X_tr.mean(axis=0), X_tr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    W = _fit_probes((X_tr - mu) / sd, Y_tr, epochs, lr)
    Xt = np.hstack([(X_te - mu) / sd, np.ones((X_te.shape[0], 1))])
    pred = Xt @ W > 0
    return np.array([balanced_accuracy(pred[:, j], Y_te[:, j]) for j in range(Y_te.shape[1])])


@dataclass
class ImpurityResult:
    ois: float
    P: np.ndarray
    O: np.ndarray
    excluded: list[int] = field(default_factory=list)


def impurity(embeddings, c_gt, seed: int = 0, epochs: int = 200, lr: float = 0.5,
             held_out: float = 0.3) -> ImpurityResult:
    """Probe-based impurity: ||P - O||_F / ||O||_F * 100 over concepts seen in both states."""
    E, C = _arr(embeddings), _arr(c_gt)
    if E.ndim == 2:
        E = E[:, :, None]
    if E.shape[:2] != C.shape:
        raise ShapeError(f"embeddings {E.shape} vs concept labels {C.shape}")
    n, K = C.shape
    order = philox(seed, "ois_split").permutation(n)
    n_te = max(1, int(round(held_out * n)))
    te, tr = order[:n_te], order[n_te:]
    Cb = (C >= 0.5).astype(np.float64)
    keep = [k for k in range(K)
            if 0 < Cb[tr, k].sum() < len(tr) and 0 < Cb[te, k].sum() < len(te)]
    excluded = [k for k in range(K) if k not in keep]
    if not keep:
        raise ValueError("no concept occurs in both states on both splits")
    Y_tr, Y_te = Cb[tr][:, keep], Cb[te][:, keep]
    P = np.array([_probe_scores(E[tr, k], Y_tr, E[te, k], Y_te, epochs, lr) for k in keep])
    O = np.array([_probe_scores(Cb[tr, k:k + 1], Y_tr, Cb[te, k:k + 1], Y_te, epochs, lr) for k in keep])
    return ImpurityResult(100.0 * float(np.linalg.norm(P - O) / np.linalg.norm(O)), P, O, excluded)


def ois(embeddings, c_gt, seed: int = 0) -> float:
    return impurity(embeddings, c_gt, seed).ois


# -- cosine diagnostics --------------------------------------------------------------


@dataclass
class SimilaritySummary:
    mean: float
    std: float
    n_pairs: int
    n_skipped: int
    counts: np.ndarray
    edges: np.ndarray

    def histogram_rows(self) -> list[tuple[float, float, int]]:
        return [(float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
                for i in range(len(self.counts))]


def summarize_similarities(sims, n_skipped: int = 0) -> SimilaritySummary:
    s = np.clip(np.asarray(sims, dtype=np.float64), -1.0, 1.0)
    counts, edges = np.histogram(s, bins=HIST_BINS, range=(-1.0, 1.0))
    mean = float(s.mean()) if s.size else float("nan")
    std = float(s.std()) if s.size else float("nan")
    return SimilaritySummary(mean, std, int(s.size), n_skipped, counts, edges)


def rowwise_cosine(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, int]:
    """Cosine of matching rows; rows where either side has zero norm are dropped and counted."""
    na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
    ok = (na > 0) & (nb > 0)
    sims = np.sum(A[ok] * B[ok], axis=1) / (na[ok] * nb[ok])
    return np.clip(sims, -1.0, 1.0), int((~ok).sum())


def _embed(model: ConceptModel, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return concept_representation(model.forward(Tensor(x), mode="eval"))


def cosine_shift_similarity(model: ConceptModel, test, shifted) -> SimilaritySummary:
    if test.features.shape != shifted.features.shape:
        raise ShapeError("shifted split must cover the same samples")
    a, b = _embed(model, test.features), _embed(model, shifted.features)
    n = a.shape[0]
    return summarize_similarities(*rowwise_cosine(a.reshape(n, -1), b.reshape(n, -1)))


def pair_similarities(E: np.ndarray, seed: int = 0, max_pairs: int = MAX_PAIRS) -> tuple[np.ndarray, int]:
    n = E.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    i, j = np.triu_indices(n, 1)
    if i.size > max_pairs:
        pick = np.sort(philox(seed, "pairs").choice(i.size, size=max_pairs, replace=False))
        i, j = i[pick], j[pick]
    return rowwise_cosine(E[i], E[j])


def concept_consistency(embeddings: np.ndarray, c_gt, k: int, seed: int = 0) -> SimilaritySummary:
    active = np.asarray(c_gt)[:, k] >= 0.5
    if active.sum() < 2:
        raise ValueError(f"concept {k} has fewer than 2 active samples")
    return summarize_similarities(*pair_similarities(embeddings[active, k], seed=seed))


def cosine_concept_consistency(model: ConceptModel, dataset, k: int | None = None, seed: int = 0,
                               n_concepts: int = 6) -> dict[int, SimilaritySummary]:
    """Same-concept cross-sample similarity for concept ``k``, or for ``n_concepts`` random ones."""
    E = _embed(model, dataset.features)
    C = dataset.concepts
    K = C.shape[1]
    ks = [k] if k is not None else sorted(philox(seed, "concepts").choice(K, size=min(n_concepts, K),
                                                                           replace=False).tolist())
    return {kk: concept_consistency(E, C, kk, seed) for kk in ks}


def intra_concept_variance(E) -> float:
    """Mean squared distance of each embedding to the empirical mean."""
    E = _arr(E)
    if E.ndim == 1:
        E = E[:, None]
    if E.shape[0] < 2:
        raise ValueError("need at least 2 embeddings")
    return float(np.mean(np.sum((E - E.mean(axis=0)) ** 2, axis=1)))


def intra_concept_variances(embeddings, c_gt) -> np.ndarray:
    """Per-concept variance over active samples; NaN where fewer than 2 are active."""
    E, C = _arr(embeddings), np.asarray(c_gt) >= 0.5
    out = np.full(C.shape[1], np.nan)
    for k in range(C.shape[1]):
        if C[:, k].sum() >= 2:
            out[k] = intra_concept_variance(E[C[:, k], k])
    return out


# -- interventions and aggregation ---------------------------------------------------


def intervention_curve(model: ConceptModel, dataset, ratios, seeds=(0,)) -> dict[float, float]:
    """Mean task accuracy over selection seeds for each intervention ratio, keys ascending."""
    if not getattr(model, "trained", False):
        raise ValueError("intervention curve needs a trained model")
    rs = sorted(float(r) for r in ratios)
    if any(not 0 <= r <= 1 for r in rs):
        raise ValueError("ratios must lie in [0, 1]")
    with T.no_grad():
        out = model.forward(Tensor(dataset.features), mode="eval")
    y, c = dataset.labels, dataset.concepts
    curve = {}
    for r in rs:
        if r == 0:
            curve[r] = task_accuracy(out.logits, y)
            continue
        accs = [task_accuracy(intervene(model, out, c, ratio=r, seed=s), y) for s in seeds]
        curve[r] = float(np.mean(accs))
    return curve


def ci_half_width(values) -> float:
    """1.96 * sample std / sqrt(n); zero for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / np.sqrt(v.size))


@dataclass
class MetricsReport:
    concept_accuracy: float
    task_accuracy: float
    cas: float
    ois: float
    shift_similarity: SimilaritySummary | None
    consistency: dict[int, SimilaritySummary]
    variance: np.ndarray
    intervention: dict[float, float]
    shift_accuracy: dict[str, float] = field(default_factory=dict)
    ci: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("concept_accuracy", "task_accuracy", "cas"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0 <= v <= 100:  # NaN marks a metric that was not computed
                raise ValueError(f"{name} must be a percentage, got {v}")
        if list(self.intervention) != sorted(self.intervention):
            raise ValueError("intervention curve keys must be ascending")

    @property
    def consistency_mean(self) -> float:
        return float(np.mean([s.mean for s in self.consistency.values()])) if self.consistency else float("nan")
