"""Bool/Fuzzy concept bottleneck models, CEM and RECEM forward paths."""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from . import reliability as R
from . import tensor as T
from .nn import Linear, flatten, philox
from .tensor import ShapeError, Tensor


class Variant(str, Enum):
    BOOL_CBM = "BoolCBM"
    FUZZY_CBM = "FuzzyCBM"
    CEM = "CEM"
    RECEM = "RECEM"


@dataclass
class ModelConfig:
    variant: Variant = Variant.RECEM
    K: int = 16
    M: int = 8
    n_in: int = 64
    d: int = 16
    n_hidden: int = 64
    grl_lambda: float = 1.0
    randint_prob: float = 0.25
    alpha: float = 1.0
    lambda_m: float = 0.1
    lambda_cvd: float = 0.05
    lambda_rec: float = 1.0
    beta_max: float = 0.2
    beta_warmup: int = 30
    # separate override for the HSIC weight; None shares the mixup schedule
    hsic_beta_max: float | None = None
    rec_reduction: str = "element"
    # Bool/Fuzzy CBM with the disentanglement and mixup machinery attached
    mechanisms: bool = False
    ema_mean: bool = False
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        for name in ("K", "M", "n_in", "d", "n_hidden", "beta_warmup"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.grl_lambda < 0:
            raise ValueError("grl_lambda must be non-negative")
        if not 0 <= self.randint_prob <= 1:
            raise ValueError("randint_prob must lie in [0, 1]")
        R.LossWeights(self.alpha, self.lambda_m, self.lambda_cvd, self.lambda_rec)
        R.BetaSchedule(self.beta_max, self.beta_warmup)
        if self.hsic_beta_max is not None:
            R.BetaSchedule(self.hsic_beta_max, self.beta_warmup)

    @property
    def uses_embeddings(self) -> bool:
        return self.variant in (Variant.CEM, Variant.RECEM)

    @property
    def has_reliability(self) -> bool:
        return self.variant is Variant.RECEM or (self.mechanisms and not self.uses_embeddings)

    @property
    def weights(self) -> R.LossWeights:
        if self.has_reliability:
            return R.LossWeights(self.alpha, self.lambda_m, self.lambda_cvd, self.lambda_rec)
        return R.LossWeights(self.alpha, 0.0, 0.0, 0.0)

    @property
    def beta_schedule(self) -> R.BetaSchedule:
        return R.BetaSchedule(self.beta_max, self.beta_warmup)

    @property
    def hsic_schedule(self) -> R.BetaSchedule:
        b = self.beta_max if self.hsic_beta_max is None else self.hsic_beta_max
        return R.BetaSchedule(b, self.beta_warmup)

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append((f.name, v.value if isinstance(v, Variant) else format_value(v)))
        return out


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


@dataclass
class ForwardOutput:
    p_hat: Tensor
    p_used: Tensor
    c_plus: Tensor
    c_minus: Tensor
    c_mixed: Tensor
    h: Tensor
    f_input: Tensor
    logits: Tensor
    c_true: Tensor | None = None
    z_hat: Tensor | None = None
    h_rec: Tensor | None = None
    adv_probs: Tensor | None = None
    c_aligned: Tensor | None = None
    p_aligned: Tensor | None = None
    logits_mix: Tensor | None = None
    bank: R.SemanticMeanBank | None = None
    mode: str = "eval"


class ConceptModel:
    """Holds the parameters of one variant and runs its forward pass."""

    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        K, d, nh = cfg.K, cfg.d, cfg.n_hidden
        s = cfg.seed
        self.backbone = [Linear(cfg.n_in, nh, s, "backbone.0"), Linear(nh, nh, s, "backbone.1")]
        # one linear map to K*d outputs is K independent per-concept maps
        self.phi_pos = Linear(nh, K * d, s, "phi_pos")
        self.phi_neg = Linear(nh, K * d, s, "phi_neg")
        self.scorer = Linear(2 * d, 1, s, "scorer")
        self.predictor = Linear(K * d if cfg.uses_embeddings else K, cfg.M, s, "predictor")
        self.dis_encoder = self.adversary = self.decoder = None
        if cfg.has_reliability:
            self.dis_encoder = Linear(nh, K * d, s, "dis_encoder")
            self.adversary = Linear(K * d, cfg.M, s, "adversary")
            self.decoder = Linear(2 * K * d, nh, s, "decoder")
        self.bank: R.SemanticMeanBank | None = None
        self.trained = False

    def layers(self) -> list[Linear]:
        out = [*self.backbone, self.phi_pos, self.phi_neg, self.scorer, self.predictor]
        return out + [m for m in (self.dis_encoder, self.adversary, self.decoder) if m is not None]

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for layer in self.layers():
            params.update(layer.parameters())
        return params

    # -- pieces ----------------------------------------------------------------------
    def encode(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.config.n_in:
            raise ShapeError(f"expected [B, {self.config.n_in}] features, got {x.shape}")
        return self.backbone[1](T.relu(self.backbone[0](x)))

    def embed_pair(self, h: Tensor) -> tuple[Tensor, Tensor]:
        B = h.shape[0]
        K, d = self.config.K, self.config.d
        return self.phi_pos(h).reshape(B, K, d), self.phi_neg(h).reshape(B, K, d)

    def score(self, c_plus: Tensor, c_minus: Tensor) -> Tensor:
        B, K, d = c_plus.shape
        pair = T.concat([c_plus, c_minus], axis=2).reshape(B * K, 2 * d)
        return T.sigmoid(self.scorer(pair).reshape(B, K))

    def predict_label(self, c_flat: Tensor) -> Tensor:
        return self.predictor(c_flat)

    def bottleneck(self, p: Tensor, c_plus: Tensor, c_minus: Tensor) -> tuple[Tensor, Tensor]:
        """(mixed embeddings, label-predictor input) for the configured variant."""
        c_mixed = mix(p, c_plus, c_minus)
        v = self.config.variant
        if v is Variant.BOOL_CBM:
            return c_mixed, Tensor((p.data >= 0.5).astype(np.float64))
        if v is Variant.FUZZY_CBM:
            return c_mixed, p
        return c_mixed, flatten(c_mixed)

    # -- full pass ---------------------------------------------------------------------
    def forward(self, x, c_gt=None, mode: str = "eval", beta: float = 0.0,
                hsic_beta: float | None = None, rng: np.random.Generator | None = None) -> ForwardOutput:
        cfg = self.config
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if mode == "eval":
            # labels never enter an eval pass
            c_gt = None
        elif c_gt is None and (cfg.has_reliability or cfg.randint_prob > 0):
            raise ValueError("train-mode forward needs ground-truth concepts")
        mu = None if c_gt is None else _binary_mask(c_gt, (x.shape[0], cfg.K))

        h = self.encode(x)
        c_plus, c_minus = self.embed_pair(h)
        p_hat = self.score(c_plus, c_minus)
        p_used = p_hat
        if mode == "train" and cfg.randint_prob > 0:
            rng = rng if rng is not None else philox(cfg.seed, "randint")
            swap = (rng.random(mu.shape) < cfg.randint_prob).astype(np.float64)
            p_used = p_hat * Tensor(1.0 - swap) + Tensor(mu * swap)
        c_mixed, f_in = self.bottleneck(p_used, c_plus, c_minus)
        out = ForwardOutput(p_hat=p_hat, p_used=p_used, c_plus=c_plus, c_minus=c_minus,
                            c_mixed=c_mixed, h=h, f_input=f_in, logits=self.predict_label(f_in), mode=mode)
        if not cfg.has_reliability:
            return out

        out.z_hat = R.dis_encode(self.dis_encoder, h, cfg.K, cfg.d)
        out.adv_probs = R.adversary(self.adversary, out.z_hat, cfg.grl_lambda)
        if mode == "eval":
            return out
        out.c_true = true_embedding(mu, c_plus, c_minus)
        c_true_flat = flatten(out.c_true)
        out.h_rec = R.decode(self.decoder, c_true_flat, out.z_hat)
        batch_bank = R.semantic_mean(c_plus, mu)
        if cfg.ema_mean:
            if self.bank is None:
                self.bank = R.SemanticMeanBank(batch_bank.means, batch_bank.counts, batch_bank.defined, ema_decay=0.9)
            else:
                self.bank.update(batch_bank)
            out.bank = self.bank
        else:
            out.bank = batch_bank
        if cfg.uses_embeddings:
            out.c_aligned = R.align(c_plus, c_mixed, mu, out.bank, beta)
            out.logits_mix = self.predict_label(flatten(out.c_aligned))
        else:
            out.p_aligned = R.align_probs(p_hat, p_used, mu, beta)
            if cfg.variant is Variant.BOOL_CBM:
                f_mix = Tensor((out.p_aligned.data >= 0.5).astype(np.float64))
            else:
                f_mix = out.p_aligned
            out.logits_mix = self.predict_label(f_mix)
        return out

    def __call__(self, *args, **kwargs) -> ForwardOutput:
        return self.forward(*args, **kwargs)


def _binary_mask(c_gt, shape) -> np.ndarray:
    mu = np.asarray(c_gt, dtype=np.float64)
    if mu.shape != tuple(shape):
        raise ShapeError(f"concept labels of shape {mu.shape}, expected {tuple(shape)}")
    if not np.all((mu == 0) | (mu == 1)):
        raise ValueError("concept mask must be binary")
    return mu


def mix(p: Tensor, c_plus: Tensor, c_minus: Tensor) -> Tensor:
    """p * c_plus + (1 - p) * c_minus for each (sample, concept)."""
    if p.shape != c_plus.shape[:2] or c_plus.shape != c_minus.shape:
        raise ShapeError(f"mix: p {p.shape}, c+ {c_plus.shape}, c- {c_minus.shape}")
    if np.any(p.data < 0) or np.any(p.data > 1):
        raise ValueError("mix: probabilities outside [0, 1]")
    B, K = p.shape
    w = p.reshape(B, K, 1)
    return w * c_plus + (1.0 - w) * c_minus


def true_embedding(mu, c_plus: Tensor, c_minus: Tensor) -> Tensor:
    m = _binary_mask(mu, c_plus.shape[:2])[:, :, None]
    return c_plus * Tensor(m) + c_minus * Tensor(1.0 - m)


def intervene(model: ConceptModel, output: ForwardOutput, c_gt, mask=None, ratio: float | None = None,
              seed: int = 0) -> Tensor:
    """Overwrite selected concept probabilities with ground truth and recompute logits.

    ``mask`` ([K] or [B, K] binary) picks the concepts directly; otherwise
    ``ratio`` picks floor(ratio*K) concepts uniformly at random per sample.
    """
    B, K = output.p_hat.shape
    mu = np.asarray(c_gt, dtype=np.float64)
    if mu.shape != (B, K):
        raise ShapeError(f"concept labels {mu.shape} vs predictions {(B, K)}")
    if mask is not None:
        sel = np.asarray(mask, dtype=np.float64)
        if sel.shape == (K,):
            sel = np.broadcast_to(sel, (B, K))
        if sel.shape != (B, K):
            raise ShapeError(f"intervention mask {sel.shape} does not match {K} concepts")
    else:
        if ratio is None or not 0 <= ratio <= 1:
            raise ValueError("intervention ratio must lie in [0, 1]")
        n = int(np.floor(ratio * K + 1e-12))
        order = philox(seed, "intervene").random((B, K)).argsort(axis=1)
        sel = np.zeros((B, K))
        np.put_along_axis(sel, order[:, :n], 1.0, axis=1)
    with T.no_grad():
        p = Tensor(output.p_hat.data * (1 - sel) + mu * sel)
        _, f_in = model.bottleneck(p, output.c_plus.detach(), output.c_minus.detach())
        return model.predict_label(f_in)
