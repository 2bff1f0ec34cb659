"""Training loop (AdamW with cosine annealing), retrieval metrics and
feature-spread statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .alignment import AlignmentBatch, DynRslModel, LossConfig, LossReport, similarity_matrix, total_loss
from .encoders import TokenSequence
from .errors import ConfigError, ContractError, NonFiniteError
from .patchify import DynRslInput
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-4
    steps: int = 200
    batch_size: int = 16
    tau: float = 0.07
    w_itc: float = 1.0
    w_itm: float = 1.0
    w_itg: float = 1.0
    mask_ratio: float = 0.3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_subset_size: int = 3
    max_regions: int = 32
    n_view: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "steps", "batch_size", "tau", "max_subset_size", "n_view"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.max_regions < 0:
            raise ConfigError("weight_decay and max_regions must be non-negative")
        self.loss_config()  # validates weights, tau and mask ratio

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau, self.w_itc, self.w_itm, self.w_itg, self.mask_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(step: int, total: int, base: float) -> float:
    """Cosine annealing from ``base`` at step 0 to zero at the last step."""
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / (total - 1)))


class AdamW:
    """Adam with decoupled weight decay. Parameters without a gradient in a
    step are left untouched (no moment update, no decay)."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.t[i] += 1
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t[i])
            vhat = self.v[i] / (1 - self.b2 ** self.t[i])
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class TrainingDiverged(NonFiniteError):
    def __init__(self, step: int, components: dict, cause: str = ""):
        detail = ", ".join(f"{k}={v}" for k, v in components.items()) or "no components"
        super().__init__(f"non-finite loss at step {step} ({detail}){': ' + cause if cause else ''}")
        self.step = step
        self.components = components


@dataclass
class TrainResult:
    reports: list[LossReport]
    lrs: list[float]

    @property
    def totals(self) -> list[float]:
        return [r.total for r in self.reports]


def cached_stream_features(model: DynRslModel, inputs: Sequence[DynRslInput], chunk: int = 32):
    """Encoder outputs per sample, computed once. Only valid while the image
    encoder is frozen."""
    if not model.cfg.frozen_vit:
        raise ContractError("stream features can only be cached for a frozen image encoder")
    out = []
    with T.no_grad():
        for start in range(0, len(inputs), chunk):
            out.extend(model.stream_features(inputs[start : start + chunk]))
    return out


def train(
    model: DynRslModel,
    inputs: Sequence[DynRslInput],
    captions: Sequence[TokenSequence],
    cfg: TrainConfig | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Minimize the weighted alignment loss with AdamW and a cosine schedule.

    Batches are drawn from a seeded permutation per epoch. With a frozen image
    encoder its stream features are computed once and reused.
    """
    cfg = cfg or TrainConfig()
    if len(inputs) != len(captions):
        raise ContractError("need one caption per input")
    if len(inputs) < 2:
        raise ContractError("training needs at least two pairs")
    loss_cfg = cfg.loss_config()
    feats = cached_stream_features(model, inputs) if model.cfg.frozen_vit else None
    opt = AdamW(model.trainable_parameters(), (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(inputs))
    order: list[int] = []
    reports, lrs = [], []
    for step in range(cfg.steps):
        if len(order) < bs:
            order = list(rng.permutation(len(inputs)))
        idx, order = order[:bs], order[bs:]
        batch = AlignmentBatch(
            [inputs[i] for i in idx],
            [captions[i] for i in idx],
            None if feats is None else [feats[i] for i in idx],
        )
        try:
            report = total_loss(model, batch, loss_cfg, seed=rng)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, {}, str(exc)) from exc
        parts = report.as_dict()
        if not all(math.isfinite(v) for v in parts.values()):
            raise TrainingDiverged(step, parts)
        opt.zero_grad()
        T.backward(report.tensor)
        lr = cosine_lr(step, cfg.steps, cfg.lr)
        opt.step(lr)
        opt.zero_grad()
        report.tensor = None
        reports.append(report)
        lrs.append(lr)
        if on_step is not None:
            on_step(step, report)
    return TrainResult(reports, lrs)


# ---------------------------------------------------------------- evaluation


@dataclass
class RetrievalMetrics:
    recall_at_1: float
    recall_at_5: float
    mean_rank: float
    image_to_text: dict = field(default_factory=dict)
    text_to_image: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def ranks_of_diagonal(sim: np.ndarray) -> np.ndarray:
    """1-based rank of S[i, i] within row i. Ties count against the match:
    an equal score at a lower index ranks ahead of it."""
    sim = np.asarray(sim)
    m = sim.shape[0]
    diag = sim[np.arange(m), np.arange(m)][:, None]
    ahead = (sim > diag) | ((sim == diag) & (np.arange(m)[None, :] < np.arange(m)[:, None]))
    return 1 + ahead.sum(axis=1)


def _direction(ranks: np.ndarray) -> dict:
    return {
        "recall_at_1": float(np.mean(ranks <= 1)),
        "recall_at_5": float(np.mean(ranks <= 5)),
        "mean_rank": float(np.mean(ranks)),
    }


def metrics_from_similarity(sim: np.ndarray) -> RetrievalMetrics:
    """Both retrieval directions over an M x M image-by-text score matrix, averaged."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] < 2:
        raise ContractError(f"need a square similarity matrix with M >= 2, got {sim.shape}")
    i2t = _direction(ranks_of_diagonal(sim))
    t2i = _direction(ranks_of_diagonal(sim.T))
    avg = {k: 0.5 * (i2t[k] + t2i[k]) for k in i2t}
    return RetrievalMetrics(avg["recall_at_1"], avg["recall_at_5"], avg["mean_rank"], i2t, t2i)


def similarity_scores(model: DynRslModel, inputs, captions, stream_feats=None) -> np.ndarray:
    with T.no_grad():
        fused, valid = model.fused_features(inputs, stream_feats)
        return similarity_matrix(model.project_image(fused), valid, model.text_cls(captions)).data


def evaluate_retrieval(model: DynRslModel, inputs, captions, stream_feats=None) -> RetrievalMetrics:
    return metrics_from_similarity(similarity_scores(model, inputs, captions, stream_feats))


def pooled_image_features(model: DynRslModel, inputs, stream_feats=None) -> np.ndarray:
    """Projected image tokens averaged over each sample's valid tokens, (M, d_proj)."""
    with T.no_grad():
        fused, valid = model.fused_features(inputs, stream_feats)
        h = model.project_image(fused).data
    w = valid[..., None].astype(float)
    return (h * w).sum(axis=1) / w.sum(axis=1)


def collapse_stats(features: np.ndarray) -> dict:
    """Mean cosine over distinct pairs and the smallest per-dimension variance."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape[0] < 2:
        raise ContractError("need at least two feature vectors")
    u = f / np.linalg.norm(f, axis=1, keepdims=True)
    cos = u @ u.T
    off = ~np.eye(len(f), dtype=bool)
    return {"mean_pairwise_cosine": float(cos[off].mean()), "min_variance": float(f.var(axis=0).min())}


def region_probe(model: DynRslModel, inputs: Sequence[DynRslInput], captions) -> np.ndarray:
    """Change in each matched pair's similarity when region streams are removed."""
    full = similarity_scores(model, inputs, captions)
    reduced = similarity_scores(model, [inp.global_only() for inp in inputs], captions)
    return np.diag(full) - np.diag(reduced)
