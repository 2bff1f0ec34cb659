"""Finite-difference check of the full alignment loss on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .alignment import AlignmentBatch, DynRslModel, LossConfig, similarity_matrix, sample_hard_negatives, total_loss
from .data import model_inputs, retrieval_corpus
from .encoders import EncoderConfig, tokenize
from .patchify import PatchConfig

TINY_PATCH = PatchConfig(global_side=16, region_side=8, patch_px=4, token_budget=32)


@dataclass
class GradcheckResult:
    max_rel_error: float
    per_parameter: dict[str, float] = field(default_factory=dict)

    @property
    def n_checked(self) -> int:
        return len(self.per_parameter)

    def groups(self) -> dict[str, float]:
        """Worst error per top-level component (vit, fusion, text, ...)."""
        out: dict[str, float] = {}
        for name, err in self.per_parameter.items():
            key = name.split(".")[0]
            out[key] = max(out.get(key, 0.0), err)
        return out


def tiny_model(seed: int = 0, init_scale: float | None = 0.5) -> DynRslModel:
    """d_model 16, two layers, every component trainable.

    With ``init_scale`` set, weights are redrawn from uniform(-s, s) and the
    layer-norm affine terms are jittered, so gradients are large enough to be
    checked against a difference quotient.
    """
    cfg = EncoderConfig(d_model=16, n_layers=2, n_heads=2, d_proj=8, frozen_vit=False, seed=seed)
    model = DynRslModel(cfg, TINY_PATCH)
    if init_scale is not None:
        rng = np.random.default_rng(seed + 1)
        for name, p in model.named_parameters():
            if name.endswith(("gamma", "beta")):
                p.data += rng.uniform(-0.2, 0.2, p.shape)
            else:
                p.data[...] = rng.uniform(-init_scale, init_scale, p.shape)
    return model


def run_gradcheck(
    seed: int = 0,
    n_pairs: int = 3,
    samples_per_param: int = 8,
    eps: float = 1e-5,
    init_scale: float | None = 0.5,
) -> GradcheckResult:
    """Compare analytic and central-difference gradients of ``total_loss``
    for every parameter tensor. Hard negatives and masking are held fixed so
    the loss is a deterministic function of the parameters."""
    model = tiny_model(seed, init_scale)
    scenes = retrieval_corpus(n_pairs, seed=seed, canvas=32)
    inputs = model_inputs(scenes, TINY_PATCH)
    batch = AlignmentBatch(inputs, [tokenize(s.caption, model.cfg.vocab) for s in scenes])
    cfg = LossConfig()
    with T.no_grad():
        fused, valid = model.fused_features(inputs)
        sim = similarity_matrix(model.project_image(fused), valid, model.text_cls(batch.captions)).data
    negatives = sample_hard_negatives(sim, cfg.tau, seed)

    def loss():
        return total_loss(model, batch, cfg, seed=seed, negatives=negatives).tensor

    rng = np.random.default_rng(seed)
    per = {}
    for name, p in model.named_parameters():
        per[name] = T.finite_diff_check(loss, [p], eps, samples_per_param, rng)
    return GradcheckResult(max(per.values()), per)
