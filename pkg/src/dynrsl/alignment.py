"""Projection heads and the three alignment objectives.

* ITC: symmetric InfoNCE over the batch similarity matrix, where an image
  scores a caption by its best-matching token (max cosine over all fused
  tokens of all streams).
* ITM: a linear classifier scores every (token, caption) pair; the logits
  are averaged over tokens. Negatives are drawn from the ITC similarities.
* ITG: projected image tokens are an attendable prefix for a causal decoder
  that predicts the [DEC]-led caption from its masked token embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoders import (
    EncoderConfig,
    ImageEncoder,
    StreamFusion,
    TextDecoder,
    TextEncoder,
    TokenSequence,
    mask_text,
    pad_batch,
    with_lead,
)
from .errors import ConfigError, ContractError, DegenerateVectorError, ParameterError
from .nn import Linear, Module
from .patchify import DynRslInput, PatchConfig
from .tensor import Tensor
from .vocab import DEC, PAD

# fill value for padded tokens before the patch max; below any cosine
_NO_TOKEN = -3.0


@dataclass
class LossConfig:
    tau: float = 0.07
    w_itc: float = 1.0
    w_itm: float = 1.0
    w_itg: float = 1.0
    mask_ratio: float = 0.3

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if min(self.w_itc, self.w_itm, self.w_itg) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.w_itc, self.w_itm, self.w_itg)


@dataclass
class LossReport:
    itc: float
    itm: float
    itg: float
    total: float
    weights: tuple[float, float, float]
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"itc": self.itc, "itm": self.itm, "itg": self.itg, "total": self.total}


class ProjectionHead(Module):
    """Affine -> ReLU -> affine, applied per token."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_proj: int):
        self.fc1 = Linear(rng, d_in, d_proj)
        self.fc2 = Linear(rng, d_proj, d_proj)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class DynRslModel(Module):
    """All trainable and frozen pieces, built deterministically from the seed."""

    def __init__(self, cfg: EncoderConfig | None = None, patch_cfg: PatchConfig | None = None):
        self.cfg = cfg = cfg or EncoderConfig()
        self.patch_cfg = patch_cfg = patch_cfg or PatchConfig()
        rng = np.random.default_rng(cfg.seed)
        self.vit = ImageEncoder(cfg, patch_cfg, rng)
        self.fusion = StreamFusion(cfg, rng)
        self.text = TextEncoder(cfg, rng)
        self.proj_image = ProjectionHead(rng, cfg.d_model, cfg.d_proj)
        self.proj_text = ProjectionHead(rng, cfg.d_model, cfg.d_proj)
        self.itm_head = Linear(rng, 2 * cfg.d_proj, 1)
        self.decoder = TextDecoder(cfg, rng)
        if cfg.frozen_vit:
            self.vit.set_trainable(False)
        if cfg.frozen_text:
            self.text.set_trainable(False)

    def named_parameters(self, prefix: str = ""):
        for name in ("vit", "fusion", "text", "proj_image", "proj_text", "itm_head", "decoder"):
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    # -------------------------------------------------------------- features

    def stream_features(self, inputs: Sequence[DynRslInput]) -> list[list[Tensor]]:
        return self.vit(inputs)

    def fused_features(self, inputs, stream_feats=None) -> tuple[Tensor, np.ndarray]:
        feats = self.stream_features(inputs) if stream_feats is None else stream_feats
        kinds = [[s.stream_kind for s in inp.streams] for inp in inputs]
        return self.fusion(feats, kinds)

    def project_image(self, z: Tensor) -> Tensor:
        return self.proj_image(z)

    def project_text(self, z: Tensor) -> Tensor:
        return self.proj_text(z)

    def text_cls(self, seqs: Sequence[TokenSequence]) -> Tensor:
        ids, valid = pad_batch(seqs)
        z = self.text(ids, valid)
        return self.project_text(z[:, 0])


# ---------------------------------------------------------------- similarity


def image_text_similarity(h_image: Tensor, h_text: Tensor) -> Tensor:
    """Best cosine between any image token and the caption vector.

    Zero-norm tokens are skipped; if every token is zero the similarity is
    undefined.
    """
    if not np.any(h_text.data):
        raise DegenerateVectorError("caption feature has zero norm")
    keep = np.flatnonzero(np.linalg.norm(h_image.data, axis=-1) > 0)
    if keep.size == 0:
        raise DegenerateVectorError("every image token has zero norm")
    tokens = h_image if keep.size == h_image.shape[0] else h_image[keep]
    cos = T.matmul(T.l2_normalize(tokens), T.reshape(T.l2_normalize(h_text), (-1, 1)))
    best, _ = T.max_rows(T.reshape(cos, (1, -1)))
    return T.reshape(best, ())


def similarity_matrix(h_image: Tensor, valid: np.ndarray, h_text: Tensor) -> Tensor:
    """S[i, j] = best cosine of image i's valid tokens against caption j.

    ``h_image``: (N, T, d) padded tokens, ``valid``: (N, T), ``h_text``: (M, d).
    """
    usable = valid & (np.linalg.norm(h_image.data, axis=-1) > 0)
    if not usable.any(axis=1).all():
        raise DegenerateVectorError("an image has no non-zero tokens")
    safe = T.add(h_image, Tensor((~usable)[..., None].astype(float)))  # padded rows: avoid 0/0
    cos = T.matmul(T.l2_normalize(safe), T.transpose(T.l2_normalize(h_text)))  # (N, T, M)
    cos = T.transpose(cos, (0, 2, 1))  # (N, M, T)
    keep = usable[:, None, :].astype(float)
    cos = T.add(T.mul(cos, Tensor(keep)), Tensor(_NO_TOKEN * (1.0 - keep)))
    best, _ = T.max_rows(cos)
    return best


# ---------------------------------------------------------------- ITC


def itc_loss(sim: Tensor, tau: float) -> Tensor:
    """Mean of the image-to-text and text-to-image InfoNCE losses."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    n = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != n:
        raise ContractError(f"similarity matrix must be square, got {sim.shape}")
    if n < 2:
        raise ContractError("contrastive loss needs at least two pairs")
    logits = T.scale(sim, 1.0 / tau)
    target = np.arange(n)
    i2t = T.cross_entropy(logits, target)
    t2i = T.cross_entropy(T.transpose(logits), target)
    return T.scale(T.add(i2t, t2i), 0.5)


# ---------------------------------------------------------------- ITM


def sample_hard_negatives(sim: np.ndarray, tau: float = 0.07, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """One hard negative caption per image and one hard negative image per caption.

    Candidates j != i are drawn with probability softmax(sim / tau) restricted
    to the off-diagonal entries of row i (captions) or column i (images).
    """
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    if n < 2:
        raise ContractError("hard negative sampling needs at least two pairs")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    off = ~np.eye(n, dtype=bool)

    def draw(matrix):
        p = T.softmax_rows(Tensor(matrix), tau, off).data
        u = rng.random(n)
        cdf = np.cumsum(p, axis=1)
        picks = (cdf < u[:, None]).sum(axis=1)
        # guard against cumulative round-off landing past the last candidate
        picks = np.minimum(picks, n - 1)
        for i in np.flatnonzero(picks == np.arange(n)):
            picks[i] = np.flatnonzero(off[i])[np.argmax(p[i, off[i]])]
        return picks

    text_neg = draw(sim)
    image_neg = draw(sim.T)
    return text_neg, image_neg


def matching_logit(head: Linear, tokens: Tensor, text: Tensor) -> Tensor:
    """Average over tokens of head([token ; text]) for one image-caption pair."""
    t = tokens.shape[0]
    rep = T.mul(Tensor(np.ones((t, 1))), T.reshape(text, (1, -1)))
    per_token = head(T.concat([tokens, rep], axis=1))
    return T.reshape(T.mean(per_token), ())


def itm_logits(head: Linear, h_image: Tensor, valid: np.ndarray, h_text: Tensor, image_idx, text_idx) -> Tensor:
    """Batched :func:`matching_logit` for pairs (image_idx[k], text_idx[k]).

    Because the classifier is affine, the token-averaged logit splits into an
    image term averaged over that image's valid tokens plus a caption term.
    """
    d = h_image.shape[-1]
    w_img, w_txt = head.weight[:d], head.weight[d:]
    tok = T.reshape(T.matmul(h_image, w_img), valid.shape)  # (N, T)
    counts = valid.sum(axis=1).astype(float)
    img_term = T.div(T.tsum(T.mul(tok, Tensor(valid.astype(float))), axis=1), Tensor(counts))
    txt_term = T.reshape(T.matmul(h_text, w_txt), (-1,))
    image_idx = np.asarray(image_idx)
    text_idx = np.asarray(text_idx)
    return T.add(T.add(img_term[image_idx], txt_term[text_idx]), head.bias)


def itm_loss(head: Linear, h_image: Tensor, valid: np.ndarray, h_text: Tensor, text_neg, image_neg) -> Tensor:
    """BCE over N positives, N (image, hard caption) and N (hard image, caption) pairs."""
    n = h_text.shape[0]
    idx = np.arange(n)
    image_idx = np.concatenate([idx, idx, np.asarray(image_neg)])
    text_idx = np.concatenate([idx, np.asarray(text_neg), idx])
    labels = np.concatenate([np.ones(n), np.zeros(2 * n)])
    return T.bce_with_logits(itm_logits(head, h_image, valid, h_text, image_idx, text_idx), labels)


# ---------------------------------------------------------------- ITG


def decoder_inputs(captions: Sequence[TokenSequence], mask_ratio: float, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """[DEC]-led masked input ids, next-token targets, and target weights."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    decs, masked = [], []
    for cap in captions:
        if len(cap) < 2:
            raise ContractError("a caption needs at least one word after the lead token")
        dec = with_lead(cap, DEC)
        decs.append(dec)
        masked.append(mask_text(dec, mask_ratio, rng)[0])
    ids, _ = pad_batch(masked)
    orig, _ = pad_batch(decs)
    targets = np.full_like(orig, PAD)
    targets[:, :-1] = orig[:, 1:]
    weights = (targets > 3).astype(float)
    return ids, targets, weights


def decode_text(model: DynRslModel, prefix: Tensor | None, prefix_valid, ids: np.ndarray) -> Tensor:
    """Next-token logits (N, L, V) for [DEC]-led ``ids`` given image prefix tokens."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    if not (ids[:, 0] == DEC).all():
        raise ContractError("decoder input must start with [DEC]")
    text = model.project_text(model.text.embed(ids))
    return model.decoder(prefix, prefix_valid, text, ids != PAD)


def itg_loss(model: DynRslModel, h_image: Tensor, valid: np.ndarray, captions: Sequence[TokenSequence], mask_ratio: float, seed) -> Tensor:
    ids, targets, weights = decoder_inputs(captions, mask_ratio, seed)
    logits = decode_text(model, h_image, valid, ids)
    return T.cross_entropy(logits, targets, weights)


# ---------------------------------------------------------------- all objectives


@dataclass
class AlignmentBatch:
    """N image inputs and their captions (CLS-led); item i's caption matches image i."""

    inputs: list[DynRslInput]
    captions: list[TokenSequence]
    stream_feats: list[list[Tensor]] | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.captions):
            raise ContractError("batch needs one caption per image")

    def __len__(self):
        return len(self.inputs)


def total_loss(
    model: DynRslModel,
    batch: AlignmentBatch,
    cfg: LossConfig | None = None,
    seed=0,
    negatives: tuple[np.ndarray, np.ndarray] | None = None,
) -> LossReport:
    """Weighted ITC + ITM + ITG. Zero-weight objectives are evaluated without
    recording gradients, so they leave their parameters untouched."""
    cfg = cfg or LossConfig()
    if len(batch) < 2:
        raise ContractError("a batch needs at least two pairs")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask_seed, neg_seed = rng.integers(0, 2**63, size=2)

    fused, valid = model.fused_features(batch.inputs, batch.stream_feats)
    h_image = model.project_image(fused)
    h_text = model.text_cls(batch.captions)
    sim = similarity_matrix(h_image, valid, h_text)

    def run(weight, fn):
        if weight == 0:
            with T.no_grad():
                return fn()
        return fn()

    itc = run(cfg.w_itc, lambda: itc_loss(sim, cfg.tau))
    if negatives is None:
        negatives = sample_hard_negatives(sim.data, cfg.tau, neg_seed)
    itm = run(cfg.w_itm, lambda: itm_loss(model.itm_head, h_image, valid, h_text, *negatives))
    itg = run(cfg.w_itg, lambda: itg_loss(model, h_image, valid, batch.captions, cfg.mask_ratio, mask_seed))

    terms = [T.scale(t, w) for t, w in zip((itc, itm, itg), cfg.weights) if w != 0]
    total = terms[0] if terms else Tensor(0.0)
    for t in terms[1:]:
        total = T.add(total, t)
    return LossReport(itc.item(), itm.item(), itg.item(), total.item(), cfg.weights, total)
