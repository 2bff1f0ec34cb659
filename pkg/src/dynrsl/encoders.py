"""Image encoder (per stream), cross-stream fusion, text encoder and the
causal decoder used for image-guided generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError, TokenizationError
from .nn import Block, LayerNorm, Linear, Module, MultiHeadAttention, causal_mask, key_mask, pad_stack, uniform_param
from .patchify import STREAM_KINDS, DynRslInput, PatchConfig
from .tensor import Tensor
from .vocab import CLS, DEC, DEFAULT_VOCAB, MASK, PAD, SPECIAL_TOKENS

TOKEN_KINDS = ("PAD", "CLS", "DEC", "MASK")


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_text_len: int = 32
    vocab: tuple = DEFAULT_VOCAB
    frozen_vit: bool = True
    frozen_text: bool = False
    d_proj: int = 32
    ff_mult: int = 2
    n_dec_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.d_proj % self.n_heads:
            raise ConfigError(f"d_proj {self.d_proj} is not divisible by n_heads {self.n_heads}")
        if self.vocab[:4] != SPECIAL_TOKENS:
            raise ConfigError("vocabulary must begin with the four special tokens")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


# ---------------------------------------------------------------- text tokens


@dataclass
class TokenSequence:
    ids: list[int]
    kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.kinds:
            self.kinds = [TOKEN_KINDS[i] if i < 4 else "word" for i in self.ids]
        if len(self.ids) != len(self.kinds):
            raise ContractError("ids and kinds differ in length")
        for pos, kind in enumerate(self.kinds):
            if kind in ("CLS", "DEC") and pos != 0:
                raise ContractError(f"{kind} may only appear at position 0")

    def __len__(self):
        return len(self.ids)


def tokenize(text: str, vocab: Sequence[str], lead: int = CLS, max_len: int | None = None) -> TokenSequence:
    """Whitespace tokenization with a leading CLS or DEC token."""
    index = {tok: i for i, tok in enumerate(vocab)}
    ids = [lead]
    for word in text.split():
        if word not in index or index[word] < 4:
            raise TokenizationError(f"unknown word {word!r}")
        ids.append(index[word])
    if max_len is not None and len(ids) > max_len:
        raise ContractError(f"sequence of {len(ids)} tokens exceeds max_text_len {max_len}")
    return TokenSequence(ids)


def detokenize(seq: TokenSequence, vocab: Sequence[str]) -> str:
    return " ".join(vocab[i] for i, k in zip(seq.ids, seq.kinds) if k == "word")


def with_lead(seq: TokenSequence, lead: int) -> TokenSequence:
    return TokenSequence([lead] + list(seq.ids[1:]))


def mask_text(seq: TokenSequence, ratio: float, seed) -> tuple[TokenSequence, list[int]]:
    """Independently replace each word position by [MASK] with probability ``ratio``."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio must be in [0, 1], got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draws = rng.random(len(seq))
    ids, kinds, positions = list(seq.ids), list(seq.kinds), []
    for pos, kind in enumerate(seq.kinds):
        if kind == "word" and draws[pos] < ratio:
            ids[pos], kinds[pos] = MASK, "MASK"
            positions.append(pos)
    return TokenSequence(ids, kinds), positions


def pad_batch(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    longest = max(len(s) for s in seqs)
    ids = np.full((len(seqs), longest), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
    return ids, ids != PAD


# ---------------------------------------------------------------- image side


class ImageEncoder(Module):
    """Patch projection, learned slot positions, pre-norm transformer layers."""

    def __init__(self, cfg: EncoderConfig, patch_cfg: PatchConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.patch_proj = Linear(rng, patch_cfg.token_dim, d)
        self.pos_global = uniform_param(rng, (patch_cfg.global_tokens, d))
        self.pos_region = uniform_param(rng, (patch_cfg.region_tokens, d))
        self.blocks = [Block(rng, d, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)

    def _run(self, tokens: np.ndarray, pos: Tensor) -> Tensor:
        if tokens.shape[1] != pos.shape[0]:
            raise ShapeError(f"stream has {tokens.shape[1]} tokens but the encoder grid holds {pos.shape[0]}")
        x = T.add(self.patch_proj(Tensor(tokens)), pos)
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def __call__(self, inputs: Sequence[DynRslInput]) -> list[list[Tensor]]:
        """Per sample, per stream token features (tokens x d_model)."""
        globals_ = np.stack([inp.global_stream.tokens.data for inp in inputs])
        regions = [s.tokens.data for inp in inputs for s in inp.region_streams]
        g_out = self._run(globals_, self.pos_global)
        r_out = self._run(np.stack(regions), self.pos_region) if regions else None
        out, k = [], 0
        for i, inp in enumerate(inputs):
            feats = [g_out[i]]
            for _ in inp.region_streams:
                feats.append(r_out[k])
                k += 1
            out.append(feats)
        return out


def encode_image(encoder: ImageEncoder, inp: DynRslInput) -> list[Tensor]:
    return encoder([inp])[0]


class StreamFusion(Module):
    """Stream-kind embedding plus one self-attention layer over all tokens."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.kind_emb = uniform_param(rng, (len(STREAM_KINDS), cfg.d_model))
        self.ln = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)

    def __call__(self, features: Sequence[Sequence[Tensor]], kinds: Sequence[Sequence[str]]) -> tuple[Tensor, np.ndarray]:
        """Returns padded fused tokens (N, T_max, d) and the validity mask."""
        if not features or any(len(f) == 0 for f in features):
            raise ContractError("each sample needs at least one stream")
        rows = [f[0] if len(f) == 1 else T.concat(list(f), axis=0) for f in features]
        x, valid = pad_stack(rows)
        kind_ids = np.zeros(valid.shape, dtype=np.int64)
        for i, (f, ks) in enumerate(zip(features, kinds)):
            start = 0
            for feat, kind in zip(f, ks):
                kind_ids[i, start : start + feat.shape[0]] = STREAM_KINDS.index(kind)
                start += feat.shape[0]
        x = T.add(x, T.embedding(self.kind_emb, kind_ids))
        return T.add(x, self.attn(self.ln(x), key_mask(valid))), valid


def fuse_streams(fusion: StreamFusion, features: Sequence[Tensor], kinds: Sequence[str]) -> Tensor:
    fused, _ = fusion([list(features)], [list(kinds)])
    return fused[0]


# ---------------------------------------------------------------- text side


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.max_len = cfg.max_text_len
        self.tok_emb = uniform_param(rng, (cfg.vocab_size, d))
        self.pos_emb = uniform_param(rng, (cfg.max_text_len, d))
        self.blocks = [Block(rng, d, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)

    def embed(self, ids: np.ndarray) -> Tensor:
        """Context-free token + position embeddings, (N, L, d)."""
        if ids.shape[1] > self.max_len:
            raise ContractError(f"sequence length {ids.shape[1]} exceeds max_text_len {self.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.tok_emb.shape[0]):
            raise TokenizationError("token id outside the vocabulary")
        return T.add(T.embedding(self.tok_emb, ids), self.pos_emb[: ids.shape[1]])

    def __call__(self, ids: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
        """Bidirectional encoding with PAD keys masked out, (N, L, d)."""
        valid = ids != PAD if valid is None else valid
        x = self.embed(ids)
        mask = key_mask(valid)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_f(x)


def encode_text(encoder: TextEncoder, seq: TokenSequence) -> tuple[Tensor, Tensor]:
    """(z_T of shape len x d_model, position-0 vector)."""
    ids = np.asarray([seq.ids], dtype=np.int64)
    z = encoder(ids)[0]
    return z, z[0]


class TextDecoder(Module):
    """Causal transformer over text positions with an attendable prefix.

    Prefix tokens attend to each other; text position t attends to the whole
    prefix and to text positions <= t.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d_proj
        self.blocks = [Block(rng, d, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_dec_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(rng, d, cfg.vocab_size)

    @staticmethod
    def attention_mask(prefix_valid: np.ndarray, text_valid: np.ndarray) -> np.ndarray:
        n, p = prefix_valid.shape
        length = text_valid.shape[1]
        keys = np.concatenate([prefix_valid, text_valid], axis=1)  # (N, P+L)
        allowed = np.zeros((p + length, p + length), dtype=bool)
        allowed[:p, :p] = True
        allowed[p:, :p] = True
        allowed[p:, p:] = causal_mask(length)
        mask = allowed[None, :, :] & keys[:, None, :]
        # a padded text query may otherwise see nothing; let it see itself
        idx = np.arange(p + length)
        mask[:, idx, idx] |= True
        return mask[:, None, :, :]

    def __call__(self, prefix: Tensor | None, prefix_valid: np.ndarray | None, text: Tensor, text_valid: np.ndarray) -> Tensor:
        n, length, _ = text.shape
        if prefix is None or prefix.shape[1] == 0:
            p = 0
            x = text
            prefix_valid = np.zeros((n, 0), dtype=bool)
        else:
            p = prefix.shape[1]
            x = T.concat([prefix, text], axis=1)
        mask = self.attention_mask(prefix_valid, text_valid)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.ln_f(x[:, p:]))
