"""Closed caption grammar vocabulary and vocabulary-file I/O."""

from __future__ import annotations

import os

from .errors import FormatError

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[DEC]", "[MASK]")
PAD, CLS, DEC, MASK = range(4)

COLORS = ("black", "white", "red", "green", "blue", "yellow", "cyan", "magenta")
SHAPES = ("disk", "square", "triangle")
SIZES = ("small", "large")
GRAMMAR_WORDS = ("a", "left", "of", "checkered") + SIZES + COLORS + SHAPES

DEFAULT_VOCAB = SPECIAL_TOKENS + GRAMMAR_WORDS


def write_vocab(tokens, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in tokens:
            fh.write(tok + "\n")


def read_vocab(path: str | os.PathLike) -> tuple[str, ...]:
    with open(path, encoding="utf-8") as fh:
        tokens = tuple(line.rstrip("\n") for line in fh)
    if tokens[:4] != SPECIAL_TOKENS:
        raise FormatError(f"vocabulary must start with {', '.join(SPECIAL_TOKENS)}")
    if len(set(tokens)) != len(tokens):
        raise FormatError("vocabulary has duplicate tokens")
    return tokens
