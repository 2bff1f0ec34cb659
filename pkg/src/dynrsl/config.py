"""Line-oriented ``key = value`` run configuration.

Blank lines and lines starting with ``#`` are ignored. Every key belongs to
one of three sections (encoder, patch, train) plus the data keys ``canvas``
and ``n_pairs``; see :data:`KEYS`. Booleans are ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .encoders import EncoderConfig
from .errors import ConfigError, ParseError
from .patchify import PatchConfig
from .train import TrainConfig
from .vocab import read_vocab

# desk-scale image geometry: 64 px canvases, 32 px global view, 16 px regions
DESK_PATCH = PatchConfig(global_side=32, region_side=16, patch_px=8, token_budget=48)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    patch: PatchConfig = field(default_factory=lambda: dataclasses.replace(DESK_PATCH))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000))
    canvas: int = 64
    n_pairs: int = 16


def _key_table() -> dict[str, tuple[str, str, type]]:
    table: dict[str, tuple[str, str, type]] = {}
    for section, cls in (("encoder", EncoderConfig), ("patch", PatchConfig), ("train", TrainConfig)):
        for f in dataclasses.fields(cls):
            if f.name == "vocab":
                continue
            key = "model_seed" if (section, f.name) == ("encoder", "seed") else f.name
            table[key] = (section, f.name, type(f.default))
    table["vocab_file"] = ("encoder", "vocab", str)
    table["canvas"] = ("run", "canvas", int)
    table["n_pairs"] = ("run", "n_pairs", int)
    return table


KEYS = _key_table()


def _convert(key: str, text: str, kind: type):
    if kind is bool:
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        raise ValueError(f"{key} expects true or false")
    return kind(text)


def parse_config(text: str) -> dict[str, object]:
    """Typed values by key. Unknown keys, duplicates and bad values are
    reported with their line number."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in KEYS:
            raise ParseError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", lineno)
        try:
            values[key] = _convert(key, value, KEYS[key][2])
        except ValueError as exc:
            raise ParseError(f"bad value for {key}: {exc}", lineno) from None
    return values


def build_run_config(values: Mapping[str, object] | None = None) -> RunConfig:
    base = RunConfig()
    sections: dict[str, dict] = {
        "encoder": dataclasses.asdict(base.encoder),
        "patch": dataclasses.asdict(base.patch),
        "train": dataclasses.asdict(base.train),
        "run": {"canvas": base.canvas, "n_pairs": base.n_pairs},
    }
    for key, value in (values or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        section, name, _ = KEYS[key]
        if key == "vocab_file":
            value = read_vocab(str(value))
        sections[section][name] = value
    return RunConfig(
        EncoderConfig(**sections["encoder"]),
        PatchConfig(**sections["patch"]),
        TrainConfig(**sections["train"]),
        **sections["run"],
    )


def load_run_config(path: str | os.PathLike | None = None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """File values first, then ``overrides`` (e.g. command-line flags)."""
    values = parse_config(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_run_config(values)


def format_config(cfg: RunConfig, keys: Iterable[str] | None = None) -> str:
    """Render ``cfg`` as a config file (vocabulary excluded)."""
    lookup = {"encoder": cfg.encoder, "patch": cfg.patch, "train": cfg.train, "run": cfg}
    lines = []
    for key in keys or KEYS:
        section, name, kind = KEYS[key]
        if key == "vocab_file":
            continue
        value = getattr(lookup[section], name)
        lines.append(f"{key} = {str(value).lower() if kind is bool else value}")
    return "\n".join(lines) + "\n"
