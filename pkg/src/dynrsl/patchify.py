"""Dynamic-resolution inputs: one downsampled global stream plus
full-resolution region streams, all cut into equal-size patch tokens."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, EmptyRegionError, FormatError, ShapeError
from .geometry import BBox, RegionPlan
from .tensor import Tensor

STREAM_KINDS = ("global", "roi", "combined", "view")


@dataclass
class ImageBuffer:
    """RGB image, float64 in [0, 1], shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeError(f"image data must be (height, width, 3), got {self.data.shape}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ContractError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @classmethod
    def constant(cls, width: int, height: int, value: float | Sequence[float]) -> "ImageBuffer":
        return cls(np.broadcast_to(np.asarray(value, dtype=np.float64), (height, width, 3)).copy())

    def full_box(self) -> BBox:
        return BBox(0, 0, self.width, self.height)


@dataclass
class PatchStream:
    stream_kind: str
    source_box: BBox
    grid_w: int
    grid_h: int
    patch_px: int
    tokens: Tensor

    @property
    def n_tokens(self) -> int:
        return self.grid_w * self.grid_h


@dataclass
class PatchConfig:
    global_side: int = 224
    region_side: int = 96
    patch_px: int = 16
    token_budget: int = 512

    def __post_init__(self):
        for name in ("global_side", "region_side", "patch_px", "token_budget"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("global_side", "region_side"):
            if getattr(self, name) % self.patch_px:
                raise ConfigError(f"{name}={getattr(self, name)} is not a multiple of patch_px={self.patch_px}")
        if self.token_budget < self.global_tokens:
            raise ConfigError(
                f"token_budget {self.token_budget} is smaller than the global stream ({self.global_tokens} tokens)"
            )

    @property
    def global_grid(self) -> int:
        return self.global_side // self.patch_px

    @property
    def region_grid(self) -> int:
        return self.region_side // self.patch_px

    @property
    def global_tokens(self) -> int:
        return self.global_grid**2

    @property
    def region_tokens(self) -> int:
        return self.region_grid**2

    @property
    def token_dim(self) -> int:
        return self.patch_px * self.patch_px * 3


@dataclass
class DynRslInput:
    global_stream: PatchStream
    region_streams: list[PatchStream]
    total_tokens: int
    dropped_regions: int = 0
    notes: dict = field(default_factory=dict)

    @property
    def streams(self) -> list[PatchStream]:
        return [self.global_stream, *self.region_streams]

    def global_only(self) -> "DynRslInput":
        return DynRslInput(self.global_stream, [], self.global_stream.n_tokens, self.dropped_regions + len(self.region_streams))


# ---------------------------------------------------------------- resampling


def _area_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Per output cell: indices of overlapped input cells and their area weights.

    Rows are padded with repeats of the first index at weight 0.
    """
    edges = np.arange(n_out + 1) * (n_in / n_out)
    first = np.floor(edges[:-1]).astype(int)
    width = int(np.ceil(n_in / n_out)) + 1
    idx = np.minimum(first[:, None] + np.arange(width)[None, :], n_in - 1)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = first[:, None] + np.arange(width)[None, :]
    w = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    w[cells >= n_in] = 0.0
    return idx, w / w.sum(axis=1, keepdims=True)


def _area_pass(data: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    # weighted deviations from the window's first sample: constant input stays exact
    data = np.moveaxis(data, axis, 0)
    idx, w = _area_taps(data.shape[0], n_out)
    ref = data[idx[:, 0]]
    out = ref + np.einsum("ok,ok...->o...", w, data[idx] - ref[:, None])
    return np.moveaxis(out, 0, axis)


def downsample(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    """Box-filter (area-average) downsampling."""
    if out_w < 1 or out_h < 1:
        raise ContractError(f"output size must be at least 1x1, got {out_w}x{out_h}")
    if out_w > img.width or out_h > img.height:
        raise ContractError(
            f"downsample cannot enlarge {img.width}x{img.height} to {out_w}x{out_h}; use resize_bilinear"
        )
    if img.width % out_w == 0 and img.height % out_h == 0:
        fy, fx = img.height // out_h, img.width // out_w
        out = img.data.reshape(out_h, fy, out_w, fx, 3).mean(axis=(1, 3))
    else:
        out = _area_pass(_area_pass(img.data, out_w, axis=1), out_h, axis=0)
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def _bilinear_axis(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resize_bilinear(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    """Bilinear resize sampling corner-aligned positions (first and last
    output pixels land exactly on the first and last input pixels)."""
    if out_w < 1 or out_h < 1:
        raise ContractError(f"output size must be at least 1x1, got {out_w}x{out_h}")
    if (out_w, out_h) == (img.width, img.height):
        return ImageBuffer(img.data.copy())
    y0, y1, fy = _bilinear_axis(img.height, out_h)
    x0, x1, fx = _bilinear_axis(img.width, out_w)
    d = img.data
    fy, fx = fy[:, None, None], fx[None, :, None]
    top = d[y0][:, x0] * (1 - fx) + d[y0][:, x1] * fx
    bottom = d[y1][:, x0] * (1 - fx) + d[y1][:, x1] * fx
    return ImageBuffer(np.clip(top * (1 - fy) + bottom * fy, 0.0, 1.0))


def round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def pixel_rect(box: BBox) -> tuple[int, int, int, int]:
    return round_half_away(box.x1), round_half_away(box.y1), round_half_away(box.x2), round_half_away(box.y2)


def crop(img: ImageBuffer, box: BBox) -> ImageBuffer:
    """Pixel-exact copy of the box's rounded integer rectangle."""
    x1, y1, x2, y2 = pixel_rect(box)
    if x1 < 0 or y1 < 0 or x2 > img.width or y2 > img.height:
        raise ContractError(f"box {box.as_tuple()} extends outside the {img.width}x{img.height} image")
    if x2 <= x1 or y2 <= y1:
        raise EmptyRegionError(f"box {box.as_tuple()} has zero area after rounding")
    return ImageBuffer(img.data[y1:y2, x1:x2].copy())


# ---------------------------------------------------------------- patches


def patchify(img: ImageBuffer, patch_px: int, stream_kind: str = "global", source_box: BBox | None = None) -> PatchStream:
    """Cut into non-overlapping patches, row-major over the grid; each token is
    the patch flattened channel-last."""
    if img.width % patch_px or img.height % patch_px:
        raise ContractError(f"image {img.width}x{img.height} is not divisible into {patch_px}px patches")
    gh, gw = img.height // patch_px, img.width // patch_px
    tokens = (
        img.data.reshape(gh, patch_px, gw, patch_px, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_px * patch_px * 3)
    )
    return PatchStream(stream_kind, source_box or img.full_box(), gw, gh, patch_px, Tensor(tokens))


def unpatchify(stream: PatchStream) -> ImageBuffer:
    p = stream.patch_px
    data = (
        stream.tokens.data.reshape(stream.grid_h, stream.grid_w, p, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(stream.grid_h * p, stream.grid_w * p, 3)
    )
    return ImageBuffer(data)


def _global_view(img: ImageBuffer, side: int) -> ImageBuffer:
    if img.width >= side and img.height >= side:
        return downsample(img, side, side)
    return resize_bilinear(img, side, side)


def build_dynrsl_input(
    img: ImageBuffer,
    plan: RegionPlan,
    cfg: PatchConfig | None = None,
    views: Sequence[ImageBuffer] = (),
) -> DynRslInput:
    """Assemble the global stream and as many region streams as the budget allows.

    Admission order: extra camera views, then ROIs, then combined regions,
    each in plan order. Admission stops at the first stream that would
    overflow ``token_budget``.
    """
    cfg = cfg or PatchConfig()
    global_stream = patchify(_global_view(img, cfg.global_side), cfg.patch_px, "global", img.full_box())
    total = global_stream.n_tokens
    if total > cfg.token_budget:
        raise ConfigError(f"token_budget {cfg.token_budget} cannot hold the global stream ({total} tokens)")

    candidates: list[tuple[str, ImageBuffer, BBox]] = [("view", v, v.full_box()) for v in views]
    candidates += [("roi", img, b) for b in plan.rois]
    candidates += [("combined", img, b) for b in plan.combined_boxes]

    streams: list[PatchStream] = []
    dropped = 0
    for pos, (kind, source, box) in enumerate(candidates):
        if total + cfg.region_tokens > cfg.token_budget:
            dropped = len(candidates) - pos
            break
        if kind == "view":
            pixels = _global_view(source, cfg.region_side)
        else:
            pixels = resize_bilinear(crop(source, box), cfg.region_side, cfg.region_side)
        streams.append(patchify(pixels, cfg.patch_px, kind, box))
        total += cfg.region_tokens
    return DynRslInput(global_stream, streams, total, dropped)


# ---------------------------------------------------------------- PPM


def write_ppm(img: ImageBuffer, path: str | os.PathLike) -> None:
    pixels = np.rint(img.data * 255.0).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + pixels.tobytes())


def decode_ppm(raw: bytes) -> ImageBuffer:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {fields[0]!r})", 0)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("non-numeric PPM header field", pos) from None
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM is supported (maxval {maxval})", pos)
    pos += 1  # single whitespace byte ends the header
    need = width * height * 3
    body = raw[pos : pos + need]
    if len(body) != need:
        raise FormatError(f"PPM pixel data truncated: expected {need} bytes, found {len(body)}", pos + len(body))
    data = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3) / 255.0
    return ImageBuffer(data)


def read_ppm(path: str | os.PathLike) -> ImageBuffer:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
