"""Synthetic shapes-and-captions scenes with oracle detections.

Caption grammar (every word is in :data:`dynrsl.vocab.DEFAULT_VOCAB`)::

    caption := entity ( "left of" entity )*
    entity  := "a" size [ "checkered" ] color shape
    size    := "small" | "large"
    color   := black | white | red | green | blue | yellow | cyan | magenta
    shape   := disk | square | triangle

Entities are listed by increasing center x. An entity is "small" when its
bounding box covers less than 2% of the canvas. A checkered entity alternates
its color with the complementary palette color on a one-pixel checkerboard.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, FormatError, ValidationError
from .geometry import BBox, Detection, format_detections, ingest_detections, plan_regions
from .patchify import DynRslInput, ImageBuffer, PatchConfig, build_dynrsl_input, read_ppm, write_ppm
from .vocab import COLORS, SHAPES

PALETTE = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
COMPLEMENT = {name: next(k for k, v in PALETTE.items() if v == tuple(1.0 - c for c in rgb)) for name, rgb in PALETTE.items()}
SHAPE_CLASS = {"disk": "pedestrian", "square": "vehicle", "triangle": "vehicle"}
BACKGROUND = 0.5
SMALL_AREA_FRACTION = 0.02
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Entity:
    shape: str
    color: str
    cx: float
    cy: float
    radius: float
    checkered: bool = False

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValidationError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValidationError(f"unknown color {self.color!r}")
        if self.radius <= 0:
            raise ValidationError("radius must be positive")

    @property
    def box(self) -> BBox:
        r = self.radius
        return BBox(self.cx - r, self.cy - r, self.cx + r, self.cy + r)


@dataclass
class SceneSpec:
    canvas: int
    entities: list[Entity]
    seed: int | None = None

    def __post_init__(self):
        if not self.entities:
            raise ValidationError("a scene needs at least one entity")
        full = BBox(0, 0, self.canvas, self.canvas)
        for e in self.entities:
            if not full.contains(e.box):
                raise ValidationError(f"entity {e} leaves the {self.canvas}px canvas")


@dataclass
class Scene:
    spec: SceneSpec
    image: ImageBuffer
    detections: list[Detection]
    caption: str
    views: list[ImageBuffer] = field(default_factory=list)


def is_small(entity: Entity, canvas: int) -> bool:
    return entity.box.area < SMALL_AREA_FRACTION * canvas * canvas


def describe(entity: Entity, canvas: int) -> str:
    size = "small" if is_small(entity, canvas) else "large"
    words = ["a", size] + (["checkered"] if entity.checkered else []) + [entity.color, entity.shape]
    return " ".join(words)


def caption_for(spec: SceneSpec) -> str:
    ordered = sorted(spec.entities, key=lambda e: (e.cx, e.cy))
    return " left of ".join(describe(e, spec.canvas) for e in ordered)


def _coverage(entity: Entity, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx, dy, r = xs - entity.cx, ys - entity.cy, entity.radius
    if entity.shape == "disk":
        return dx * dx + dy * dy <= r * r
    if entity.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # apex at the top center, base along the bottom edge of the box
    t = (dy + r) / (2 * r)
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= r * t)


def render(spec: SceneSpec) -> ImageBuffer:
    """Rasterize entities in list order over a mid-gray background, sampling
    each pixel at its center."""
    n = spec.canvas
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    img = np.full((n, n, 3), BACKGROUND)
    parity = (np.mgrid[0:n, 0:n].sum(axis=0) % 2).astype(bool)
    for e in spec.entities:
        inside = _coverage(e, xs, ys)
        img[inside] = PALETTE[e.color]
        if e.checkered:
            img[inside & parity] = PALETTE[COMPLEMENT[e.color]]
    return ImageBuffer(img)


def oracle_detections(spec: SceneSpec) -> list[Detection]:
    return [Detection(e.box, SHAPE_CLASS[e.shape], 1.0) for e in spec.entities]


def extra_views(image: ImageBuffer, n_view: int) -> list[ImageBuffer]:
    """Additional camera views, emulated as horizontal pans of the scene."""
    if n_view < 1:
        raise ContractError("n_view must be at least 1")
    w = image.width
    return [ImageBuffer(np.roll(image.data, k * w // n_view, axis=1)) for k in range(1, n_view)]


def build_scene(spec: SceneSpec, n_view: int = 1) -> Scene:
    image = render(spec)
    return Scene(spec, image, oracle_detections(spec), caption_for(spec), extra_views(image, n_view))


def _overlaps(a: BBox, b: BBox, gap: float) -> bool:
    return not (a.x2 + gap <= b.x1 or b.x2 + gap <= a.x1 or a.y2 + gap <= b.y1 or b.y2 + gap <= a.y1)


def random_spec(
    seed: int,
    canvas: int = 64,
    max_entities: int = 3,
    small_prob: float = 0.5,
) -> SceneSpec:
    """Non-overlapping entities with integer centers and radii.

    Each entity is small with probability ``small_prob`` (radius 2 to 4 on a
    64 px canvas, scaled with the canvas) and large otherwise.
    """
    rng = np.random.default_rng(seed)
    unit = canvas / 64
    count = int(rng.integers(1, max_entities + 1))
    entities: list[Entity] = []
    attempts = 0
    while len(entities) < count and attempts < 200:
        attempts += 1
        if rng.random() < small_prob:
            r = float(max(1, round(rng.integers(2, 5) * unit)))
        else:
            r = float(round(rng.integers(8, 15) * unit))
        cx = float(rng.integers(int(r), int(canvas - r) + 1))
        cy = float(rng.integers(int(r), int(canvas - r) + 1))
        e = Entity(str(rng.choice(SHAPES)), str(rng.choice(COLORS)), cx, cy, r)
        if any(_overlaps(e.box, o.box, 2.0) or o.cx == cx for o in entities):
            continue
        entities.append(e)
    return SceneSpec(canvas, entities, seed)


def generate_scene(seed: int, canvas: int = 64, max_entities: int = 3, small_prob: float = 0.5, n_view: int = 1) -> Scene:
    """Deterministic scene, oracle detections and caption for ``seed``."""
    return build_scene(random_spec(seed, canvas, max_entities, small_prob), n_view)


# ---------------------------------------------------------------- corpora


def retrieval_corpus(n: int = 16, seed: int = 0, canvas: int = 64, max_entities: int = 2, n_view: int = 1) -> list[Scene]:
    """``n`` scenes with pairwise distinct captions."""
    scenes, seen = [], set()
    k = 0
    while len(scenes) < n:
        scene = generate_scene(seed * 100_003 + k, canvas, max_entities, n_view=n_view)
        k += 1
        if scene.caption in seen:
            continue
        seen.add(scene.caption)
        scenes.append(scene)
    return scenes


CHECKER_COLORS = ("red", "green", "blue", "black")


def ablation_corpus(groups: int = 4, seed: int = 0, canvas: int = 64) -> list[Scene]:
    """Groups of scenes that differ only in one small checkered square.

    Inside a group the context entities are shared and the planted square
    takes each color of :data:`CHECKER_COLORS`. The square is even-sized and
    even-aligned and its two checker colors average to the background, so a
    2x area downsample of the canvas is bit-identical across the group. Only
    a full-resolution look at the square tells the captions apart.
    """
    if canvas % 64:
        raise ContractError("ablation canvas must be a multiple of 64")
    rng = np.random.default_rng(seed)
    scenes = []
    for g in range(groups):
        while True:
            context = random_spec(int(rng.integers(2**31)), canvas, max_entities=2, small_prob=0.0).entities
            r = 3.0 * canvas / 64
            # corner-aligned on even pixels: cx - r and cy - r even
            cx = float(2 * rng.integers(int(r), int((canvas - r) // 2)) + r % 2)
            cy = float(2 * rng.integers(int(r), int((canvas - r) // 2)) + r % 2)
            planted = Entity("square", "red", cx, cy, r, checkered=True)
            inside = BBox(0, 0, canvas, canvas).contains(planted.box)
            if inside and (cx - r) % 2 == 0 and not any(_overlaps(planted.box, e.box, 2.0) or e.cx == cx for e in context):
                break
        for color in CHECKER_COLORS:
            ents = list(context) + [Entity("square", color, cx, cy, r, checkered=True)]
            scenes.append(build_scene(SceneSpec(canvas, ents, seed * 1000 + g)))
    return scenes


def model_inputs(
    scenes: Sequence[Scene],
    patch_cfg: PatchConfig,
    max_subset_size: int = 3,
    max_regions: int = 32,
    regions: bool = True,
) -> list[DynRslInput]:
    out = []
    for s in scenes:
        plan = plan_regions(s.detections, s.image.width, s.image.height, None, max_subset_size, max_regions)
        inp = build_dynrsl_input(s.image, plan, patch_cfg, s.views)
        out.append(inp if regions else inp.global_only())
    return out


# ---------------------------------------------------------------- manifest


def write_dataset(scenes: Sequence[Scene], out_dir: str | os.PathLike) -> Path:
    """Write PPM images, JSON-lines detections and ``manifest.json``."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "detections").mkdir(parents=True, exist_ok=True)
    items = []
    for i, s in enumerate(scenes):
        name = f"{i:05d}"
        write_ppm(s.image, root / "images" / f"{name}.ppm")
        (root / "detections" / f"{name}.jsonl").write_text(format_detections(name, s.detections), encoding="utf-8")
        items.append({"image": f"images/{name}.ppm", "detections": f"detections/{name}.jsonl", "caption": s.caption})
    path = root / "manifest.json"
    path.write_text(json.dumps({"version": MANIFEST_VERSION, "items": items}, indent=1) + "\n", encoding="utf-8")
    return path


@dataclass
class ManifestItem:
    image: ImageBuffer
    detections: list[Detection]
    caption: str


def read_manifest(path: str | os.PathLike) -> list[ManifestItem]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON ({exc.msg})", exc.pos) from None
    if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION or not isinstance(doc.get("items"), list):
        raise FormatError(f"manifest must be an object with version {MANIFEST_VERSION} and an items list")
    out = []
    for item in doc["items"]:
        if not isinstance(item, dict) or set(item) != {"image", "detections", "caption"}:
            raise FormatError("manifest items need exactly image, detections and caption")
        image = read_ppm(path.parent / item["image"])
        groups = ingest_detections((path.parent / item["detections"]).read_text(encoding="utf-8"))
        dets = [d for _, ds in groups for d in ds]
        out.append(ManifestItem(image, dets, item["caption"]))
    return out


def scenes_from_manifest(path: str | os.PathLike) -> list[Scene]:
    """Manifest items as scenes (without a structured spec)."""
    return [Scene(None, it.image, it.detections, it.caption) for it in read_manifest(path)]
