"""Boxes, detections, and combined-region planning.

Coordinates are pixel units with x to the right and y downward, so every box
satisfies ``x1 <= x2`` and ``y1 <= y2``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ContractError, EmptyRegionError, ParseError, ValidationError

DEFAULT_CLASSES = frozenset({"vehicle", "pedestrian"})


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValidationError(f"box corners out of order: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, other: "BBox") -> bool:
        return self.x1 <= other.x1 and self.y1 <= other.y1 and self.x2 >= other.x2 and self.y2 >= other.y2


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_label: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")


@dataclass
class RegionPlan:
    rois: list[BBox]
    combined: list[tuple[tuple[int, ...], BBox]]
    caps_applied: dict = field(default_factory=dict)

    @property
    def combined_boxes(self) -> list[BBox]:
        return [box for _, box in self.combined]

    def to_dict(self) -> dict:
        return {
            "rois": [list(b.as_tuple()) for b in self.rois],
            "combined": [{"members": list(m), "box": list(b.as_tuple())} for m, b in self.combined],
            "caps_applied": dict(self.caps_applied),
        }


def merge_boxes(members: Sequence[BBox]) -> BBox:
    """Smallest box enclosing all members: coordinate-wise min of the top-left
    corners and max of the bottom-right corners."""
    if not members:
        raise ContractError("merge_boxes needs at least one box")
    return BBox(
        min(b.x1 for b in members),
        min(b.y1 for b in members),
        max(b.x2 for b in members),
        max(b.y2 for b in members),
    )


def enumerate_combinations(
    rois: Sequence[BBox],
    max_subset_size: int | None = 3,
    max_regions: int | None = 32,
    dedup: bool = True,
) -> RegionPlan:
    """Merge every subset of two or more ROIs into a combined region.

    Subsets are visited by size, then lexicographically by member index.
    ``max_subset_size`` bounds the subset size (``None`` disables it), exact
    duplicate merged boxes keep their first occurrence unless ``dedup`` is
    off, and if more than ``max_regions`` remain the smallest-area ones are
    kept (``None`` disables truncation). Survivors stay in enumeration order.

    With no caps at all the plan has 2**n - n - 1 entries.
    """
    if max_subset_size is not None and max_subset_size < 2:
        raise ContractError(f"max_subset_size must be >= 2, got {max_subset_size}")
    if max_regions is not None and max_regions < 0:
        raise ContractError(f"max_regions must be >= 0, got {max_regions}")
    rois = list(rois)
    n = len(rois)
    top = n if max_subset_size is None else min(max_subset_size, n)
    caps = {"size_cap": top < n, "deduplicated": 0, "truncated": 0, "equal_to_roi": 0}

    combined: list[tuple[tuple[int, ...], BBox]] = []
    seen: set[tuple] = set()
    for k in range(2, top + 1):
        for members in itertools.combinations(range(n), k):
            box = merge_boxes([rois[i] for i in members])
            key = box.as_tuple()
            if dedup and key in seen:
                caps["deduplicated"] += 1
                continue
            seen.add(key)
            combined.append((members, box))

    if max_regions is not None and len(combined) > max_regions:
        ranked = sorted(range(len(combined)), key=lambda i: (combined[i][1].area, i))
        keep = sorted(ranked[:max_regions])
        caps["truncated"] = len(combined) - max_regions
        combined = [combined[i] for i in keep]

    roi_keys = {b.as_tuple() for b in rois}
    caps["equal_to_roi"] = sum(1 for _, b in combined if b.as_tuple() in roi_keys)
    return RegionPlan(rois=rois, combined=combined, caps_applied=caps)


def clamp_to_image(box: BBox, width: int, height: int) -> BBox:
    if width <= 0 or height <= 0:
        raise ContractError(f"image size must be positive, got {width}x{height}")
    if box.x1 >= width or box.y1 >= height or box.x2 <= 0 or box.y2 <= 0:
        raise EmptyRegionError(f"box {box.as_tuple()} lies outside the {width}x{height} image")
    return BBox(
        min(max(box.x1, 0.0), width),
        min(max(box.y1, 0.0), height),
        min(max(box.x2, 0.0), width),
        min(max(box.y2, 0.0), height),
    )


# ---------------------------------------------------------------- detection files

_FIELDS = {"image_id", "class", "score", "box"}


def _parse_record(obj, lineno: int) -> tuple[str, Detection]:
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", lineno)
    extra = set(obj) - _FIELDS
    if extra:
        raise ParseError(f"unknown fields {sorted(extra)}", lineno)
    missing = _FIELDS - set(obj)
    if missing:
        raise ParseError(f"missing fields {sorted(missing)}", lineno)
    image_id, label, score, box = obj["image_id"], obj["class"], obj["score"], obj["box"]
    if not isinstance(image_id, str) or not isinstance(label, str):
        raise ParseError("image_id and class must be strings", lineno)
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        raise ParseError("score must be a number", lineno)
    if (
        not isinstance(box, list)
        or len(box) != 4
        or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in box)
    ):
        raise ParseError("box must be an array of four numbers", lineno)
    try:
        return image_id, Detection(BBox(*box), label, float(score))
    except ValidationError as exc:
        raise ValidationError(f"record for image {image_id!r}: {exc}", lineno) from None


def ingest_detections(lines: str | Iterable[str]) -> list[tuple[str, list[Detection]]]:
    """Parse JSON-lines detections, grouped by ``image_id`` in file order.

    Blank lines are ignored. Each non-blank line must be one object with
    exactly the fields ``image_id``, ``class``, ``score`` and ``box``.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    groups: dict[str, list[Detection]] = {}
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
        image_id, det = _parse_record(obj, lineno)
        groups.setdefault(image_id, []).append(det)
    return list(groups.items())


def format_detections(image_id: str, detections: Iterable[Detection]) -> str:
    rows = [
        json.dumps({"image_id": image_id, "class": d.class_label, "score": d.score, "box": list(d.box.as_tuple())})
        for d in detections
    ]
    return "".join(r + "\n" for r in rows)


def plan_regions(
    detections: Sequence[Detection],
    width: int,
    height: int,
    classes: Iterable[str] | None = DEFAULT_CLASSES,
    max_subset_size: int = 3,
    max_regions: int = 32,
) -> RegionPlan:
    """Filter detections by class, clamp to the image, and enumerate combinations."""
    keep = None if classes is None else set(classes)
    rois = []
    for det in detections:
        if keep is not None and det.class_label not in keep:
            continue
        try:
            rois.append(clamp_to_image(det.box, width, height))
        except EmptyRegionError:
            continue
    return enumerate_combinations(rois, max_subset_size, max_regions)
