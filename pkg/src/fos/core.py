"""Domain types and the small vector kernel shared by every stage of the pipeline."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

# Number of legal values per dimension for the `person` category. A schema
# file that disagrees is rejected at load time.
PERSON_CARDINALITIES: dict[str, int] = {
    "orientation": 8,
    "truncation": 6,
    "sport": 12,
    "motion": 31,
    "viewpoint": 4,
    "state": 3,
}
ATTRIBUTE_DIMENSIONS: tuple[str, ...] = tuple(PERSON_CARDINALITIES)
UNSPECIFIED = "unspecified"

UNIT_NORM_TOL = 1e-6


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeDimension:
    name: str
    values: tuple[str, ...]
    mandatory: bool


@dataclass(frozen=True)
class AttributeSchema:
    category: str
    dimensions: tuple[AttributeDimension, ...]

    def dimension(self, name: str) -> AttributeDimension:
        for dim in self.dimensions:
            if dim.name == name:
                return dim
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dimensions)

    def digest(self) -> str:
        payload = {
            "category": self.category,
            "dimensions": [[d.name, list(d.values), d.mandatory] for d in self.dimensions],
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "unspecified": UNSPECIFIED,
            "dimensions": {
                d.name: {"mandatory": d.mandatory, "values": list(d.values)}
                for d in self.dimensions
            },
        }


def parse_schema(doc: Mapping, expected: Mapping[str, int] | None = PERSON_CARDINALITIES) -> AttributeSchema:
    """Build a schema from its document form and check it against ``expected`` cardinalities."""
    if doc.get("unspecified", UNSPECIFIED) != UNSPECIFIED:
        raise SchemaError(f"unspecified marker must be {UNSPECIFIED!r}")
    dims = []
    for name, body in doc["dimensions"].items():
        values = tuple(str(v) for v in body["values"])
        if len(set(values)) != len(values):
            raise SchemaError(f"duplicate values in dimension {name!r}")
        if UNSPECIFIED in values:
            raise SchemaError(f"{UNSPECIFIED!r} is implicit and may not be listed ({name!r})")
        dims.append(AttributeDimension(name, values, bool(body.get("mandatory", False))))
    schema = AttributeSchema(str(doc.get("category", "person")), tuple(dims))
    if expected is not None:
        if schema.names != tuple(expected):
            raise SchemaError(f"dimensions {schema.names} do not match {tuple(expected)}")
        for dim in schema.dimensions:
            if len(dim.values) != expected[dim.name]:
                raise SchemaError(
                    f"dimension {dim.name!r} has {len(dim.values)} values, expected {expected[dim.name]}"
                )
    for required in ("orientation", "truncation"):
        if required in schema.names and not schema.dimension(required).mandatory:
            raise SchemaError(f"dimension {required!r} must be mandatory")
    return schema


def load_schema(path: str | Path | None = None) -> AttributeSchema:
    """Load an attribute schema file; the bundled `person` schema when ``path`` is None."""
    if path is None:
        text = resources.files("fos.schema").joinpath("person_attributes.yaml").read_text()
    else:
        text = Path(path).read_text()
    return parse_schema(yaml.safe_load(text))


@dataclass(frozen=True)
class AttributeVector:
    orientation: str
    truncation: str
    sport: str = UNSPECIFIED
    motion: str = UNSPECIFIED
    viewpoint: str = UNSPECIFIED
    state: str = UNSPECIFIED

    def __post_init__(self) -> None:
        if self.orientation == UNSPECIFIED or self.truncation == UNSPECIFIED:
            raise ValueError("orientation and truncation are mandatory")

    def as_tuple(self) -> tuple[str, ...]:
        return tuple(getattr(self, name) for name in ATTRIBUTE_DIMENSIONS)

    def key(self) -> str:
        """Canonical pattern key: the six values joined in dimension order."""
        return "|".join(self.as_tuple())

    def validate(self, schema: AttributeSchema) -> "AttributeVector":
        for name, value in zip(ATTRIBUTE_DIMENSIONS, self.as_tuple()):
            dim = schema.dimension(name)
            if value == UNSPECIFIED and not dim.mandatory:
                continue
            if value not in dim.values:
                raise SchemaError(f"{value!r} is not a legal {name!r} value")
        return self

    def to_dict(self) -> dict[str, str]:
        return dict(zip(ATTRIBUTE_DIMENSIONS, self.as_tuple()))

    @classmethod
    def from_dict(cls, values: Mapping[str, str]) -> "AttributeVector":
        unknown = set(values) - set(ATTRIBUTE_DIMENSIONS)
        if unknown:
            raise SchemaError(f"unknown attribute dimensions: {sorted(unknown)}")
        return cls(**{k: str(v) for k, v in values.items()})

    @classmethod
    def from_key(cls, key: str) -> "AttributeVector":
        parts = key.split("|")
        if len(parts) != len(ATTRIBUTE_DIMENSIONS):
            raise ValueError(f"malformed pattern key {key!r}")
        return cls(*parts)


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned box in normalized coordinates, clamped into the unit square."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite rectangle {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"rectangle must have positive size, got w={self.w}, h={self.h}")
        w = min(float(self.w), 1.0)
        h = min(float(self.h), 1.0)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "cx", float(np.clip(self.cx, w / 2, 1 - w / 2)))
        object.__setattr__(self, "cy", float(np.clip(self.cy, h / 2, 1 - h / 2)))

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Rectangle":
        x0, x1 = max(0.0, x0), min(1.0, x1)
        y0, y1 = max(0.0, y0), min(1.0, y1)
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def _check_image(image: np.ndarray, what: str) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{what} must be H x W x 3, got {image.shape}")
    return image


@dataclass(eq=False)
class ForegroundInstance:
    id: str
    image: np.ndarray
    attributes: AttributeVector | None = None
    pattern_id: str | None = None
    split: str = "train"

    def __post_init__(self) -> None:
        self.image = _check_image(self.image, "foreground image")
        if self.image.shape[0] != self.image.shape[1]:
            raise ValueError(f"foreground image must be square, got {self.image.shape[:2]}")
        if self.attributes is not None:
            key = self.attributes.key()
            if self.pattern_id is None:
                self.pattern_id = key
            elif self.pattern_id != key:
                raise ValueError(f"pattern id {self.pattern_id!r} does not match attributes {key!r}")


@dataclass(eq=False)
class QueryInput:
    id: str
    background: np.ndarray
    rect: Rectangle
    source_id: str | None = None
    split: str = "train"

    def __post_init__(self) -> None:
        self.background = _check_image(self.background, "background")


@dataclass(frozen=True)
class Pattern:
    pattern_id: str
    attribute_key: AttributeVector
    member_ids: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.member_ids:
            raise ValueError(f"pattern {self.pattern_id!r} has no members")
        if len(set(self.member_ids)) != len(self.member_ids):
            raise ValueError(f"pattern {self.pattern_id!r} has duplicate members")


def l2_normalize(v: Sequence[float] | np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit L2 norm. A zero vector is a degenerate embedding and raises."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0.0:
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / norm


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if m.size and (not np.all(np.isfinite(norms)) or np.any(norms == 0.0)):
        raise ValueError("cannot normalize zero or non-finite rows")
    return m / norms if m.size else m


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > UNIT_NORM_TOL:
            raise ValueError("cosine_similarity expects unit vectors")
    return float(np.clip(a @ b, -1.0, 1.0))


def outer_product_flatten(layout: Sequence[float] | np.ndarray, v: Sequence[float] | np.ndarray) -> np.ndarray:
    """Bilinear fusion: ``out[i * d + j] = layout[i] * v[j]``."""
    layout = np.asarray(layout, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if layout.shape != (4,):
        raise ValueError(f"layout must have 4 entries, got shape {layout.shape}")
    if v.ndim != 1:
        raise ValueError(f"feature must be a vector, got shape {v.shape}")
    return np.outer(layout, v).reshape(-1)


def same_pattern(a: AttributeVector, b: AttributeVector) -> bool:
    return a.as_tuple() == b.as_tuple()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(canonical_json(dict(config))).hexdigest()[:16]


def iter_unique(items: Iterable[str]) -> list[str]:
    seen: dict[str, None] = {}
    for item in items:
        seen.setdefault(item, None)
    return list(seen)
