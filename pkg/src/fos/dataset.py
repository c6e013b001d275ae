"""Building pattern-level FoS datasets.

Composite images with an object mask are split into a query (inpainted
background plus the object's rectangle) and a foreground (the object on a
white square). Foregrounds sharing all six attribute values form a pattern;
a query compatible with a pattern is compatible with every member of it,
which is what turns one instance pair into many training pairs.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import (
    AttributeSchema,
    AttributeVector,
    ForegroundInstance,
    Pattern,
    QueryInput,
    Rectangle,
    config_hash,
    load_schema,
    parse_schema,
)

MANIFEST_FORMAT = "fos-dataset"
MANIFEST_VERSION = 1

InpaintFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ExcludedSample(ValueError):
    """Raised for samples that fail the small/incomplete exclusion rules."""


# ---------------------------------------------------------------------------
# image helpers


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / np.float32(255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap an image to the 8-bit grid so it survives a PNG round trip unchanged."""
    return from_uint8(to_uint8(image))


def save_png(image: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.permute(1, 2, 0).contiguous().numpy().astype(np.float32)


def resize_image(image: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    width = height if width is None else width
    if image.shape[:2] == (height, width):
        return np.asarray(image, dtype=np.float32).copy()
    t = _to_tensor(image)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=True)
    return np.clip(_to_numpy(out[0]), 0.0, 1.0)


def resample_window(image: np.ndarray, x0: float, y0: float, sw: float, sh: float) -> np.ndarray:
    """Bilinearly resample the normalized window (x0, y0, sw, sh) back to full resolution."""
    h, w = image.shape[:2]
    xs = x0 + (np.arange(w) + 0.5) / w * sw
    ys = y0 + (np.arange(h) + 0.5) / h * sh
    gx, gy = np.meshgrid(2 * xs - 1, 2 * ys - 1)
    grid = torch.from_numpy(np.stack([gx, gy], axis=-1)[None].astype(np.float32))
    out = F.grid_sample(_to_tensor(image)[None], grid, mode="bilinear", padding_mode="border", align_corners=False)
    return np.clip(_to_numpy(out[0]), 0.0, 1.0)


# ---------------------------------------------------------------------------
# decomposition of annotated composites


@dataclass(eq=False)
class AnnotatedComposite:
    image: np.ndarray
    mask: np.ndarray
    category: str = "person"
    attributes: AttributeVector | None = None

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}")
        if not self.mask.any():
            raise ValueError("mask is empty")


@dataclass(frozen=True)
class ExclusionRules:
    min_area_fraction: float = 0.005
    min_side: int = 32


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Bounding box (x0, y0, x1, y1) of a mask; x1/y1 are exclusive."""
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if ys.size == 0:
        raise ValueError("mask is empty")
    return int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1


def mean_fill_inpaint(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace masked pixels with the per-channel mean of the unmasked ones."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if mask.all():
        raise ValueError("mask covers the whole image; nothing to fill from")
    out = image.copy()
    out[mask] = image[~mask].mean(axis=0, dtype=np.float64).astype(np.float32)
    return out


def paste_on_white_square(image: np.ndarray, mask: np.ndarray, margin: float = 0.1) -> np.ndarray:
    x0, y0, x1, y1 = mask_bbox(mask)
    bw, bh = x1 - x0, y1 - y0
    longest = max(bw, bh)
    pad = max(1, math.ceil(margin * longest))
    side = longest + 2 * pad
    canvas = np.ones((side, side, 3), dtype=np.float32)
    ox, oy = (side - bw) // 2, (side - bh) // 2
    crop = image[y0:y1, x0:x1]
    sub = mask[y0:y1, x0:x1]
    region = canvas[oy : oy + bh, ox : ox + bw]
    region[sub] = crop[sub]
    return canvas


def decompose(
    comp: AnnotatedComposite,
    inpainter: InpaintFn = mean_fill_inpaint,
    *,
    rules: ExclusionRules = ExclusionRules(),
    margin: float = 0.1,
    query_id: str = "q",
    instance_id: str = "fg",
) -> tuple[QueryInput, ForegroundInstance]:
    """Split a composite into its (query, foreground) compatible pair."""
    mask = comp.mask
    h, w = mask.shape
    area = mask.mean()
    x0, y0, x1, y1 = mask_bbox(mask)
    if area < rules.min_area_fraction:
        raise ExcludedSample(f"mask covers {area:.4f} of the image, below {rules.min_area_fraction}")
    if min(x1 - x0, y1 - y0) < rules.min_side:
        raise ExcludedSample(f"bbox side {min(x1 - x0, y1 - y0)} px below {rules.min_side}")
    background = np.asarray(inpainter(comp.image, mask), dtype=np.float32)
    rect = Rectangle.from_corners(x0 / w, y0 / h, x1 / w, y1 / h)
    fg_image = paste_on_white_square(comp.image, mask, margin)
    query = QueryInput(query_id, background, rect, source_id=instance_id)
    fg = ForegroundInstance(instance_id, fg_image, comp.attributes)
    return query, fg


# ---------------------------------------------------------------------------
# patterns, pairs and triplets


def group_patterns(instances: Sequence[ForegroundInstance]) -> list[Pattern]:
    """Partition labelled instances by identical attribute vectors, sorted by pattern id."""
    groups: dict[str, list[ForegroundInstance]] = {}
    for inst in instances:
        if inst.attributes is None:
            continue
        groups.setdefault(inst.attributes.key(), []).append(inst)
    return [
        Pattern(key, members[0].attributes, tuple(m.id for m in members))
        for key, members in sorted(groups.items())
    ]


@dataclass(frozen=True)
class CompatiblePair:
    query_id: str
    pattern_id: str | None = None
    instance_id: str | None = None

    def __post_init__(self) -> None:
        if (self.pattern_id is None) == (self.instance_id is None):
            raise ValueError("a pair references exactly one of pattern_id / instance_id")


@dataclass(eq=False)
class Triplet:
    anchor: QueryInput
    positive: ForegroundInstance
    negative: ForegroundInstance


def expand_pairs(pairs: Sequence[CompatiblePair], patterns: Sequence[Pattern]) -> list[CompatiblePair]:
    """Instance-level positives implied by pattern-level pairs (k members give k pairs)."""
    members = {p.pattern_id: p.member_ids for p in patterns}
    out = []
    for pair in pairs:
        if pair.instance_id is not None:
            out.append(pair)
            continue
        if pair.pattern_id not in members:
            raise KeyError(f"unknown pattern {pair.pattern_id!r}")
        out.extend(CompatiblePair(pair.query_id, instance_id=m) for m in members[pair.pattern_id])
    return out


class TripletSampler:
    """Draws (anchor, positive, negative) id triples from pattern-level compatibility.

    Positives: a compatible pattern uniformly, then one of its members.
    Negatives: uniformly among all instances of incompatible patterns.
    """

    def __init__(self, compatibility: Mapping[str, Sequence[str]], members: Mapping[str, Sequence[str]],
                 anchors: Sequence[str] | None = None):
        self.members = {p: list(m) for p, m in members.items() if m}
        self.compatibility = compatibility
        self.anchors = list(compatibility) if anchors is None else list(anchors)
        self._plan: dict[str, tuple[list[str], list[str]]] = {}
        for qid in self.anchors:
            self._plan[qid] = self._split(qid)

    def _split(self, qid: str) -> tuple[list[str], list[str]]:
        compatible = [p for p in sorted(set(self.compatibility.get(qid, ()))) if p in self.members]
        if not compatible:
            raise ValueError(f"query {qid!r} has no compatible pattern")
        negatives = [m for p in sorted(self.members) if p not in compatible for m in self.members[p]]
        if not negatives:
            raise ValueError(f"query {qid!r} is compatible with every pattern; no negative exists")
        return compatible, negatives

    def sample(self, rng: np.random.Generator, qid: str | None = None) -> tuple[str, str, str]:
        if qid is None:
            qid = self.anchors[rng.integers(len(self.anchors))]
        compatible, negatives = self._plan[qid] if qid in self._plan else self._split(qid)
        pattern = compatible[rng.integers(len(compatible))]
        members = self.members[pattern]
        return qid, members[rng.integers(len(members))], negatives[rng.integers(len(negatives))]


def sample_triplet(corpus: "Corpus", rng_seed: int | np.random.Generator, query_id: str | None = None,
                   split: str | None = "train") -> Triplet:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    sampler = corpus.triplet_sampler(split)
    qid, pos, neg = sampler.sample(rng, query_id)
    return Triplet(corpus.query(qid), corpus.instance(pos), corpus.instance(neg))


# ---------------------------------------------------------------------------
# augmentation


def augment_rectangle(rect: Rectangle, rng, max_growth: float = 0.5) -> Rectangle:
    """Grow each side by U(0, max_growth * side) around the centroid, clipped to the unit square."""
    w = rect.w + rng.uniform(0.0, max_growth * rect.w)
    h = rect.h + rng.uniform(0.0, max_growth * rect.h)
    if w == rect.w and h == rect.h:
        return rect
    return Rectangle.from_corners(rect.cx - w / 2, rect.cy - h / 2, rect.cx + w / 2, rect.cy + h / 2)


def max_zoom_for(rect: Rectangle, cap: float) -> float:
    return max(1.0, min(cap, 1.0 / max(rect.w, rect.h)))


def zoom_query(query: QueryInput, zoom: float, x0: float, y0: float) -> QueryInput:
    """Crop the normalized window of side 1/zoom at (x0, y0) and rescale it to full size."""
    s = 1.0 / zoom
    if zoom == 1.0:
        return QueryInput(query.id, query.background.copy(), query.rect, query.source_id, query.split)
    bg = resample_window(query.background, x0, y0, s, s)
    r = query.rect
    rect = Rectangle((r.cx - x0) / s, (r.cy - y0) / s, r.w / s, r.h / s)
    return QueryInput(query.id, bg, rect, query.source_id, query.split)


def augment_zoom(query: QueryInput, rng, max_zoom: float = 2.0) -> QueryInput:
    """Random zoom that keeps the whole query rectangle inside the field of view."""
    r = query.rect
    zoom = rng.uniform(1.0, max_zoom_for(r, max_zoom))
    s = 1.0 / zoom
    left, top, right, bottom = r.corners()
    x_lo, x_hi = max(0.0, right - s), min(left, 1.0 - s)
    y_lo, y_hi = max(0.0, bottom - s), min(top, 1.0 - s)
    if x_hi < x_lo or y_hi < y_lo:
        return zoom_query(query, 1.0, 0.0, 0.0)
    return zoom_query(query, zoom, rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi))


@dataclass(frozen=True)
class JitterConfig:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.2


NO_JITTER = JitterConfig(0.0, 0.0, 0.0, 0.0)


def _rgb_to_hsv(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    r, g, b = x.unbind(1)
    maxc, _ = x.max(dim=1)
    minc, _ = x.min(dim=1)
    delta = maxc - minc
    s = torch.where(maxc > 0, delta / maxc.clamp_min(1e-12), torch.zeros_like(maxc))
    dc = torch.where(delta > 0, delta, torch.ones_like(delta))
    rc, gc, bc = (maxc - r) / dc, (maxc - g) / dc, (maxc - b) / dc
    h = torch.where(maxc == r, bc - gc, torch.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = torch.where(delta > 0, (h / 6.0) % 1.0, torch.zeros_like(h))
    return h, s, maxc


def _hsv_to_rgb(h: torch.Tensor, s: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.long() % 6
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = torch.stack([
        torch.stack([v, q, p, p, t, v]),
        torch.stack([t, v, v, q, p, p]),
        torch.stack([p, p, t, v, v, q]),
    ])  # (3, 6, B, H, W)
    idx = i[None, None].expand(3, 1, *i.shape)
    return table.gather(1, idx)[:, 0].permute(1, 0, 2, 3)


def _gray(x: torch.Tensor) -> torch.Tensor:
    return (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2])[:, None]


def color_jitter_batch(x: torch.Tensor, rng, jitter: JitterConfig = JitterConfig(),
                       keep_white: bool = False) -> torch.Tensor:
    """Per-sample brightness, contrast, saturation and hue jitter of a (B, 3, H, W) batch in [0, 1].

    With ``keep_white`` the pure-white pixels (foreground canvas) are restored afterwards.
    """
    if jitter == NO_JITTER or x.shape[0] == 0:
        return x
    n = x.shape[0]

    def factors(mag: float) -> torch.Tensor:
        return torch.from_numpy(rng.uniform(max(0.0, 1 - mag), 1 + mag, size=n)).float().view(n, 1, 1, 1)

    white = (x >= 1.0).all(dim=1, keepdim=True) if keep_white else None
    out = x
    if jitter.brightness:
        out = (out * factors(jitter.brightness)).clamp(0, 1)
    if jitter.contrast:
        c = factors(jitter.contrast)
        mean = _gray(out).mean(dim=(2, 3), keepdim=True)
        out = (c * out + (1 - c) * mean).clamp(0, 1)
    if jitter.saturation:
        s = factors(jitter.saturation)
        out = (s * out + (1 - s) * _gray(out)).clamp(0, 1)
    if jitter.hue:
        shift = torch.from_numpy(rng.uniform(-jitter.hue, jitter.hue, size=n)).float().view(n, 1, 1)
        h, s_, v = _rgb_to_hsv(out)
        out = _hsv_to_rgb((h + shift) % 1.0, s_, v).clamp(0, 1)
    if white is not None:
        out = torch.where(white, torch.ones_like(out), out)
    return out


def color_jitter(image: np.ndarray, rng, jitter: JitterConfig = JitterConfig(), keep_white: bool = False) -> np.ndarray:
    return _to_numpy(color_jitter_batch(_to_tensor(image)[None], rng, jitter, keep_white)[0])


def pad_white(image: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    return np.pad(image, ((top, bottom), (left, right), (0, 0)), constant_values=1.0)


def square_white(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    side = max(h, w)
    top, left = (side - h) // 2, (side - w) // 2
    return pad_white(image, top, side - h - top, left, side - w - left)


def augment_foreground(fg: ForegroundInstance, rng, *, max_padding: float = 0.2,
                       jitter: JitterConfig = JitterConfig(), size: int = 256) -> ForegroundInstance:
    """Random white padding, re-square, color jitter on the object pixels only, resize."""
    img = fg.image
    side = img.shape[0]
    pads = [int(rng.integers(0, int(max_padding * side) + 1)) if max_padding > 0 else 0 for _ in range(4)]
    img = square_white(pad_white(img, *pads))
    img = color_jitter(img, rng, jitter, keep_white=True)
    img = resize_image(img, size)
    return ForegroundInstance(fg.id, img, fg.attributes, fg.pattern_id, fg.split)


# ---------------------------------------------------------------------------
# corpus container and manifest


@dataclass(eq=False)
class Corpus:
    schema: AttributeSchema
    instances: list[ForegroundInstance]
    queries: list[QueryInput]
    compatibility: dict[str, list[str]]
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._instances = {i.id: i for i in self.instances}
        self._queries = {q.id: q for q in self.queries}
        if len(self._instances) != len(self.instances):
            raise ValueError("duplicate instance ids")
        if len(self._queries) != len(self.queries):
            raise ValueError("duplicate query ids")
        known = {i.pattern_id for i in self.instances if i.pattern_id is not None}
        for qid, pids in self.compatibility.items():
            if qid not in self._queries:
                raise ValueError(f"compatibility refers to unknown query {qid!r}")
            missing = set(pids) - known
            if missing:
                raise ValueError(f"query {qid!r} compatible with unknown patterns {sorted(missing)}")

    def instance(self, iid: str) -> ForegroundInstance:
        return self._instances[iid]

    def query(self, qid: str) -> QueryInput:
        return self._queries[qid]

    def patterns(self) -> list[Pattern]:
        return group_patterns(self.instances)

    def pattern_ids(self) -> list[str]:
        return sorted({i.pattern_id for i in self.instances if i.pattern_id is not None})

    def members(self, split: str | None = None) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for inst in self.instances:
            if inst.pattern_id is not None and (split is None or inst.split == split):
                out.setdefault(inst.pattern_id, []).append(inst.id)
        return out

    def split_instances(self, split: str | None) -> list[ForegroundInstance]:
        return [i for i in self.instances if split is None or i.split == split]

    def split_queries(self, split: str | None) -> list[QueryInput]:
        return [q for q in self.queries if split is None or q.split == split]

    def pairs(self) -> list[CompatiblePair]:
        return [CompatiblePair(q, pattern_id=p) for q, ps in self.compatibility.items() for p in ps]

    def triplet_sampler(self, split: str | None = "train") -> TripletSampler:
        anchors = [q.id for q in self.split_queries(split) if q.id in self.compatibility]
        return TripletSampler(self.compatibility, self.members(split), anchors)


def _instance_record(inst: ForegroundInstance) -> dict:
    return {
        "id": inst.id,
        "image": f"images/fg/{inst.id}.png",
        "attributes": inst.attributes.to_dict() if inst.attributes else None,
        "pattern_id": inst.pattern_id,
        "split": inst.split,
    }


def _query_record(q: QueryInput) -> dict:
    return {
        "id": q.id,
        "background": f"images/bg/{q.id}.png",
        "rect": list(q.rect.as_tuple()),
        "source_id": q.source_id,
        "split": q.split,
    }


def manifest_document(corpus: Corpus) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "format_version": MANIFEST_VERSION,
        "category": corpus.schema.category,
        "schema": corpus.schema.to_dict(),
        "schema_hash": corpus.schema.digest(),
        "config": corpus.config,
        "config_hash": config_hash(corpus.config),
        "instances": [_instance_record(i) for i in corpus.instances],
        "queries": [_query_record(q) for q in corpus.queries],
        "compatibility": {q: list(ps) for q, ps in corpus.compatibility.items()},
    }


def write_manifest(corpus: Corpus, directory: str | Path) -> Path:
    """Write images and ``manifest.json`` under ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = manifest_document(corpus)
    for inst, rec in zip(corpus.instances, doc["instances"]):
        save_png(inst.image, directory / rec["image"])
    for q, rec in zip(corpus.queries, doc["queries"]):
        save_png(q.background, directory / rec["background"])
    path = directory / "manifest.json"
    # insertion order is meaningful (schema dimension order), so keys are not sorted
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def read_manifest(path: str | Path) -> Corpus:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path} is not a dataset manifest")
    if doc.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('format_version')}")
    root = path.parent
    schema = parse_schema(doc["schema"])
    instances = [
        ForegroundInstance(
            rec["id"],
            load_png(root / rec["image"]),
            AttributeVector.from_dict(rec["attributes"]).validate(schema) if rec["attributes"] else None,
            rec["pattern_id"],
            rec.get("split", "train"),
        )
        for rec in doc["instances"]
    ]
    queries = [
        QueryInput(rec["id"], load_png(root / rec["background"]), Rectangle(*rec["rect"]),
                   rec.get("source_id"), rec.get("split", "train"))
        for rec in doc["queries"]
    ]
    return Corpus(schema, instances, queries, {q: list(p) for q, p in doc["compatibility"].items()},
                  doc.get("config", {}))


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dataset_checksum(directory: str | Path) -> str:
    """Digest over the manifest and every file it references."""
    directory = Path(directory)
    doc = json.loads((directory / "manifest.json").read_text())
    h = hashlib.sha256((directory / "manifest.json").read_bytes())
    for rec in doc["instances"]:
        h.update((directory / rec["image"]).read_bytes())
    for rec in doc["queries"]:
        h.update((directory / rec["background"]).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic desk-scale corpus

# Shapes alternate tall (even index) and wide (odd index). A query is
# compatible with a pattern iff the pattern's color class equals the
# background tint class and the shape's aspect matches the rectangle's.
SHAPES = ("tall-bar", "wide-bar", "tall-ellipse", "wide-ellipse",
          "tall-triangle", "wide-triangle", "tall-diamond", "wide-diamond")
FG_COLORS = ((0.85, 0.12, 0.10), (0.10, 0.20, 0.85), (0.10, 0.65, 0.15),
             (0.95, 0.85, 0.10), (0.55, 0.10, 0.60), (0.05, 0.70, 0.75))
BG_HUES = (0.08, 0.58, 0.33, 0.15, 0.80, 0.48)


@dataclass
class SyntheticConfig:
    patterns: int = 8
    per_pattern: int = 30
    n_queries: int | None = None
    width: int = 64
    height: int = 48
    n_shapes: int = 4
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.patterns < 2:
            raise ValueError("synthetic corpus needs at least 2 patterns")
        if not 2 <= self.n_shapes <= len(SHAPES):
            raise ValueError(f"n_shapes must be in [2, {len(SHAPES)}]")
        if self.patterns > self.n_shapes * len(FG_COLORS):
            raise ValueError(f"at most {self.n_shapes * len(FG_COLORS)} patterns with {self.n_shapes} shapes")
        if self.per_pattern < 1:
            raise ValueError("per_pattern must be positive")
        if min(self.width, self.height) < 24:
            raise ValueError("synthetic images must be at least 24 px on each side")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")


def synthetic_pattern(p: int, n_shapes: int) -> tuple[int, int]:
    """(shape index, color class) of synthetic pattern ``p``."""
    return p % n_shapes, p // n_shapes


def synthetic_attributes(schema: AttributeSchema, shape: int, color: int) -> AttributeVector:
    orientation = schema.dimension("orientation").values[shape]
    truncation = schema.dimension("truncation").values[color]
    return AttributeVector(orientation, truncation)


def _shape_mask(shape: int, bw: int, bh: int) -> np.ndarray:
    v = (np.arange(bh) + 0.5) / bh * 2 - 1
    u = (np.arange(bw) + 0.5) / bw * 2 - 1
    uu, vv = np.meshgrid(u, v)
    kind = SHAPES[shape].split("-")[1]
    tall = shape % 2 == 0
    if kind == "bar":
        m = np.ones_like(uu, dtype=bool)
    elif kind == "ellipse":
        m = uu**2 + vv**2 <= 1.0
    elif kind == "triangle":
        along, across = (vv, uu) if tall else (uu, vv)
        m = np.abs(across) <= (along + 1) / 2
    else:
        m = np.abs(uu) + np.abs(vv) <= 1.0
    return m


def _background(rng: np.random.Generator, tint: int, h: int, w: int) -> np.ndarray:
    hue = (BG_HUES[tint] + rng.uniform(-0.03, 0.03)) % 1.0
    base = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.35, 0.5), rng.uniform(0.7, 0.85)))
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    texture = np.zeros((h, w))
    for _ in range(3):
        fx, fy = rng.uniform(1, 6, size=2)
        texture += np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    texture = 0.05 * texture / 3 + rng.normal(0, 0.02, size=(h, w))
    return np.clip(base[None, None, :] + texture[..., None], 0, 1)


def render_composite(rng: np.random.Generator, shape: int, color: int, width: int, height: int
                     ) -> tuple[np.ndarray, np.ndarray]:
    scale = min(width, height) / 48
    long_side = int(round(rng.uniform(20, 30) * scale))
    short_side = max(4, int(round(long_side / rng.uniform(2.2, 2.6))))
    bw, bh = (short_side, long_side) if shape % 2 == 0 else (long_side, short_side)
    x0 = int(rng.integers(0, width - bw + 1))
    y0 = int(rng.integers(0, height - bh + 1))
    image = _background(rng, color, height, width)
    local = _shape_mask(shape, bw, bh)
    mask = np.zeros((height, width), dtype=bool)
    mask[y0 : y0 + bh, x0 : x0 + bw] = local
    rgb = np.clip(np.array(FG_COLORS[color]) + rng.uniform(-0.05, 0.05, size=3), 0, 1)
    shade = 1.0 - 0.25 * np.linspace(0, 1, bh)[:, None] * rng.uniform(0.3, 1.0)
    patch = np.clip(rgb[None, None, :] * shade[..., None], 0, 1)
    region = image[y0 : y0 + bh, x0 : x0 + bw]
    region[local] = np.broadcast_to(patch, region.shape)[local]
    return quantize(image), mask


SYNTHETIC_RULES = ExclusionRules(min_area_fraction=0.005, min_side=4)


def generate_synthetic_corpus(config: SyntheticConfig, seed: int, schema: AttributeSchema | None = None) -> Corpus:
    """Deterministic desk-scale corpus: ``patterns * per_pattern`` composites decomposed into pairs."""
    config.validate()
    schema = schema or load_schema()
    n_test = int(math.ceil(config.test_fraction * config.per_pattern)) if config.test_fraction else 0
    instances: list[ForegroundInstance] = []
    queries: list[QueryInput] = []
    source_pattern: dict[str, int] = {}
    for p in range(config.patterns):
        shape, color = synthetic_pattern(p, config.n_shapes)
        attrs = synthetic_attributes(schema, shape, color)
        for k in range(config.per_pattern):
            index = p * config.per_pattern + k
            rng = np.random.default_rng([seed, index])
            image, mask = render_composite(rng, shape, color, config.width, config.height)
            comp = AnnotatedComposite(image, mask, schema.category, attrs)
            query, fg = decompose(comp, rules=SYNTHETIC_RULES, query_id=f"q-{index:05d}",
                                  instance_id=f"fg-{index:05d}")
            split = "test" if k >= config.per_pattern - n_test else "train"
            fg.image = quantize(fg.image)
            fg.split = split
            query.background = quantize(query.background)
            query.split = split
            instances.append(fg)
            queries.append(query)
            source_pattern[query.id] = p
    if config.n_queries is not None and config.n_queries < len(queries):
        keep = np.sort(np.random.default_rng([seed, 1 << 30]).choice(len(queries), config.n_queries, replace=False))
        queries = [queries[i] for i in keep]
    keys = {p: synthetic_attributes(schema, *synthetic_pattern(p, config.n_shapes)).key()
            for p in range(config.patterns)}
    compatibility = {}
    for q in queries:
        shape, color = synthetic_pattern(source_pattern[q.id], config.n_shapes)
        compatible = [
            keys[p] for p in range(config.patterns)
            if synthetic_pattern(p, config.n_shapes)[1] == color
            and synthetic_pattern(p, config.n_shapes)[0] % 2 == shape % 2
        ]
        if len(compatible) == config.patterns:
            raise ValueError("infeasible synthetic config: a query is compatible with every pattern")
        compatibility[q.id] = sorted(compatible)
    doc = {"source": "synthetic", "seed": seed, **asdict(config)}
    return Corpus(schema, instances, queries, compatibility, doc)


# ---------------------------------------------------------------------------
# annotation ingestion


def load_annotation_manifest(path: str | Path, schema: AttributeSchema | None = None) -> list[AnnotatedComposite]:
    """Read ``{"category": ..., "items": [{"image", "mask", "attributes"?}]}``; paths are relative to the file."""
    path = Path(path)
    schema = schema or load_schema()
    doc = json.loads(path.read_text())
    items = []
    for rec in doc["items"]:
        attrs = rec.get("attributes")
        attrs = AttributeVector.from_dict(attrs).validate(schema) if attrs else None
        items.append(AnnotatedComposite(load_png(path.parent / rec["image"]),
                                        load_mask(path.parent / rec["mask"]),
                                        doc.get("category", schema.category), attrs))
    return items


def corpus_from_annotations(items: Sequence[AnnotatedComposite], *, rules: ExclusionRules = ExclusionRules(),
                            inpainter: InpaintFn = mean_fill_inpaint, schema: AttributeSchema | None = None,
                            test_fraction: float = 0.2, seed: int = 0) -> tuple[Corpus, int]:
    """Decompose annotations into a corpus; each query is compatible with its own source pattern.

    Returns the corpus and the number of excluded samples.
    """
    schema = schema or load_schema()
    instances, queries, excluded = [], [], 0
    rng = np.random.default_rng(seed)
    for n, comp in enumerate(items):
        try:
            q, fg = decompose(comp, inpainter, rules=rules, query_id=f"q-{n:05d}", instance_id=f"fg-{n:05d}")
        except ExcludedSample:
            excluded += 1
            continue
        split = "test" if rng.uniform() < test_fraction else "train"
        fg.image, fg.split = quantize(fg.image), split
        q.background, q.split = quantize(q.background), split
        instances.append(fg)
        queries.append(q)
    compatibility = {
        q.id: [fg.pattern_id] for q, fg in zip(queries, instances) if fg.pattern_id is not None
    }
    config = {"source": "annotations", "seed": seed, "test_fraction": test_fraction,
              "min_area_fraction": rules.min_area_fraction, "min_side": rules.min_side}
    return Corpus(schema, instances, queries, compatibility, config), excluded

