"""Query encoder: the student network.

A query (background with the object removed, plus a rectangle) is square
cropped around the rectangle, the background is encoded by a frozen
extractor, the rectangle becomes a 4-value layout vector, and the two are
fused by their outer product. Two FC layers project the fused feature into
the teacher's embedding space, trained with a cosine triplet loss against
frozen teacher embeddings of compatible / incompatible foregrounds.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from decimal import ROUND_DOWN, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ConvExtractor
from .checkpoint import load_checkpoint, save_checkpoint, state_checksum
from .core import QueryInput, Rectangle
from .dataset import (
    Corpus,
    JitterConfig,
    NO_JITTER,
    augment_rectangle,
    color_jitter_batch,
    max_zoom_for,
    resample_window,
    resize_image,
)
from .fg_encoder import (
    FgEncoder,
    encode_batches,
    fg_encoder_from_payload,
    offline_views,
    total_fg_loss,
    update_centers,
)

log = logging.getLogger(__name__)

MODES = ("full", "early-fusion", "no-aug", "no-bg-freeze", "multi-task", "baseline-proxy")
EARLY_FUSION_MODES = ("early-fusion", "baseline-proxy")


@dataclass
class QueryTrainConfig:
    margin: float = 0.1
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.99
    eps: float = 1e-9
    batch_size: int = 16
    mode: str = "full"
    n_triplets: int = 20000
    epochs: int = 10
    patience: int = 2
    val_fraction: float = 0.1
    bg_dim: int = 32
    hidden_dim: int = 64
    bg_size: int = 32
    max_zoom: float = 2.0
    rect_growth: float = 0.5
    jitter: JitterConfig = field(default_factory=JitterConfig)
    fg_views: int = 4
    bg_pretrain_epochs: int = 6
    bg_pretrain_lr: float = 1e-3

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("lr", "batch_size", "n_triplets", "epochs", "bg_dim", "hidden_dim", "bg_size", "fg_views"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["jitter"] = list(asdict(self.jitter).values())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QueryTrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "jitter" in d and not isinstance(d["jitter"], JitterConfig):
            d["jitter"] = JitterConfig(*d["jitter"])
        return cls(**d)


# ---------------------------------------------------------------------------
# query preprocessing


def square_window(width: int, height: int, rect: Rectangle) -> tuple[int, int, int]:
    """(x0, y0, side) of the square crop in pixels.

    The side is min(W, H) unless the rectangle does not fit, in which case it
    grows to the rectangle's bounding square. The window is centered on the
    rectangle, then shifted as little as possible to stay inside the image
    (or, when larger than the image along an axis, to cover it).
    """
    side = min(width, height)
    need = max(rect.w * width, rect.h * height)
    if need > side:
        side = int(math.ceil(need - 1e-9))
    cx, cy = rect.cx * width, rect.cy * height

    def place(center: float, extent: int) -> int:
        lo, hi = min(0, extent - side), max(0, extent - side)
        return int(min(max(round(center - side / 2), lo), hi))

    return place(cx, width), place(cy, height), side


def square_crop(background: np.ndarray, rect: Rectangle) -> tuple[np.ndarray, Rectangle]:
    """Square-crop the background around the rectangle; returns the crop and the remapped rectangle."""
    h, w = background.shape[:2]
    x0, y0, side = square_window(w, h, rect)
    if x0 >= 0 and y0 >= 0 and x0 + side <= w and y0 + side <= h:
        crop = background[y0 : y0 + side, x0 : x0 + side].copy()
    else:
        mean = background.reshape(-1, 3).mean(axis=0, dtype=np.float64).astype(np.float32)
        crop = np.broadcast_to(mean, (side, side, 3)).copy()
        sx0, sy0 = max(x0, 0), max(y0, 0)
        sx1, sy1 = min(x0 + side, w), min(y0 + side, h)
        crop[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = background[sy0:sy1, sx0:sx1]
    remapped = Rectangle((rect.cx * w - x0) / side, (rect.cy * h - y0) / side, rect.w * w / side, rect.h * h / side)
    return crop, remapped


def truncate2(value: float) -> float:
    """Keep two decimals, truncating toward zero, from the shortest decimal repr (0.125 -> 0.12)."""
    return float(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_DOWN))


def layout_embedding(rect: Rectangle) -> np.ndarray:
    return np.array([truncate2(v) for v in rect.as_tuple()], dtype=np.float64)


def rect_pixels(rect: Rectangle, width: int, height: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = rect.corners()
    return (int(round(x0 * width)), int(round(y0 * height)), int(round(x1 * width)), int(round(y1 * height)))


def early_fuse(background: np.ndarray, rect: Rectangle) -> np.ndarray:
    """Fill the rectangle with the per-channel image mean (single-stream baseline input)."""
    h, w = background.shape[:2]
    out = np.array(background, dtype=np.float32, copy=True)
    x0, y0, x1, y1 = rect_pixels(rect, w, h)
    if x1 > x0 and y1 > y0:
        out[y0:y1, x0:x1] = background.reshape(-1, 3).mean(axis=0, dtype=np.float64).astype(np.float32)
    return out


def prepare_query(query: QueryInput, config: QueryTrainConfig, rng: np.random.Generator | None = None,
                  augment: bool = False, zoom: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(background image at ``bg_size``, layout vector). Early-fusion modes fill the rect first."""
    rect = augment_rectangle(query.rect, rng, config.rect_growth) if augment else query.rect
    crop, rect = square_crop(query.background, rect)
    if augment and zoom:
        z = rng.uniform(1.0, max_zoom_for(rect, config.max_zoom))
        s = 1.0 / z
        left, top, right, bottom = rect.corners()
        x_lo, x_hi = max(0.0, right - s), min(left, 1.0 - s)
        y_lo, y_hi = max(0.0, bottom - s), min(top, 1.0 - s)
        if z > 1.0 and x_hi >= x_lo and y_hi >= y_lo:
            x0, y0 = rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)
            crop = resample_window(crop, x0, y0, s, s)
            rect = Rectangle((rect.cx - x0) / s, (rect.cy - y0) / s, rect.w / s, rect.h / s)
    layout = layout_embedding(rect)
    if config.mode in EARLY_FUSION_MODES:
        crop = early_fuse(crop, rect)
    return resize_image(crop, config.bg_size), layout


def prepare_queries(queries: Sequence[QueryInput], config: QueryTrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    images, layouts = [], []
    for q in queries:
        img, lay = prepare_query(q, config)
        images.append(img)
        layouts.append(lay)
    if not images:
        return torch.zeros(0, 3, config.bg_size, config.bg_size), torch.zeros(0, 4)
    return (torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous(),
            torch.from_numpy(np.stack(layouts)).float())


# ---------------------------------------------------------------------------
# model and loss


def fuse(layout: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Batched outer product, flattened layout-major: out[:, i * d + j] = layout[:, i] * features[:, j]."""
    return (layout[:, :, None] * features[:, None, :]).flatten(1)


class QueryEncoder(nn.Module):
    def __init__(self, out_dim: int, config: QueryTrainConfig):
        super().__init__()
        self.config = config
        self.out_dim = out_dim
        self.background = ConvExtractor(config.bg_dim)
        self.early = config.mode in EARLY_FUSION_MODES
        in_dim = config.bg_dim if self.early else 4 * config.bg_dim
        self.head = nn.Sequential(
            nn.Linear(in_dim, config.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(config.hidden_dim, out_dim),
        )

    def project(self, images: torch.Tensor, layouts: torch.Tensor) -> torch.Tensor:
        """Un-normalized head output."""
        feats = self.background(images)
        fused = feats if self.early else fuse(layouts, feats)
        return self.head(fused)

    def forward(self, images: torch.Tensor, layouts: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.project(images, layouts), dim=1)


def triplet_loss(q: torch.Tensor, p: torch.Tensor, n: torch.Tensor, margin: float) -> torch.Tensor:
    """Mean of max(0, cos(q, n) - cos(q, p) + margin) over the batch (a single triplet is a batch of 1)."""
    sp = F.cosine_similarity(q, p, dim=-1, eps=1e-12)
    sn = F.cosine_similarity(q, n, dim=-1, eps=1e-12)
    return torch.relu(sn - sp + margin).mean()


@torch.no_grad()
def embed_queries(model: QueryEncoder, queries: Sequence[QueryInput], batch: int = 256) -> np.ndarray:
    images, layouts = prepare_queries(queries, model.config)
    was_training = model.training
    model.eval()
    out = [model(images[i : i + batch], layouts[i : i + batch]).double().numpy()
           for i in range(0, images.shape[0], batch)]
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.out_dim))


def embed_query(model: QueryEncoder, query: QueryInput) -> np.ndarray:
    return embed_queries(model, [query])[0]


# ---------------------------------------------------------------------------
# background extractor pretraining


def query_class_labels(corpus: Corpus, queries: Sequence[QueryInput], class_ids: Sequence[str]) -> list[int]:
    """Scene label of a query: its source foreground's pattern, else its first compatible pattern."""
    lookup = {p: i for i, p in enumerate(class_ids)}
    labels = []
    for q in queries:
        pid = None
        if q.source_id is not None:
            try:
                pid = corpus.instance(q.source_id).pattern_id
            except KeyError:
                pid = None
        if pid is None:
            pid = sorted(corpus.compatibility.get(q.id, []))[0]
        labels.append(lookup[pid])
    return labels


def pretrain_background_extractor(corpus: Corpus, config: QueryTrainConfig, class_ids: Sequence[str],
                                  seed: int) -> ConvExtractor:
    """Briefly train the scene extractor on background classification; returned frozen in eval mode."""
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 7])
    queries = [q for q in corpus.split_queries("train") if q.id in corpus.compatibility]
    labels = torch.tensor(query_class_labels(corpus, queries, class_ids))
    plain = QueryTrainConfig.from_dict({**config.to_dict(), "mode": "full"})
    extractor = ConvExtractor(config.bg_dim)
    clf = nn.Linear(config.bg_dim, len(class_ids))
    opt = torch.optim.Adam(list(extractor.parameters()) + list(clf.parameters()), lr=config.bg_pretrain_lr)
    for _ in range(config.bg_pretrain_epochs):
        for _rep in range(4):
            batch_imgs = torch.from_numpy(np.stack(
                [prepare_query(q, plain, rng, augment=True)[0] for q in queries])).permute(0, 3, 1, 2)
            batch_imgs = color_jitter_batch(batch_imgs, rng, config.jitter)
            order = torch.from_numpy(rng.permutation(len(queries)))
            for start in range(0, len(order), 32):
                idx = order[start : start + 32]
                loss = F.cross_entropy(clf(extractor(batch_imgs[idx])), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
    extractor.eval()
    for p in extractor.parameters():
        p.requires_grad_(False)
    return extractor


# ---------------------------------------------------------------------------
# training


@dataclass
class QueryTrainResult:
    model: QueryEncoder
    foreground: FgEncoder
    history: list[dict]
    mode: str
    teacher_checksum_before: str
    teacher_checksum_after: str


def _sample_triplets(sampler, anchors: Sequence[str], n: int, rng: np.random.Generator) -> list[tuple[str, str, str]]:
    return [sampler.sample(rng, anchors[rng.integers(len(anchors))]) for _ in range(n)]


def train_query_encoder(teacher: FgEncoder | None, corpus: Corpus, config: QueryTrainConfig, seed: int,
                        background: ConvExtractor | None = None,
                        metrics_log: str | Path | None = None) -> QueryTrainResult:
    """Distill the teacher's embedding space into the query encoder.

    ``full``/``no-aug`` keep teacher and background extractor frozen;
    ``no-bg-freeze`` trains the background extractor; ``early-fusion`` feeds
    the mean-filled background to a trainable single stream; ``multi-task``
    fine-tunes a copy of the teacher with its own loss added;
    ``baseline-proxy`` is early fusion with a foreground stream trained from
    scratch by the triplet loss alone. The caller's teacher is never modified.
    """
    if teacher is None:
        raise ValueError("a trained foreground encoder (teacher) is required")
    config.validate()
    mode = config.mode
    checksum_before = teacher.checksum()
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 11])

    if mode == "baseline-proxy":
        torch.manual_seed(seed + 1)
        fg = FgEncoder(teacher.class_ids, teacher.config)
    elif mode == "multi-task":
        fg = copy.deepcopy(teacher)
    else:
        fg = teacher
    fg_trainable = mode in ("multi-task", "baseline-proxy")
    fg.eval()

    if background is None:
        background = pretrain_background_extractor(corpus, config, teacher.class_ids, seed)
    torch.manual_seed(seed + 2)
    model = QueryEncoder(teacher.dim, config)
    model.background.load_state_dict(background.state_dict())
    bg_trainable = mode in ("no-bg-freeze", "early-fusion", "baseline-proxy")
    for p in model.background.parameters():
        p.requires_grad_(bg_trainable)

    train_queries = [q for q in corpus.split_queries("train") if q.id in corpus.compatibility]
    ids = [q.id for q in train_queries]
    perm = rng.permutation(len(ids))
    n_val = int(round(config.val_fraction * len(ids))) if len(ids) > 4 else 0
    val_ids = sorted(ids[i] for i in perm[:n_val])
    fit_ids = sorted(ids[i] for i in perm[n_val:])
    sampler = corpus.triplet_sampler("train")

    instances = corpus.split_instances("train")
    inst_index = {inst.id: k for k, inst in enumerate(instances)}
    views = offline_views(instances, config.fg_views, teacher.config.image_size, teacher.config.max_padding, rng)
    inst_labels = fg.label_index([i.pattern_id for i in instances])

    def frozen_fg_embeddings() -> torch.Tensor:
        flat = color_jitter_batch(views.reshape(-1, *views.shape[2:]), rng, teacher.config.jitter, keep_white=True)
        feats, _ = encode_batches(fg, flat)
        return F.normalize(torch.from_numpy(feats).float(), dim=1).reshape(views.shape[0], views.shape[1], -1)

    fg_table = None if fg_trainable else frozen_fg_embeddings()

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
    fg_opt = None
    if mode == "multi-task":
        tc = teacher.config
        fg_opt = torch.optim.SGD(fg.parameters(), lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)
    elif mode == "baseline-proxy":
        fg_opt = torch.optim.Adam(fg.parameters(), lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)

    query_by_id = {q.id: q for q in train_queries}
    zoom = mode not in ("no-aug",) + EARLY_FUSION_MODES
    val_triplets = _sample_triplets(sampler, val_ids, max(64, 4 * len(val_ids)), np.random.default_rng([seed, 13])) \
        if val_ids else []
    val_batch = None
    if val_triplets:
        imgs, lays = prepare_queries([query_by_id[a] for a, _, _ in val_triplets], config)
        val_batch = (imgs, lays, [inst_index[p] for _, p, _ in val_triplets], [inst_index[n] for _, _, n in val_triplets])

    def fg_embed_train(rows: list[int], view_idx: np.ndarray) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        imgs = views[rows, view_idx]
        imgs = color_jitter_batch(imgs, rng, teacher.config.jitter, keep_white=True)
        x, logits = fg(imgs)
        return x, logits, inst_labels[rows]

    def validate() -> float:
        if val_batch is None:
            return float("nan")
        imgs, lays, pos, neg = val_batch
        model.eval()
        with torch.no_grad():
            q = model(imgs, lays)
            if fg_table is not None:
                pe, ne = fg_table[pos, 0], fg_table[neg, 0]
            else:
                fg.eval()
                pe = F.normalize(fg(views[pos, 0])[0], dim=1)
                ne = F.normalize(fg(views[neg, 0])[0], dim=1)
            loss = triplet_loss(q, pe, ne, config.margin).item()
        return loss

    history: list[dict] = []
    best = (math.inf, None, None)
    bad_epochs = 0
    triplets = _sample_triplets(sampler, fit_ids, config.n_triplets, rng)
    for epoch in range(config.epochs):
        model.train()
        if not bg_trainable:
            model.background.eval()
        if fg_trainable:
            fg.train()
        order = rng.permutation(len(triplets))
        total, active, steps = 0.0, 0.0, 0
        for start in range(0, len(order), config.batch_size):
            chunk = [triplets[i] for i in order[start : start + config.batch_size]]
            prepared = [prepare_query(query_by_id[a], config, rng, augment=True, zoom=zoom) for a, _, _ in chunk]
            imgs = torch.from_numpy(np.stack([p[0] for p in prepared])).permute(0, 3, 1, 2)
            imgs = color_jitter_batch(imgs, rng, config.jitter)
            lays = torch.from_numpy(np.stack([p[1] for p in prepared])).float()
            pos = [inst_index[p] for _, p, _ in chunk]
            neg = [inst_index[n] for _, _, n in chunk]
            vp = rng.integers(config.fg_views, size=len(chunk))
            vn = rng.integers(config.fg_views, size=len(chunk))
            q = model(imgs, lays)
            if fg_table is not None:
                pe, ne = fg_table[pos, vp], fg_table[neg, vn]
                extra = None
            else:
                x, logits, labels = fg_embed_train(pos + neg, np.concatenate([vp, vn]))
                pe, ne = F.normalize(x[: len(chunk)], dim=1), F.normalize(x[len(chunk) :], dim=1)
                extra = (x, logits, labels)
            with torch.no_grad():
                margins = F.cosine_similarity(q, ne, dim=-1) - F.cosine_similarity(q, pe, dim=-1) + config.margin
            loss = triplet_loss(q, pe, ne, config.margin)
            objective = loss
            if mode == "multi-task":
                x, logits, labels = extra
                lf, _, _ = total_fg_loss(logits, x, labels, fg.centers, teacher.config.center_weight)
                objective = objective + lf
            opt.zero_grad()
            if fg_opt is not None:
                fg_opt.zero_grad()
            objective.backward()
            opt.step()
            if fg_opt is not None:
                fg_opt.step()
            if mode == "multi-task":
                x, _, labels = extra
                fg.centers.copy_(update_centers(fg.centers, x, labels, teacher.config.center_lr))
            total += loss.item()
            active += float((margins > 0).float().mean())
            steps += 1
        fg.eval()
        val_loss = validate()
        row = {"epoch": epoch + 1, "triplet_loss": total / steps, "active_fraction": active / steps,
               "val_loss": val_loss}
        history.append(row)
        log.info("[%s] epoch %d  loss %.4f  active %.3f  val %.4f", mode, epoch + 1, row["triplet_loss"],
                 row["active_fraction"], val_loss)
        if math.isnan(val_loss):
            continue
        if val_loss < best[0] - 1e-6:
            best = (val_loss, copy.deepcopy(model.state_dict()),
                    copy.deepcopy(fg.state_dict()) if fg_trainable else None)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    if best[1] is not None:
        model.load_state_dict(best[1])
        if best[2] is not None:
            fg.load_state_dict(best[2])
    model.eval()
    fg.eval()
    if metrics_log is not None:
        from .fg_encoder import write_metrics_log

        write_metrics_log(metrics_log, history)
    return QueryTrainResult(model, fg, history, mode, checksum_before, teacher.checksum())


# ---------------------------------------------------------------------------
# persistence


def save_query_encoder(result: QueryTrainResult, path: str | Path, *, teacher_checksum: str,
                       schema_hash: str, run_config: dict | None = None) -> Path:
    payload = {
        "state": result.model.state_dict(),
        "out_dim": result.model.out_dim,
        "config": result.model.config.to_dict(),
        "mode": result.mode,
        "teacher_checksum": teacher_checksum,
        "schema_hash": schema_hash,
        "run_config": run_config or {},
    }
    if result.mode in ("multi-task", "baseline-proxy"):
        fg = result.foreground
        payload["foreground"] = {"state": fg.state_dict(), "class_ids": list(fg.class_ids),
                                 "config": fg.config.to_dict()}
    return save_checkpoint(path, "query-encoder", payload)


def load_query_encoder(path: str | Path) -> tuple[QueryEncoder, FgEncoder | None, dict]:
    """Returns (query encoder, fine-tuned foreground encoder or None, payload)."""
    payload = load_checkpoint(path, "query-encoder")
    model = QueryEncoder(payload["out_dim"], QueryTrainConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    fg = fg_encoder_from_payload(payload["foreground"]) if "foreground" in payload else None
    return model, fg, payload


def model_checksum(model: nn.Module) -> str:
    return state_checksum(model.state_dict())
