"""Foreground encoder: the teacher network.

A feature extractor plus a linear pattern classifier, trained with softmax
loss and center loss. Raw features feed the classifier and the center loss;
retrieval and distillation use their L2-normalized form.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import build_extractor
from .checkpoint import load_checkpoint, save_checkpoint, state_checksum
from .core import AttributeVector, ForegroundInstance
from .dataset import (
    Corpus,
    JitterConfig,
    NO_JITTER,
    augment_foreground,
    color_jitter_batch,
    resize_image,
)

log = logging.getLogger(__name__)


@dataclass
class FgTrainConfig:
    center_weight: float = 0.005
    lr: float = 0.02
    center_lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    batch_size: int = 32
    epochs: int = 12
    embed_dim: int = 32
    image_size: int = 32
    aug_multiplicity: int = 20
    max_padding: float = 0.2
    jitter: JitterConfig = field(default_factory=JitterConfig)
    backbone: str = "conv-small"
    backbone_weights: str | None = None

    def validate(self) -> None:
        if self.center_weight < 0:
            raise ValueError("center_weight must be non-negative")
        for name in ("lr", "center_lr", "lr_decay", "batch_size", "embed_dim", "image_size", "aug_multiplicity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.center_lr <= 1:
            raise ValueError("center_lr must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["jitter"] = list(asdict(self.jitter).values())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FgTrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "jitter" in d and not isinstance(d["jitter"], JitterConfig):
            d["jitter"] = JitterConfig(*d["jitter"])
        return cls(**d)


# ---------------------------------------------------------------------------
# losses


def softmax_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the softmax over classes."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("labels out of range")
    return F.cross_entropy(logits, labels)


def center_loss(x: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Half the summed squared distance of each feature to its class center (summed, not averaged)."""
    if x.shape[1] != centers.shape[1]:
        raise ValueError(f"feature dim {x.shape[1]} does not match center dim {centers.shape[1]}")
    if labels.numel() and labels.max() >= centers.shape[0]:
        raise ValueError("label without a center")
    return 0.5 * (x - centers[labels]).pow(2).sum()


def total_fg_loss(logits: torch.Tensor, x: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor,
                  center_weight: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (total, softmax term, center term) with total = softmax + weight * center."""
    ls = softmax_loss(logits, labels)
    lc = center_loss(x, labels, centers)
    return ls + center_weight * lc, ls, lc


@torch.no_grad()
def update_centers(centers: torch.Tensor, x: torch.Tensor, labels: torch.Tensor, alpha: float) -> torch.Tensor:
    """One center-loss center step: c_j -= alpha * sum_{y_i=j}(c_j - x_i) / (1 + n_j).

    Classes absent from the batch keep their centers. Returns a new tensor.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    x = x.detach().to(centers.dtype)
    diff = torch.zeros_like(centers).index_add_(0, labels, centers[labels] - x)
    counts = torch.zeros(centers.shape[0], dtype=centers.dtype).index_add_(
        0, labels, torch.ones(labels.shape[0], dtype=centers.dtype))
    return centers - alpha * diff / (1.0 + counts)[:, None]


# ---------------------------------------------------------------------------
# model


class FgEncoder(nn.Module):
    def __init__(self, class_ids: Sequence[str], config: FgTrainConfig):
        super().__init__()
        self.class_ids = list(class_ids)
        self.config = config
        self.extractor = build_extractor(config.backbone, config.embed_dim, config.backbone_weights)
        self.classifier = nn.Linear(config.embed_dim, len(self.class_ids))
        self.register_buffer("centers", torch.zeros(len(self.class_ids), config.embed_dim))

    @property
    def dim(self) -> int:
        return self.config.embed_dim

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.extractor(images)
        return x, self.classifier(x)

    def label_index(self, pattern_ids: Sequence[str]) -> torch.Tensor:
        lookup = {p: i for i, p in enumerate(self.class_ids)}
        return torch.tensor([lookup[p] for p in pattern_ids], dtype=torch.long)

    def checksum(self) -> str:
        return state_checksum(self.state_dict())


def prepare_foregrounds(images: Sequence[np.ndarray], size: int) -> torch.Tensor:
    out = []
    for img in images:
        img = np.asarray(img, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
            raise ValueError(f"foreground image must be square H x H x 3, got {img.shape}")
        out.append(torch.from_numpy(resize_image(img, size)).permute(2, 0, 1))
    if not out:
        return torch.zeros(0, 3, size, size)
    return torch.stack(out)


@torch.no_grad()
def encode_batches(model: FgEncoder, images: torch.Tensor, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Raw features and logits for a prepared image tensor, in eval mode."""
    was_training = model.training
    model.eval()
    feats, logits = [], []
    for i in range(0, images.shape[0], batch):
        x, z = model(images[i : i + batch])
        feats.append(x.double().numpy())
        logits.append(z.double().numpy())
    model.train(was_training)
    if not feats:
        return np.zeros((0, model.dim)), np.zeros((0, len(model.class_ids)))
    return np.concatenate(feats), np.concatenate(logits)


def embed_foregrounds(model: FgEncoder, images: Sequence[np.ndarray]) -> np.ndarray:
    feats, _ = encode_batches(model, prepare_foregrounds(images, model.config.image_size))
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("degenerate zero embedding")
    return feats / norms


def embed_foreground(model: FgEncoder, image: np.ndarray) -> np.ndarray:
    return embed_foregrounds(model, [image])[0]


def rank_classes(logits: np.ndarray, class_ids: Sequence[str]) -> list[str]:
    """Class ids by descending logit; ties by ascending pattern id."""
    order = sorted(range(len(class_ids)), key=lambda i: (-logits[i], class_ids[i]))
    return [class_ids[i] for i in order]


def classify_pattern(model: FgEncoder, image: np.ndarray, k: int) -> list[str]:
    if not 1 <= k <= len(model.class_ids):
        raise ValueError(f"k={k} outside [1, {len(model.class_ids)}]")
    _, logits = encode_batches(model, prepare_foregrounds([image], model.config.image_size))
    return rank_classes(logits[0], model.class_ids)[:k]


def classify_patterns(model: FgEncoder, images: Sequence[np.ndarray], k: int) -> list[list[str]]:
    if not 1 <= k <= len(model.class_ids):
        raise ValueError(f"k={k} outside [1, {len(model.class_ids)}]")
    _, logits = encode_batches(model, prepare_foregrounds(images, model.config.image_size))
    return [rank_classes(row, model.class_ids)[:k] for row in logits]


def auto_label(model: FgEncoder, instances: Sequence[ForegroundInstance],
               min_confidence: float | None = None) -> list[ForegroundInstance]:
    """Label unannotated instances with the top-1 predicted pattern.

    With ``min_confidence`` set, predictions whose softmax probability falls
    below it are left unlabelled.
    """
    todo = [i for i in instances if i.pattern_id is None]
    if not todo:
        return list(instances)
    _, logits = encode_batches(model, prepare_foregrounds([i.image for i in todo], model.config.image_size))
    probs = torch.softmax(torch.from_numpy(logits), dim=1).numpy()
    labelled = {}
    for inst, row, p in zip(todo, logits, probs):
        best = rank_classes(row, model.class_ids)[0]
        if min_confidence is not None and p[model.class_ids.index(best)] < min_confidence:
            continue
        labelled[inst.id] = ForegroundInstance(inst.id, inst.image, AttributeVector.from_key(best), best, inst.split)
    return [labelled.get(i.id, i) for i in instances]


# ---------------------------------------------------------------------------
# training


@dataclass
class FgTrainResult:
    model: FgEncoder
    history: list[dict]


def offline_views(instances: Sequence[ForegroundInstance], n: int, size: int, max_padding: float,
                  rng: np.random.Generator) -> torch.Tensor:
    """``n`` randomly padded views of every instance, shape (len(instances), n, 3, size, size)."""
    views = []
    for inst in instances:
        per = [augment_foreground(inst, rng, max_padding=max_padding, jitter=NO_JITTER, size=size).image
               for _ in range(n)]
        views.append(torch.from_numpy(np.stack(per)).permute(0, 3, 1, 2))
    return torch.stack(views)


def pattern_accuracy(model: FgEncoder, instances: Sequence[ForegroundInstance], k: int = 1) -> float:
    if not instances:
        return float("nan")
    preds = classify_patterns(model, [i.image for i in instances], min(k, len(model.class_ids)))
    return float(np.mean([inst.pattern_id in p for inst, p in zip(instances, preds)]))


def train_foreground_encoder(corpus: Corpus, config: FgTrainConfig, seed: int,
                             metrics_log: str | Path | None = None) -> FgTrainResult:
    """Train the teacher on the corpus' train split; top-1 on the test split is tracked per epoch."""
    config.validate()
    members = corpus.members("train")
    if len(members) < 2 or any(len(m) < 2 for m in members.values()):
        raise ValueError("need at least 2 patterns with at least 2 training instances each")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    class_ids = sorted(members)
    model = FgEncoder(class_ids, config)
    train = [i for i in corpus.split_instances("train") if i.pattern_id is not None]
    val = [i for i in corpus.split_instances("test") if i.pattern_id in members]
    views = offline_views(train, config.aug_multiplicity, config.image_size, config.max_padding, rng)
    images = views.reshape(-1, *views.shape[2:])
    labels = model.label_index([i.pattern_id for i in train]).repeat_interleave(config.aug_multiplicity)

    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_decay_every, gamma=config.lr_decay)
    history = []
    for epoch in range(config.epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(images.shape[0]))
        sums = np.zeros(3)
        steps = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = color_jitter_batch(images[idx], rng, config.jitter, keep_white=True)
            y = labels[idx]
            x, logits = model(batch)
            loss, ls, lc = total_fg_loss(logits, x, y, model.centers, config.center_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.centers.copy_(update_centers(model.centers, x, y, config.center_lr))
            sums += [ls.item(), lc.item(), loss.item()]
            steps += 1
        sched.step()
        ls, lc, lf = sums / steps
        top1 = pattern_accuracy(model, val, 1)
        row = {"epoch": epoch + 1, "softmax_loss": ls, "center_loss": lc, "total_loss": lf, "val_top1": top1}
        history.append(row)
        log.info("epoch %d  L_S %.4f  L_C %.4f  L_f %.4f  val top-1 %.3f", epoch + 1, ls, lc, lf, top1)
    model.eval()
    if metrics_log is not None:
        write_metrics_log(metrics_log, history)
    return FgTrainResult(model, history)


def write_metrics_log(path: str | Path, history: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(history[0]) if history else []
    lines = ["\t".join(keys)] + ["\t".join(f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k])
                                           for k in keys) for row in history]
    path.write_text("\n".join(lines) + "\n")


def intra_pattern_variance(embeddings: np.ndarray, pattern_ids: Sequence[str]) -> float:
    """Mean over patterns of the mean squared distance of members to their pattern mean."""
    pattern_ids = np.asarray(pattern_ids)
    values = []
    for p in sorted(set(pattern_ids.tolist())):
        e = embeddings[pattern_ids == p]
        values.append(float(((e - e.mean(axis=0)) ** 2).sum(axis=1).mean()))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# persistence


def save_fg_encoder(model: FgEncoder, path: str | Path, *, schema_hash: str, run_config: dict | None = None) -> Path:
    return save_checkpoint(path, "foreground-encoder", {
        "state": model.state_dict(),
        "class_ids": list(model.class_ids),
        "config": model.config.to_dict(),
        "schema_hash": schema_hash,
        "run_config": run_config or {},
    })


def load_fg_encoder(path: str | Path) -> tuple[FgEncoder, dict]:
    payload = load_checkpoint(path, "foreground-encoder")
    return fg_encoder_from_payload(payload), payload


def fg_encoder_from_payload(payload: dict) -> FgEncoder:
    model = FgEncoder(payload["class_ids"], FgTrainConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def clone(model: FgEncoder) -> FgEncoder:
    return copy.deepcopy(model)
