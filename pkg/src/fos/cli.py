"""``fos`` command line: build-dataset, train-foreground, train-query, index, search, evaluate, ablate.

Exit codes: 0 ok, 2 bad input, 3 missing prerequisite artifact, 4 corrupt artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CorruptCheckpoint
from .config import ConfigError, RunConfig, load_config
from .core import QueryInput, Rectangle
from .dataset import (
    Corpus,
    corpus_from_annotations,
    dataset_checksum,
    generate_synthetic_corpus,
    load_annotation_manifest,
    load_png,
    read_manifest,
    write_manifest,
)
from .retrieval import StoreError

log = logging.getLogger("fos")

EXIT_OK, EXIT_BAD_INPUT, EXIT_MISSING, EXIT_CORRUPT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _config_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="YAML file with flat config keys")
    group = parent.add_argument_group("config keys (override the config file)")
    for f in fields(RunConfig):
        group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parser()
    parser = argparse.ArgumentParser(prog="fos", description="Foreground object search by knowledge distillation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", parents=[parent], help="write a dataset manifest and images")
    p.add_argument("--synthetic", action="store_true", help="generate the synthetic corpus (source=synthetic)")

    sub.add_parser("train-foreground", parents=[parent], help="train the foreground encoder (teacher)")
    sub.add_parser("train-query", parents=[parent], help="train the query encoder (student)")
    sub.add_parser("index", parents=[parent], help="embed all foregrounds into an embedding store")

    p = sub.add_parser("search", parents=[parent], help="search the index with a background and rectangle")
    p.add_argument("--background", required=True, help="background image file")
    p.add_argument("--rect", required=True, help="cx,cy,w,h normalized to the background")
    p.add_argument("--level", choices=("instance", "pattern"), default="instance")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--members", type=int, default=2, help="instances shown per pattern in the grid")
    p.add_argument("--grid", help="write a retrieval grid PNG here")

    sub.add_parser("evaluate", parents=[parent], help="score mAP and top-k accuracy on the eval set")

    p = sub.add_parser("ablate", parents=[parent], help="train and score ablation variants")
    p.add_argument("--modes", help="comma-separated modes (default: all)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if getattr(args, "synthetic", False):
        overrides["source"] = "synthetic"
    try:
        return load_config(args.config, overrides)
    except FileNotFoundError as exc:
        raise CliError(EXIT_BAD_INPUT, f"config file not found: {exc.filename}")
    except (ConfigError, ValueError) as exc:
        raise CliError(EXIT_BAD_INPUT, str(exc))


def _load_corpus(cfg: RunConfig) -> Corpus:
    path = cfg.dataset_dir / "manifest.json"
    if not path.exists():
        raise CliError(EXIT_MISSING, f"{path} not found; run build-dataset first")
    try:
        return read_manifest(path)
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(EXIT_CORRUPT, f"cannot read dataset manifest: {exc}")


def _load_teacher(cfg: RunConfig):
    from .fg_encoder import load_fg_encoder

    if not cfg.teacher_path.exists():
        raise CliError(EXIT_MISSING, f"{cfg.teacher_path} not found; train foreground encoder first")
    model, payload = load_fg_encoder(cfg.teacher_path)
    return model, payload


def _load_student(cfg: RunConfig):
    from .query_encoder import load_query_encoder

    path = cfg.student_path()
    if not path.exists():
        raise CliError(EXIT_MISSING, f"{path} not found; run train-query --ablation {cfg.ablation} first")
    return load_query_encoder(path)


def _foreground_model(cfg: RunConfig):
    """Teacher, unless the student checkpoint carries its own fine-tuned foreground encoder."""
    teacher, _ = _load_teacher(cfg)
    if cfg.student_path().exists():
        _, fg, _ = _load_student(cfg)
        if fg is not None:
            return fg
    return teacher


# ---------------------------------------------------------------------------
# commands


def cmd_build_dataset(cfg: RunConfig, args) -> int:
    seed = cfg.resolved_seed
    if cfg.source == "synthetic":
        corpus = generate_synthetic_corpus(cfg.synthetic_config(), seed)
        excluded = 0
    else:
        src = Path(cfg.source)
        if not src.exists():
            raise CliError(EXIT_BAD_INPUT, f"annotation manifest {src} not found")
        try:
            items = load_annotation_manifest(src)
        except (ValueError, KeyError, OSError) as exc:
            raise CliError(EXIT_BAD_INPUT, f"invalid annotation manifest: {exc}")
        corpus, excluded = corpus_from_annotations(items, rules=cfg.exclusion_rules(),
                                                   test_fraction=cfg.test_fraction, seed=seed)
    corpus.config["run_config_hash"] = cfg.digest()
    path = write_manifest(corpus, cfg.dataset_dir)
    print(f"instances {len(corpus.instances)}  patterns {len(corpus.patterns())}  "
          f"queries {len(corpus.queries)}  excluded {excluded}")
    print(f"manifest {path}")
    print(f"checksum {dataset_checksum(cfg.dataset_dir)}")
    return EXIT_OK


def cmd_train_foreground(cfg: RunConfig, args) -> int:
    from .fg_encoder import auto_label, pattern_accuracy, save_fg_encoder, train_foreground_encoder

    corpus = _load_corpus(cfg)
    result = train_foreground_encoder(corpus, cfg.fg_config(), cfg.resolved_seed,
                                      metrics_log=cfg.root / "teacher_metrics.tsv")
    save_fg_encoder(result.model, cfg.teacher_path, schema_hash=corpus.schema.digest(), run_config=cfg.to_dict())
    val = [i for i in corpus.split_instances("test") if i.pattern_id in result.model.class_ids]
    unlabelled = [i for i in corpus.instances if i.pattern_id is None]
    if unlabelled:
        labelled = auto_label(result.model, corpus.instances, cfg.auto_label_confidence)
        n = sum(1 for a, b in zip(corpus.instances, labelled) if a.pattern_id is None and b.pattern_id is not None)
        print(f"auto-labelled {n} of {len(unlabelled)} unannotated foregrounds")
    print(f"validation top-1 {pattern_accuracy(result.model, val, 1):.4f}  "
          f"top-5 {pattern_accuracy(result.model, val, 5):.4f}")
    print(f"checkpoint {cfg.teacher_path}")
    return EXIT_OK


def cmd_train_query(cfg: RunConfig, args) -> int:
    from .query_encoder import save_query_encoder, train_query_encoder

    teacher, _ = _load_teacher(cfg)
    corpus = _load_corpus(cfg)
    mode = cfg.ablation
    result = train_query_encoder(teacher, corpus, cfg.query_config(mode), cfg.resolved_seed,
                                 metrics_log=cfg.root / f"student-{mode}_metrics.tsv")
    path = save_query_encoder(result, cfg.student_path(mode), teacher_checksum=teacher.checksum(),
                              schema_hash=corpus.schema.digest(), run_config=cfg.to_dict())
    last = result.history[-1] if result.history else {}
    print(f"mode {mode}  epochs {len(result.history)}  final loss {last.get('triplet_loss', float('nan')):.4f}")
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_index(cfg: RunConfig, args) -> int:
    from .fg_encoder import embed_foregrounds
    from .retrieval import build_index, write_store

    fg = _foreground_model(cfg)
    corpus = _load_corpus(cfg)
    emb = embed_foregrounds(fg, [i.image for i in corpus.instances])
    store = build_index(emb, [i.id for i in corpus.instances], [i.pattern_id for i in corpus.instances], fg.dim)
    path = write_store(store, cfg.store_path, cfg.digest())
    print(f"indexed {store.n} foregrounds (d={store.dim}) -> {path}")
    return EXIT_OK


def parse_rect(text: str) -> Rectangle:
    try:
        cx, cy, w, h = (float(v) for v in text.split(","))
    except ValueError:
        raise CliError(EXIT_BAD_INPUT, f"--rect expects cx,cy,w,h; got {text!r}")
    if not (0 <= cx <= 1 and 0 <= cy <= 1 and 0 < w <= 1 and 0 < h <= 1):
        raise CliError(EXIT_BAD_INPUT, "--rect values must lie in [0, 1] with positive size")
    x0, y0, x1, y1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    tol = 1e-9
    if x0 < -tol or y0 < -tol or x1 > 1 + tol or y1 > 1 + tol:
        raise CliError(EXIT_BAD_INPUT, "--rect extends outside the unit square")
    return Rectangle(cx, cy, w, h)


def cmd_search(cfg: RunConfig, args) -> int:
    from .query_encoder import embed_query
    from .retrieval import pattern_centroids, read_store, search_instances, stratified_results

    rect = parse_rect(args.rect)
    if args.k < 1:
        raise CliError(EXIT_BAD_INPUT, "-k must be at least 1")
    bg_path = Path(args.background)
    if not bg_path.exists():
        raise CliError(EXIT_BAD_INPUT, f"background {bg_path} not found")
    if not cfg.store_path.exists():
        raise CliError(EXIT_MISSING, f"{cfg.store_path} not found; run index first")
    store = read_store(cfg.store_path)
    student, _, _ = _load_student(cfg)
    q = embed_query(student, QueryInput("query", load_png(bg_path), rect))
    columns = []
    corpus = _load_corpus(cfg) if args.grid else None
    if args.level == "instance":
        if args.k > store.n:
            print(f"warning: k={args.k} exceeds the {store.n} indexed foregrounds; returning all", file=sys.stderr)
        for rank, (iid, score) in enumerate(search_instances(store, q, args.k), 1):
            print(f"{rank}\t{iid}\t{score:.6f}")
            if corpus:
                columns.append([corpus.instance(iid).image])
    else:
        pindex = pattern_centroids(store)
        if args.k > len(pindex.pattern_ids):
            print(f"warning: k={args.k} exceeds the {len(pindex.pattern_ids)} patterns; returning all",
                  file=sys.stderr)
        for rank, (pid, score, members) in enumerate(stratified_results(store, pindex, q, args.k, args.members), 1):
            print(f"{rank}\t{pid}\t{score:.6f}\t" + ",".join(m for m, _ in members))
            if corpus:
                columns.append([corpus.instance(m).image for m, _ in members])
    if args.grid:
        from .visualize import write_grid

        n_cols, n_rows = write_grid(args.grid, load_png(bg_path), rect, columns)
        print(f"grid {args.grid} ({n_cols} columns x {n_rows} rows)")
    return EXIT_OK


def _eval_set(cfg: RunConfig, corpus: Corpus):
    from .evaluation import build_eval_set

    try:
        return build_eval_set(corpus, cfg.min_pattern_size, cfg.eval_per_pattern, cfg.eval_queries,
                              seed=cfg.resolved_seed)
    except ValueError as exc:
        raise CliError(EXIT_BAD_INPUT, f"empty evaluation set: {exc}")


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .evaluation import evaluate_models, topk_accuracy, write_eval_report
    from .fg_encoder import classify_patterns

    corpus = _load_corpus(cfg)
    eval_set = _eval_set(cfg, corpus)
    student, _, _ = _load_student(cfg)
    fg = _foreground_model(cfg)
    result = evaluate_models(eval_set, corpus, student, fg)
    images = [corpus.instance(i).image for i in eval_set.store_ids]
    k_max = min(5, len(fg.class_ids))
    preds = classify_patterns(fg, images, k_max)
    topk = {f"top{k}": topk_accuracy(preds, eval_set.store_patterns, k) for k in (1, 5) if k <= k_max}
    path = write_eval_report(cfg.reports_dir / f"eval-{cfg.ablation}.json", result, topk=topk,
                             config_hash=cfg.digest(), seeds={"seed": cfg.resolved_seed},
                             extra={"mode": cfg.ablation, "database_size": len(eval_set.store_ids)})
    print(f"mAP {result.map:.4f}  pattern mAP {result.pattern_map:.4f}  "
          f"random baseline {result.random_baseline:.4f}  scored {len(result.per_query)}  "
          f"excluded {len(result.excluded)}")
    print("  ".join(f"{k} {v:.4f}" for k, v in topk.items()))
    print(f"report {path}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    from .evaluation import ABLATION_MODES, ablation_table, run_ablation_suite, write_ablation_report
    from .query_encoder import MODES

    modes = ABLATION_MODES if not args.modes else tuple(m.strip() for m in args.modes.split(",") if m.strip())
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise CliError(EXIT_BAD_INPUT, f"unknown modes: {', '.join(bad)}")
    teacher, _ = _load_teacher(cfg)
    corpus = _load_corpus(cfg)
    eval_set = _eval_set(cfg, corpus)
    rows = run_ablation_suite(corpus, teacher, cfg.query_config(), eval_set, cfg.resolved_seed, modes)
    path = write_ablation_report(cfg.reports_dir / "ablation.json", rows, config_hash=cfg.digest(),
                                 seed=cfg.resolved_seed)
    print(ablation_table(rows), end="")
    print(f"report {path}")
    return EXIT_OK


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train-foreground": cmd_train_foreground,
    "train-query": cmd_train_query,
    "index": cmd_index,
    "search": cmd_search,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (CorruptCheckpoint, StoreError) as exc:
        print(f"error: corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
