"""Command-line entry point: train, eval, ablate, corrupt, selfcheck."""

from __future__ import annotations

import argparse
import collections
import hashlib
import json
import logging
import shutil
import subprocess
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .evaluation import EvaluationError, aggregate, evaluate, format_metrics, format_per_relation, per_relation
from .kgdata import (
    CORRUPTION_MODES, MODALITIES, SPLITS, FormatError, ParseError, corrupt_dataset, copy_triple_files,
    load_dataset, write_features,
)
from .model import ABLATIONS, SCORE_MODES, ConfigError, MHyper
from .train import PRECISIONS, TrainConfig, TrainingDiverged, train

log = logging.getLogger("mhyper")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def dataset_fingerprint(directory) -> str:
    """sha256 over the names and bytes of every regular file in the dataset directory."""
    h = hashlib.sha256()
    for p in sorted(Path(directory).iterdir()):
        if p.is_file():
            h.update(p.name.encode() + b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _load(dataset):
    if dataset is None:
        raise UsageError("--dataset is required")
    path = Path(dataset)
    if not path.is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def _model_from_checkpoint(path, graph, features, dtype, score_mode="full") -> MHyper:
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    header, tables = read_checkpoint(path)
    if (header["n_entities"], header["n_relations"]) != (graph.n_entities, graph.n_relations):
        raise CheckpointError(
            f"checkpoint incompatible with dataset: expected {graph.n_entities} entities / {graph.n_relations} "
            f"relations, found {header['n_entities']} / {header['n_relations']}")
    model = MHyper(graph.n_entities, graph.n_relations, header["dim"], features, dtype=dtype,
                   score_mode=score_mode, pca=False)
    load_into(model, tables)
    return model


def _split(graph, name):
    return {"valid": graph.valid, "test": graph.test}[name]


def _report(model, graph, split, show_relations) -> str:
    triples = _split(graph, split)
    result = evaluate(model, graph, triples)
    text = format_metrics(aggregate(result))
    if show_relations:
        text += "\n" + format_per_relation(per_relation(result), graph.relations)
    return text


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    phases = {}
    t0 = time.perf_counter()
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    for key in ("dataset", "seed", "epochs", "precision", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    graph, features = _load(cfg.dataset or None)
    phases["load"] = time.perf_counter() - t0

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_log = open(out / "train.log", "w", encoding="utf-8")
    valid_log = open(out / "valid.log", "w", encoding="utf-8")

    def on_epoch(rec):
        train_log.write(rec.log_line() + "\n")
        train_log.flush()
        if rec.valid_mrr is not None:
            valid_log.write(f"{rec.epoch}\t{rec.valid_mrr:.6f}\n")
            valid_log.flush()

    t1 = time.perf_counter()
    status = EXIT_OK
    try:
        result = train(cfg, graph, features, on_epoch=on_epoch)
        model = result.model
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        from .train import build_model

        model = build_model(cfg, graph, features)
        if exc.last_good is not None:
            model.load_state_dict(exc.last_good)
        status = EXIT_RUNTIME
        result = None
    finally:
        train_log.close()
        valid_log.close()
    phases["train"] = time.perf_counter() - t1

    save_checkpoint(out / "checkpoint.mhck", model)
    t2 = time.perf_counter()
    if status == EXIT_OK and len(graph.test):
        metrics = format_metrics(aggregate(evaluate(model, graph, graph.test)))
        (out / "metrics.txt").write_text(metrics + "\n", encoding="utf-8")
        print(metrics)
    phases["test_eval"] = time.perf_counter() - t2

    manifest = {
        "config": {**{k: v for k, v in vars(cfg).items()}},
        "dataset_sha256": dataset_fingerprint(cfg.dataset),
        "seed": cfg.seed,
        "version": version_string(),
        "best_valid_mrr": None if result is None else result.best_valid_mrr,
        "best_epoch": None if result is None else result.best_epoch,
        "status": "ok" if status == EXIT_OK else "diverged",
        "wall_clock_seconds": phases,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return status


def cmd_eval(args) -> int:
    graph, features = _load(args.dataset)
    model = _model_from_checkpoint(args.checkpoint, graph, features, PRECISIONS[args.precision], args.variant)
    print(_report(model, graph, args.split, args.per_relation))
    return EXIT_OK


def cmd_ablate(args) -> int:
    graph, features = _load(args.dataset)
    model = _model_from_checkpoint(args.checkpoint, graph, features, PRECISIONS[args.precision], args.variant)
    model.ablations = frozenset([args.mode])
    print(f"ablation={args.mode}")
    print(_report(model, graph, args.split, args.per_relation))
    return EXIT_OK


def _kept_train_lines(src: Path, graph, kept) -> list[str]:
    """Lines of the original train file whose triples survive, in file order."""
    budget = collections.Counter(map(tuple, kept.tolist()))
    ent, rel = graph.entity_index, {n: i for i, n in enumerate(graph.original_relations)}
    lines = []
    for line in src.read_text(encoding="utf-8").splitlines(keepends=True):
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 3:
            continue
        key = (ent[parts[0]], rel[parts[1]], ent[parts[2]])
        if budget[key] > 0:
            budget[key] -= 1
            lines.append(line)
    return lines


def cmd_corrupt(args) -> int:
    graph, features = _load(args.dataset)
    if args.ratio is None or not 0.0 <= args.ratio <= 1.0:
        raise UsageError(f"--ratio must be in [0, 1], got {args.ratio}")
    src, out = Path(args.dataset), Path(args.out)
    if out.resolve() == src.resolve():
        raise UsageError("--out must differ from --dataset")
    out.mkdir(parents=True, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    new_graph, new_features = corrupt_dataset(graph, features, args.mode, args.ratio, seed)
    if args.mode == "link-sparse":
        for s in SPLITS[1:]:
            shutil.copyfile(src / f"{s}.tsv", out / f"{s}.tsv")
        lines = _kept_train_lines(src / "train.tsv", graph, new_graph.train_original)
        (out / "train.tsv").write_text("".join(lines), encoding="utf-8")
        for m in MODALITIES:
            if (src / f"{m}.mhft").is_file():
                shutil.copyfile(src / f"{m}.mhft", out / f"{m}.mhft")
    else:
        copy_triple_files(src, out)
        for m in MODALITIES:
            if (src / f"{m}.mhft").is_file():
                write_features(out / f"{m}.mhft", new_features[m], graph)
    print(f"wrote {args.mode} corruption (ratio {args.ratio}, seed {seed}) to {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import corrupted_structure_constants, run_all

    table = corrupted_structure_constants() if args.corrupt_structure else None
    results = run_all(PRECISIONS[args.precision], table=table)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("selfcheck: " + ("all suites passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhyper", description="Biquaternion multi-modal KG completion")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--dataset", help="directory with train/valid/test.tsv and *.mhft features")
        sp.add_argument("--precision", choices=sorted(PRECISIONS), default=None if not checkpoint else "f32")
        sp.add_argument("--threads", type=int, default=None)
        if checkpoint:
            sp.add_argument("--checkpoint", help="MHCK checkpoint file")
            sp.add_argument("--variant", choices=SCORE_MODES, default="full")
            sp.add_argument("--split", choices=("valid", "test"), default="test")
            sp.add_argument("--per-relation", action="store_true", help="also print per-relation MRR")

    sp = sub.add_parser("train", help="train a model and write checkpoint, logs, metrics, manifest")
    common(sp)
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", default="run", help="output directory (default: ./run)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="filtered MRR / Hit@K of a checkpoint")
    common(sp, checkpoint=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="evaluate a checkpoint with one component disabled")
    common(sp, checkpoint=True)
    sp.add_argument("--mode", required=True, choices=ABLATIONS)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("corrupt", help="write a degraded copy of a dataset")
    common(sp)
    sp.add_argument("--mode", required=True, choices=CORRUPTION_MODES)
    sp.add_argument("--ratio", type=float, required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_corrupt)

    sp = sub.add_parser("selfcheck", help="run algebra, score-expansion, gradient and metric suites")
    sp.add_argument("--precision", choices=sorted(PRECISIONS), default="f64")
    sp.add_argument("--corrupt-structure", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            print(f"error: --threads must be >= 1, got {threads}", file=sys.stderr)
            return EXIT_USAGE
        torch.set_num_threads(threads)
        if threads > 1:
            log.warning("--threads %d: results are only bit-reproducible with --threads 1", threads)
    if getattr(args, "precision", None) is None and args.command != "train":
        args.precision = "f32"
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ParseError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvaluationError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
