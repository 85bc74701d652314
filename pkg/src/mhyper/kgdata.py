"""Triple and feature ingestion, inverse augmentation, filter index, corruption."""

from __future__ import annotations

import logging
import shutil
import struct
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._rng import np_stream

log = logging.getLogger(__name__)

MODALITIES = ("visual", "textual")
SPLITS = ("train", "valid", "test")
CORRUPTION_MODES = ("modality-missing", "modality-noise", "link-sparse")

MHFT_MAGIC = b"MHFT"
MHFT_VERSION = 1


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class FormatError(ValueError):
    pass


@dataclass
class KnowledgeGraph:
    """Id-encoded triples.

    ``train`` holds the original triples followed by their inverses, in the
    same order; ``valid`` and ``test`` hold original triples only.  The
    inverse of relation ``r`` has id ``r + n_original_relations``.
    """

    entities: list[str]
    original_relations: list[str]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    unseen_entities: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.entity_index = {e: i for i, e in enumerate(self.entities)}

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_original_relations(self) -> int:
        return len(self.original_relations)

    @property
    def n_relations(self) -> int:
        return 2 * len(self.original_relations)

    @property
    def relations(self) -> list[str]:
        return self.original_relations + [f"{r}^-1" for r in self.original_relations]

    @property
    def n_train_original(self) -> int:
        return len(self.train) // 2

    @property
    def train_original(self) -> np.ndarray:
        return self.train[: self.n_train_original]

    def inverse(self, triples: np.ndarray) -> np.ndarray:
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        R = self.n_original_relations
        rel = triples[:, 1]
        inv_rel = np.where(rel < R, rel + R, rel - R)
        return np.stack([triples[:, 2], inv_rel, triples[:, 0]], axis=1)

    def with_train(self, originals: np.ndarray) -> KnowledgeGraph:
        originals = np.asarray(originals, dtype=np.int64).reshape(-1, 3)
        return replace(self, train=np.concatenate([originals, self.inverse(originals)]))


def _read_triples(path: Path) -> list[tuple[str, str, str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise ParseError(path, lineno, f"expected head<TAB>relation<TAB>tail, got {len(parts)} field(s)")
            out.append((parts[0], parts[1], parts[2]))
    return out


def load_graph(train_path, valid_path, test_path) -> KnowledgeGraph:
    """Read three TSV triple files; ids follow first appearance (train, valid, test)."""
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    unseen = []
    encoded = {}
    for split, path in zip(SPLITS, (train_path, valid_path, test_path)):
        rows = []
        for h, r, t in _read_triples(Path(path)):
            for e in (h, t):
                if e not in ent_ids:
                    ent_ids[e] = len(ent_ids)
                    if split != "train":
                        unseen.append(e)
            if r not in rel_ids:
                rel_ids[r] = len(rel_ids)
            rows.append((ent_ids[h], rel_ids[r], ent_ids[t]))
        encoded[split] = np.array(rows, dtype=np.int64).reshape(-1, 3)
    if unseen:
        log.warning("%d entities appear only in valid/test; kept and ranked normally", len(unseen))
    g = KnowledgeGraph(
        entities=list(ent_ids),
        original_relations=list(rel_ids),
        train=np.zeros((0, 3), dtype=np.int64),
        valid=encoded["valid"],
        test=encoded["test"],
        unseen_entities=unseen,
    )
    g = g.with_train(encoded["train"])
    train_set = set(map(tuple, g.train_original.tolist()))
    for split in ("valid", "test"):
        overlap = sum(tuple(x) in train_set for x in getattr(g, split).tolist())
        if overlap:
            log.warning("%d %s triples also occur in train", overlap, split)
    return g


def write_graph(graph: KnowledgeGraph, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = graph.entities
    rels = graph.original_relations
    for split, triples in (("train", graph.train_original), ("valid", graph.valid), ("test", graph.test)):
        with open(directory / f"{split}.tsv", "w", encoding="utf-8") as f:
            for h, r, t in triples.tolist():
                f.write(f"{names[h]}\t{rels[r]}\t{names[t]}\n")


class FilterIndex:
    """Known-true tails per (head, relation), over train, valid and test plus inverses."""

    def __init__(self, triples: np.ndarray):
        self._tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        for h, r, t in np.asarray(triples).reshape(-1, 3).tolist():
            self._tails[(h, r)].add(t)

    @classmethod
    def from_graph(cls, graph: KnowledgeGraph) -> FilterIndex:
        parts = [graph.train]
        for split in (graph.valid, graph.test):
            parts += [split, graph.inverse(split)]
        return cls(np.concatenate(parts))

    def known_tails(self, head: int, relation: int) -> set[int]:
        return self._tails.get((head, relation), set())

    def __len__(self):
        return len(self._tails)


def filtered_candidates(query: tuple[int, int], true_tail: int, index: FilterIndex, n_entities: int) -> np.ndarray:
    """Boolean mask over entities; False marks filtered known-true tails (never ``true_tail``)."""
    mask = np.ones(n_entities, dtype=bool)
    known = index.known_tails(*query)
    if known:
        mask[list(known)] = False
    mask[true_tail] = True
    return mask


@dataclass
class ModalityFeatures:
    """Mean-pooled raw features of one modality; absent entities are zero rows with ``mask`` False."""

    modality: str
    matrix: np.ndarray
    mask: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_present(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def empty(cls, modality: str, n_entities: int, dim: int = 0) -> ModalityFeatures:
        return cls(modality, np.zeros((n_entities, dim), dtype=np.float32), np.zeros(n_entities, dtype=bool))


def write_mhft(path, dim: int, rows) -> None:
    """``rows``: iterable of (entity name, array of shape (n_vectors, dim))."""
    rows = list(rows)
    with open(path, "wb") as f:
        f.write(MHFT_MAGIC + struct.pack("<III", MHFT_VERSION, len(rows), dim))
        for key, vectors in rows:
            vectors = np.asarray(vectors, dtype="<f4").reshape(-1, dim) if dim else np.zeros((len(vectors), 0), "<f4")
            kb = key.encode("utf-8")
            f.write(struct.pack("<I", len(kb)) + kb + struct.pack("<I", vectors.shape[0]))
            f.write(vectors.tobytes())


def read_mhft(path) -> tuple[int, list[tuple[str, np.ndarray]]]:
    data = Path(path).read_bytes()
    if data[:4] != MHFT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, n_rows, dim = struct.unpack_from("<III", data, 4)
    if version != MHFT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 16
    rows = []
    try:
        for _ in range(n_rows):
            (klen,) = struct.unpack_from("<I", data, off)
            off += 4
            key = data[off:off + klen].decode("utf-8")
            off += klen
            (nvec,) = struct.unpack_from("<I", data, off)
            off += 4
            nbytes = 4 * nvec * dim
            if off + nbytes > len(data):
                raise FormatError(f"{path}: row {key!r} declares {nvec}x{dim} floats past end of file")
            rows.append((key, np.frombuffer(data, dtype="<f4", count=nvec * dim, offset=off).reshape(nvec, dim)))
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated after {len(rows)} rows") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes; feature dimension inconsistent with header")
    return dim, rows


def load_features(path, graph: KnowledgeGraph, modality: str) -> ModalityFeatures:
    dim, rows = read_mhft(path)
    matrix = np.zeros((graph.n_entities, dim), dtype=np.float32)
    mask = np.zeros(graph.n_entities, dtype=bool)
    skipped = 0
    for key, vectors in rows:
        idx = graph.entity_index.get(key)
        if idx is None:
            skipped += 1
            continue
        if len(vectors) == 0:
            continue
        matrix[idx] = vectors.astype(np.float64).mean(axis=0)
        mask[idx] = True
    if skipped:
        log.warning("%s: %d unknown entity keys skipped", path, skipped)
    return ModalityFeatures(modality, matrix, mask)


def write_features(path, features: ModalityFeatures, graph: KnowledgeGraph) -> None:
    rows = [(graph.entities[i], features.matrix[i:i + 1]) for i in np.flatnonzero(features.mask)]
    write_mhft(path, features.dim, rows)


def load_dataset(directory) -> tuple[KnowledgeGraph, dict[str, ModalityFeatures]]:
    """Standard layout: train/valid/test.tsv plus visual.mhft and textual.mhft."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    paths = [directory / f"{s}.tsv" for s in SPLITS]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"missing triple file: {p}")
    graph = load_graph(*paths)
    features = {}
    for m in MODALITIES:
        p = directory / f"{m}.mhft"
        if p.is_file():
            features[m] = load_features(p, graph, m)
        else:
            log.warning("no %s features at %s; modality treated as absent", m, p)
            features[m] = ModalityFeatures.empty(m, graph.n_entities)
    return graph, features


def save_dataset(directory, graph: KnowledgeGraph, features: dict[str, ModalityFeatures]) -> None:
    directory = Path(directory)
    write_graph(graph, directory)
    for m, feats in features.items():
        write_features(directory / f"{m}.mhft", feats, graph)


def corrupt_dataset(graph: KnowledgeGraph, features: dict[str, ModalityFeatures], mode: str, ratio: float, seed: int):
    """Synthesize a degraded copy for robustness runs.

    modality-missing: a ``ratio`` share of each modality's present rows is
    deleted.  modality-noise: the same share receives Gaussian noise with the
    modality's per-dimension mean and variance.  link-sparse: a ``ratio`` share
    of the original training triples is dropped together with their inverses.
    """
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"unknown corruption mode {mode!r}; expected one of {CORRUPTION_MODES}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    features = {m: replace(f, matrix=f.matrix.copy(), mask=f.mask.copy()) for m, f in features.items()}

    if mode == "link-sparse":
        originals = graph.train_original
        n_drop = int(round(ratio * len(originals)))
        rng = np_stream(seed, "corruption", 0)
        drop = rng.choice(len(originals), size=n_drop, replace=False)
        keep = np.ones(len(originals), dtype=bool)
        keep[drop] = False
        return graph.with_train(originals[keep]), features

    from .model import noise_stats_array

    for j, m in enumerate(sorted(features)):
        f = features[m]
        present = np.flatnonzero(f.mask)
        n_pick = int(round(ratio * len(present)))
        if n_pick == 0:
            continue
        rng = np_stream(seed, "corruption", j + 1)
        chosen = np.sort(rng.choice(present, size=n_pick, replace=False))
        if mode == "modality-missing":
            f.matrix[chosen] = 0.0
            f.mask[chosen] = False
        else:
            mean, var = noise_stats_array(f.matrix[present])
            noise = rng.normal(size=(n_pick, f.dim)) * np.sqrt(var) + mean
            f.matrix[chosen] = (f.matrix[chosen] + noise).astype(np.float32)
    return graph, features


def copy_triple_files(src, dst) -> None:
    for s in SPLITS:
        shutil.copyfile(Path(src) / f"{s}.tsv", Path(dst) / f"{s}.tsv")
