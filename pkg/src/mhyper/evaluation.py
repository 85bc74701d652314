"""Filtered link-prediction ranking and MRR / Hit@K aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .kgdata import FilterIndex, KnowledgeGraph

HIT_KS = (1, 3, 10)


class EvaluationError(RuntimeError):
    pass


@dataclass
class RankResult:
    """Filtered ranks per evaluated triple; head ranks come from inverse-relation tail queries."""

    head_ranks: np.ndarray
    tail_ranks: np.ndarray
    relations: np.ndarray

    def __len__(self):
        return len(self.tail_ranks)


def rank_query(scores, true_id: int, mask=None) -> int:
    """1 + number of kept competitors scoring >= the true entity (ties count against it)."""
    scores = np.asarray(scores)
    keep = np.ones(len(scores), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    if not keep[true_id]:
        raise EvaluationError(f"true entity {true_id} is filtered out of its own query")
    keep[true_id] = False
    return 1 + int(np.count_nonzero(keep & (scores >= scores[true_id])))


def rank_batch(scores: np.ndarray, true_ids: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Vectorized ``rank_query`` over rows."""
    rows = np.arange(len(true_ids))
    if not masks[rows, true_ids].all():
        raise EvaluationError("a true entity is filtered out of its own query")
    true_scores = scores[rows, true_ids][:, None]
    competitors = masks.copy()
    competitors[rows, true_ids] = False
    return 1 + np.count_nonzero(competitors & (scores >= true_scores), axis=1)


def aggregate(result: RankResult) -> dict[str, float]:
    """Head and tail reciprocal ranks / hits summed per triple, normalized by 2|T|."""
    n = len(result)
    if n == 0:
        raise EvaluationError("cannot aggregate an empty test set")
    rh = np.asarray(result.head_ranks, dtype=np.float64)
    rt = np.asarray(result.tail_ranks, dtype=np.float64)
    metrics = {"MRR": float((1.0 / rh + 1.0 / rt).sum() / (2 * n))}
    for k in HIT_KS:
        metrics[f"Hit@{k}"] = float(((rh <= k).sum() + (rt <= k).sum()) / (2 * n))
    return metrics


def format_metrics(metrics: dict[str, float]) -> str:
    keys = ["MRR"] + [f"Hit@{k}" for k in HIT_KS]
    return "  ".join(f"{k}={100 * metrics[k]:.4f}" for k in keys)


def per_relation(result: RankResult) -> list[tuple[int, int, float]]:
    """(relation id, triple count, MRR) for each relation present in the result."""
    rows = []
    for r in np.unique(result.relations):
        sel = result.relations == r
        sub = RankResult(result.head_ranks[sel], result.tail_ranks[sel], result.relations[sel])
        rows.append((int(r), int(sel.sum()), aggregate(sub)["MRR"]))
    return rows


def format_per_relation(rows, names: list[str]) -> str:
    lines = ["relation\tcount\tMRR"]
    lines += [f"{names[r]}\t{n}\t{100 * mrr:.4f}" for r, n, mrr in rows]
    return "\n".join(lines)


@torch.no_grad()
def score_queries(model, heads: np.ndarray, rels: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(heads), batch_size):
        h = torch.as_tensor(heads[s:s + batch_size], dtype=torch.long)
        r = torch.as_tensor(rels[s:s + batch_size], dtype=torch.long)
        scores, _ = model.score_batch(h, r)
        out.append(scores.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.n_entities))


def _filter_masks(index: FilterIndex, heads, rels, trues, n_entities: int) -> np.ndarray:
    masks = np.ones((len(heads), n_entities), dtype=bool)
    for i, (h, r, t) in enumerate(zip(heads.tolist(), rels.tolist(), trues.tolist())):
        known = index.known_tails(h, r)
        if known:
            masks[i, list(known)] = False
        masks[i, t] = True
    return masks


def evaluate(model, graph: KnowledgeGraph, triples: np.ndarray, index: FilterIndex | None = None,
             batch_size: int = 512) -> RankResult:
    """Rank every triple in both directions under the filtered setting."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if index is None:
        index = FilterIndex.from_graph(graph)
    inv = graph.inverse(triples)
    queries = np.concatenate([triples, inv])
    ranks = np.empty(len(queries), dtype=np.int64)
    was_training = model.training
    model.eval()
    try:
        for s in range(0, len(queries), batch_size):
            q = queries[s:s + batch_size]
            scores = score_queries(model, q[:, 0], q[:, 1], batch_size)
            masks = _filter_masks(index, q[:, 0], q[:, 1], q[:, 2], graph.n_entities)
            ranks[s:s + len(q)] = rank_batch(scores, q[:, 2], masks)
    finally:
        model.train(was_training)
    n = len(triples)
    return RankResult(head_ranks=ranks[n:], tail_ranks=ranks[:n], relations=triples[:, 1].copy())
