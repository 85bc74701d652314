"""Synthetic ring-shift knowledge graph used by the convergence checks.

Entities sit on a ring; relation ``k`` maps ``e`` to ``e + shift_k`` (mod n).
The default shifts are successor, predecessor and their two-step
compositions.  Held-out triples are drawn so that a triple and its mirror
(the opposite shift between the same two entities) are never both held out,
which keeps every valid/test fact implied by the training set.
"""

from __future__ import annotations

import numpy as np

from ._rng import np_stream
from .kgdata import KnowledgeGraph, ModalityFeatures

DEFAULT_SHIFTS = (1, -1, 2, -2)


def make_toy_kg(n_entities: int = 50, shifts=DEFAULT_SHIFTS, feature_dim: int = 8,
                valid_fraction: float = 0.1, test_fraction: float = 0.1, seed: int = 0):
    shifts = tuple(shifts)
    rng = np_stream(seed, "toy")
    triples = np.array([(e, r, (e + s) % n_entities) for r, s in enumerate(shifts) for e in range(n_entities)],
                       dtype=np.int64)
    position = {tuple(t): i for i, t in enumerate(triples.tolist())}
    mirror = np.full(len(triples), -1)
    for i, (h, r, t) in enumerate(triples.tolist()):
        if -shifts[r] in shifts:
            mirror[i] = position[(t, shifts.index(-shifts[r]), h)]
    n_test = int(round(test_fraction * len(triples)))
    n_valid = int(round(valid_fraction * len(triples)))
    held = []
    blocked = np.zeros(len(triples), dtype=bool)
    for i in rng.permutation(len(triples)):
        if len(held) == n_test + n_valid:
            break
        if blocked[i]:
            continue
        held.append(i)
        blocked[i] = True
        if mirror[i] >= 0:
            blocked[mirror[i]] = True
    if len(held) < n_test + n_valid:
        raise ValueError("held-out fractions too large for the mirror constraint")
    in_train = np.ones(len(triples), dtype=bool)
    in_train[held] = False
    test = triples[np.sort(held[:n_test])]
    valid = triples[np.sort(held[n_test:])]
    train = triples[in_train]
    graph = KnowledgeGraph(
        entities=[f"e{i:03d}" for i in range(n_entities)],
        original_relations=[f"shift{s:+d}" for s in shifts],
        train=np.zeros((0, 3), dtype=np.int64),
        valid=valid,
        test=test,
    ).with_train(train)
    features = {
        m: ModalityFeatures(m, rng.standard_normal((n_entities, feature_dim)).astype(np.float32),
                            np.ones(n_entities, dtype=bool))
        for m in ("visual", "textual")
    }
    return graph, features


def toy_config(**overrides):
    """Default hyperparameters scaled to the toy graph (d=16)."""
    from .train import TrainConfig

    base = dict(dim=16, epochs=200, eval_every=10, batch_size=1000, learning_rate=0.1,
                reg=0.005, noise_ratio=0.2, seed=0)
    base.update(overrides)
    return TrainConfig(**base).validate()
