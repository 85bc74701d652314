"""Release-gate suites: algebra identities, expansion equivalence, gradients, metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .evaluation import RankResult, aggregate, rank_query
from .hypercomplex import (
    Biquat8d, biquat_add, hamilton_product, hamilton_product_unrolled, score_expansion_oracle,
)
from .kgdata import KnowledgeGraph, ModalityFeatures
from .model import MHyper

ALGEBRA_DIMS = (1, 4, 32)
EXPANSION_DIMS = (1, 2, 8)
TOLERANCE = {torch.float64: 1e-9, torch.float32: 1e-4}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<10} {self.detail}  ({self.seconds:.2f}s)"


def _rel(a: torch.Tensor, b: torch.Tensor) -> float:
    """Max over rows of |a - b| / max(|b|), per row over the last axis."""
    num = (a - b).abs().amax(-1)
    den = torch.maximum(a.abs().amax(-1), b.abs().amax(-1)).clamp_min(1e-300)
    return float((num / den).max())


def _rand_biquat(gen, n, d, dtype=torch.float64, real=False) -> Biquat8d:
    x = torch.randn(n, 8 * d, generator=gen, dtype=dtype)
    q = Biquat8d.from_flat(x)
    if real:
        q = Biquat8d.from_real(*(c.re for c in q.coeff))
    return q


# ---------------------------------------------------------------- algebra


def algebra_errors(n: int = 1000, dims=ALGEBRA_DIMS, seed: int = 0, table=None) -> dict[str, float]:
    """Worst relative violation of each identity over ``n`` random cases per width."""
    gen = torch.Generator().manual_seed(seed)
    worst = dict.fromkeys(
        ("identity", "associativity", "distributivity", "anticommutation", "norm", "unrolled"), 0.0)
    mul = lambda a, b: hamilton_product(a, b, table)  # noqa: E731
    for d in dims:
        p, q, r = (_rand_biquat(gen, n, d) for _ in range(3))
        one = Biquat8d.one(d, n)
        worst["identity"] = max(worst["identity"], _rel(mul(one, p).flat(), p.flat()),
                                _rel(mul(p, one).flat(), p.flat()))
        worst["associativity"] = max(worst["associativity"],
                                     _rel(mul(mul(p, q), r).flat(), mul(p, mul(q, r)).flat()))
        worst["distributivity"] = max(
            worst["distributivity"],
            _rel(mul(p, biquat_add(q, r)).flat(), biquat_add(mul(p, q), mul(p, r)).flat()),
            _rel(mul(biquat_add(q, r), p).flat(), biquat_add(mul(q, p), mul(r, p)).flat()),
        )
        worst["unrolled"] = max(worst["unrolled"], _rel(mul(p, q).flat(), hamilton_product_unrolled(p, q).flat()))
        # quaternion sub-algebra: |ab|^2 = |a|^2 |b|^2 per coordinate slice
        a, b = _rand_biquat(gen, n, d, real=True), _rand_biquat(gen, n, d, real=True)
        sq = lambda x: sum(c.re ** 2 for c in x.coeff)  # noqa: E731
        worst["norm"] = max(worst["norm"], _rel(sq(mul(a, b)), sq(a) * sq(b)))
        # pure basis units: u_a u_b = -(u_b u_a), cyclic ij = k, jk = i, ki = j
        for x, y, z in ((1, 2, 3), (2, 3, 1), (3, 1, 2)):
            scale = torch.randn(n, d, generator=gen, dtype=torch.float64)
            ux, uy, uz = (_unit(i, scale) for i in (x, y, z))
            worst["anticommutation"] = max(
                worst["anticommutation"],
                _rel(mul(ux, uy).flat(), (-mul(uy, ux)).flat()),
                _rel(mul(ux, uy).flat(), _mul_scale(uz, scale).flat()),
            )
    return worst


def _unit(i: int, scale: torch.Tensor) -> Biquat8d:
    parts = [torch.zeros_like(scale) for _ in range(4)]
    parts[i] = scale
    return Biquat8d.from_real(*parts)


def _mul_scale(q: Biquat8d, scale: torch.Tensor) -> Biquat8d:
    return Biquat8d.from_real(*(c.re * scale for c in q.coeff))


# ---------------------------------------------------------------- expansion


def random_model(n_entities: int, n_relations: int, dim: int, seed: int, dtype=torch.float64,
                 visual_dim: int = 3, textual_dim: int = 2, scale: float = 0.5) -> MHyper:
    """Model with every table drawn from N(0, scale^2) and random features (entity 0 has no visual)."""
    rng = np.random.default_rng(seed)
    feats = {}
    for key, fd in (("visual", visual_dim), ("textual", textual_dim)):
        mask = np.ones(n_entities, dtype=bool)
        if key == "visual" and n_entities > 1:
            mask[0] = False
        mat = rng.standard_normal((n_entities, fd)).astype(np.float32) * mask[:, None]
        feats[key] = ModalityFeatures(key, mat, mask)
    model = MHyper(n_entities, n_relations, dim, feats, seed=seed, dtype=torch.float64, pca=False)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * scale)
    return model.to(dtype)


def expansion_error(dims=EXPANSION_DIMS, n: int = 100, dtype=torch.float64, seed: int = 0, table=None,
                    normwise: bool | None = None) -> float:
    """Max relative gap between ``score_batch`` and the sixteen-term expansion oracle.

    The oracle always runs in 64-bit on the assembled embeddings.  With
    ``normwise`` (default for 32-bit) the gap is divided by
    ``|Qh + T| |R| |Qt|`` instead of ``|score|``; near-zero scores arise from
    cancellation and make the plain ratio meaningless at single precision.
    """
    if normwise is None:
        normwise = dtype == torch.float32
    worst = 0.0
    for d in dims:
        model = random_model(6, 4, d, seed + d, dtype)
        rng = np.random.default_rng(seed + 100 + d)
        heads = torch.as_tensor(rng.integers(0, model.n_entities, n))
        rels = torch.as_tensor(rng.integers(0, model.n_relations, n))
        tails = torch.as_tensor(rng.integers(0, model.n_entities, n))
        with torch.no_grad():
            scores, cache = model.score_batch(heads, rels, table)
            got = scores[torch.arange(n), tails].double()
            parts = [x.double() for x in (cache.q_head, cache.trans, cache.rot, model.tail_embedding(cache, tails))]
            want = score_expansion_oracle(*(Biquat8d.from_flat(x) for x in parts))
            if normwise:
                scale = (parts[0] + parts[1]).norm(dim=-1) * parts[2].norm(dim=-1) * parts[3].norm(dim=-1)
            else:
                scale = want.abs()
        worst = max(worst, float(((got - want).abs() / scale.clamp_min(1e-300)).max()))
    return worst


# ---------------------------------------------------------------- gradients


def tiny_instance(dim: int = 4, seed: int = 0, dtype=torch.float64):
    """5 entities, 2 relations (4 with inverses), random tables; returns (model, triples)."""
    model = random_model(5, 4, dim, seed, dtype, scale=0.3)
    graph = KnowledgeGraph(
        entities=[f"e{i}" for i in range(5)], original_relations=["r0", "r1"],
        train=np.zeros((0, 3), dtype=np.int64), valid=np.zeros((0, 3), dtype=np.int64),
        test=np.zeros((0, 3), dtype=np.int64),
    ).with_train(np.array([[0, 0, 1], [1, 0, 2], [2, 1, 3], [3, 1, 4], [4, 0, 0]]))
    return model, torch.as_tensor(graph.train)


def finite_difference_errors(model: MHyper, triples: torch.Tensor, noise_ratio: float = 0.5,
                             lam: float = 0.005, step: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """Per-table relative error (norm-wise) of autograd vs central differences of the total loss.

    Noise statistics, the noise draw and the distillation teacher are frozen at
    the base point, matching what the analytic gradient treats as constant.
    """
    from .train import compute_gradients

    noise = model.noise_model(noise_ratio, seed)
    with torch.no_grad():
        teacher = model.fused_heads(triples[:, 0], triples[:, 1])[0].clone()

    def loss() -> float:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            return float(model.total_loss(triples, noise, gen, lam, teacher=teacher)[0])

    gen = torch.Generator().manual_seed(seed)
    _, _, grads = compute_gradients(model, triples, noise, gen, lam)
    errors = {}
    for name, p in model.named_parameters():
        fd = torch.zeros_like(p)
        flat, fdf = p.data.view(-1), fd.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            fdf[i] = (up - down) / (2 * step)
        g = grads[name]
        den = max(float(g.norm()), float(fd.norm()))
        errors[name] = 0.0 if den < 1e-12 else float((g - fd).norm()) / den
    return errors


# ---------------------------------------------------------------- metrics


def sort_rank(scores: np.ndarray, true_id: int, mask: np.ndarray) -> int:
    """Rank by exhaustive sort, with the true entity placed last among equal scores."""
    keep = [e for e in range(len(scores)) if mask[e]]
    order = sorted(keep, key=lambda e: (-scores[e], e == true_id))
    return order.index(true_id) + 1


def metric_oracle_mismatches(seed: int = 0, n_entities: int = 10) -> int:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(200):
        scores = rng.integers(0, 4, n_entities).astype(float)  # coarse values force ties
        for true_id in range(n_entities):
            mask = rng.random(n_entities) < 0.7
            mask[true_id] = True
            if rank_query(scores, true_id, mask) != sort_rank(scores, true_id, mask):
                mismatches += 1
    return mismatches


def hit_monotonicity_violations(n_sets: int = 1000, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_sets):
        k = int(rng.integers(1, 30))
        res = RankResult(rng.integers(1, 40, k), rng.integers(1, 40, k), np.zeros(k, dtype=np.int64))
        m = aggregate(res)
        if not (m["Hit@1"] <= m["Hit@3"] <= m["Hit@10"] <= 1.0 and m["Hit@1"] <= m["MRR"] <= 1.0):
            bad += 1
    return bad


# ---------------------------------------------------------------- runner


def _timed(name, fn) -> SuiteResult:
    t0 = time.perf_counter()
    res = fn()
    res.seconds = time.perf_counter() - t0
    return res


def run_all(dtype=torch.float64, table=None) -> list[SuiteResult]:
    tol = TOLERANCE[dtype]

    def algebra():
        errs = algebra_errors(table=table)
        worst = max(errs.values())
        return SuiteResult("algebra", worst <= 1e-9, f"max rel err {worst:.2e} (tol 1e-09)", errs)

    def expansion():
        err = expansion_error(dtype=dtype, table=table)
        return SuiteResult("expansion", err <= tol, f"max rel err {err:.2e} (tol {tol:.0e})", {"max_rel": err})

    def gradients():
        model, triples = tiny_instance()
        errs = finite_difference_errors(model, triples)
        worst = max(errs.values())
        return SuiteResult("gradients", worst <= 1e-4, f"max rel err {worst:.2e} over {len(errs)} tables (tol 1e-04)",
                           errs)

    def metrics():
        mism = metric_oracle_mismatches()
        viol = hit_monotonicity_violations()
        return SuiteResult("metrics", mism == 0 and viol == 0,
                           f"{mism} rank mismatches, {viol} Hit@K order violations", {})

    return [_timed(n, f) for n, f in (("algebra", algebra), ("expansion", expansion),
                                      ("gradients", gradients), ("metrics", metrics))]


def corrupted_structure_constants() -> np.ndarray:
    """Copy of the quaternion table with one sign flipped (ij = -k); mutation-test hook."""
    from .hypercomplex import STRUCTURE_CONSTANTS

    H = STRUCTURE_CONSTANTS.copy()
    H[1, 2, 3] = -H[1, 2, 3]
    return H


__all__ = [
    "SuiteResult", "algebra_errors", "expansion_error", "finite_difference_errors", "run_all",
    "metric_oracle_mismatches", "hit_monotonicity_violations", "tiny_instance", "random_model",
    "corrupted_structure_constants", "sort_rank",
]

