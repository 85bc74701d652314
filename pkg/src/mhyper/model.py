"""Learnable tables and the forward computation.

Per entity, three modality representations (structural ``struct``, visual,
textual) are each the sum of a modality-specific part and a task-specific
part.  A relation-conditioned softmax gate fuses them into a joint
representation, and the four 2d blocks ``(joint, struct, visual, text)``
become the ``1, i, j, k`` coefficients of a biquaternion.  A query is
translated by ``r^T`` and rotated by ``r^R`` (Hamilton product), then dotted
with every candidate tail.
"""

from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ._rng import np_stream, torch_stream
from .hypercomplex import ComplexBlock, complex_mul, hamilton_flat, identity_flat
from .kgdata import ModalityFeatures

log = logging.getLogger(__name__)

MODAL = ("struct", "visual", "text")
SCORE_MODES = ("full", "fusion", "ensemble")
ABLATIONS = (
    "no-joint", "no-struct", "no-vision", "no-text",
    "no-ferf", "no-noise", "no-gate", "no-translation", "no-rotation",
)
_ZEROED = {"no-struct": "struct", "no-vision": "visual", "no-text": "text"}

INIT_RANGE = 0.05
TAU_INIT_RAW = math.log(math.e - 1.0)  # softplus(raw) = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- noise


def noise_stats_array(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension population mean and variance of the rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(x.shape[1]), np.zeros(x.shape[1])
    mean = x.mean(axis=0)
    return mean, ((x - mean) ** 2).mean(axis=0)


@dataclass
class NoiseModel:
    """Gaussian noise per modality, applied to a ``ratio`` share of batch entities."""

    mean: dict[str, Tensor]
    var: dict[str, Tensor]
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"noise ratio must be in [0, 1], got {self.ratio}")
        for m, v in self.var.items():
            if bool((v < 0).any()):
                raise ConfigError(f"negative noise variance for {m}")

    def perturb(self, modality: str, x: Tensor, gen: torch.Generator | None) -> Tensor:
        n = x.shape[0]
        k = int(round(self.ratio * n))
        if k == 0 or modality not in self.mean or x.shape[1] == 0:
            return x
        idx = torch.randperm(n, generator=gen)[:k]
        z = torch.randn(k, x.shape[1], generator=gen, dtype=x.dtype)
        noise = self.mean[modality].to(x.dtype) + self.var[modality].to(x.dtype).sqrt() * z
        delta = torch.zeros_like(x)
        delta[idx] = noise
        return x + delta


def noise_stats(raw: dict[str, Tensor], ratio: float, seed: int = 0) -> NoiseModel:
    """Build a NoiseModel from raw-stage rows per modality (population statistics)."""
    mean, var = {}, {}
    for m, rows in raw.items():
        rows = rows.detach()
        if len(rows) == 0:
            mean[m] = torch.zeros(rows.shape[1], dtype=rows.dtype)
            var[m] = torch.zeros(rows.shape[1], dtype=rows.dtype)
            continue
        mu = rows.mean(0)
        mean[m] = mu
        var[m] = ((rows - mu) ** 2).mean(0)
    return NoiseModel(mean, var, ratio, seed)


# ---------------------------------------------------------------- PCA


def pca_components(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``k`` principal directions of the rows of ``x``.

    Returns (mean, components of shape (k, dim), eigenvalues).  Signs are fixed
    so that each component's largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order].T
    pivot = np.abs(comps).argmax(axis=1)
    signs = np.sign(comps[np.arange(len(comps)), pivot])
    signs[signs == 0] = 1.0
    return mean, comps * signs[:, None], evals[order]


def pca_init(features: ModalityFeatures, k: int, seed: int, whiten: bool = True) -> np.ndarray:
    """Initial task-specific table from the principal coordinates of present rows."""
    n = len(features.mask)
    rng = np_stream(seed, "pca", zlib.crc32(features.modality.encode()))
    present = np.flatnonzero(features.mask)
    if len(present) == 0 or features.dim == 0:
        log.warning("%s: no feature rows present; random PCA init", features.modality)
        return rng.uniform(-INIT_RANGE, INIT_RANGE, size=(n, k))
    kk = min(k, features.dim)
    mean, comps, _ = pca_components(features.matrix[present], kk)
    coords = (features.matrix[present].astype(np.float64) - mean) @ comps.T
    if whiten:
        std = coords.std(axis=0)
        coords = coords / np.where(std > 1e-12, std, 1.0)
    out = 1e-3 * rng.standard_normal((n, k))
    out[present, :kk] = coords
    return out


# ---------------------------------------------------------------- scoring


def assemble_entity(joint: Tensor, struct: Tensor, visual: Tensor, text: Tensor) -> Tensor:
    """Flat biquaternion ``[j_re; j_im; s_re; s_im; v_re; v_im; t_re; t_im]``."""
    return torch.cat([joint, struct, visual, text], dim=-1)


def split_entity(x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    d2 = x.shape[-1] // 4
    return tuple(x[..., i * d2:(i + 1) * d2] for i in range(4))


def transform_query(q_head: Tensor, trans: Tensor, rot: Tensor, mode: str = "full", table=None) -> Tensor:
    """Translate then rotate the head biquaternion (flat ``8d`` rows).

    ``full`` uses the Hamilton product; ``fusion`` rotates only the joint
    coefficient in the complex field; ``ensemble`` rotates each coefficient
    independently in the complex field.
    """
    shifted = q_head + trans
    if mode == "full":
        return hamilton_flat(shifted, rot, table)
    if mode not in ("fusion", "ensemble"):
        raise ConfigError(f"unknown score mode {mode!r}; expected one of {SCORE_MODES}")
    sb = split_entity(shifted)
    rb = split_entity(rot)
    blocks = [complex_mul(ComplexBlock.from_flat(a), ComplexBlock.from_flat(b)).flat() for a, b in zip(sb, rb)]
    if mode == "fusion":
        blocks[1:] = [torch.zeros_like(b) for b in blocks[1:]]
    return torch.cat(blocks, dim=-1)


def biquat_score(q_head: Tensor, trans: Tensor, rot: Tensor, q_tail: Tensor, mode: str = "full", table=None) -> Tensor:
    """Score of aligned rows: <transform_query(h), t>."""
    return (transform_query(q_head, trans, rot, mode, table) * q_tail).sum(-1)


def triple_loss(scores: Tensor, tails: Tensor) -> Tensor:
    """Full-vocabulary logistic loss; label -1 on the true tail, +1 elsewhere."""
    y = torch.ones_like(scores)
    y[torch.arange(len(tails)), tails] = -1.0
    return F.softplus(y * scores).sum(-1).mean()


def n3_penalty(*blocks: Tensor) -> Tensor:
    """Batch mean of summed cubed absolute values."""
    return sum((b.abs() ** 3).sum(-1) for b in blocks).mean()


# ---------------------------------------------------------------- model


@dataclass
class ForwardCache:
    heads: Tensor
    rels: Tensor
    hat: dict[str, Tensor]          # per-head modality embeddings, (B, 2d)
    logits: Tensor                  # (B, 3)
    weights: Tensor                 # (B, 3)
    joint: Tensor                   # (B, 2d)
    q_head: Tensor                  # (B, 8d)
    trans: Tensor
    rot: Tensor
    query: Tensor                   # transformed head, (B, 8d)
    hat_all: dict[str, Tensor] = field(repr=False, default_factory=dict)
    ent_logits_all: Tensor | None = field(repr=False, default=None)
    modal: dict[str, Tensor] = field(repr=False, default_factory=dict)
    task: dict[str, Tensor] = field(repr=False, default_factory=dict)


def _affine_init(layer: nn.Linear, gen: torch.Generator) -> None:
    fan_in = layer.in_features
    with torch.no_grad():
        if fan_in:
            bound = 1.0 / math.sqrt(fan_in)
            layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        layer.bias.zero_()


class MHyper(nn.Module):
    """All learnable tables plus the precomputed modality features (as buffers)."""

    def __init__(
        self,
        n_entities: int,
        n_relations: int,
        dim: int,
        features: dict[str, ModalityFeatures] | None = None,
        *,
        visual_dim: int | None = None,
        textual_dim: int | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
        score_mode: str = "full",
        ablations=(),
        pca: bool = True,
    ):
        super().__init__()
        if dim < 1:
            raise ConfigError(f"dim must be >= 1, got {dim}")
        if score_mode not in SCORE_MODES:
            raise ConfigError(f"unknown score mode {score_mode!r}")
        bad = set(ablations) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablation(s) {sorted(bad)}; expected from {ABLATIONS}")
        self.n_entities, self.n_relations, self.dim = n_entities, n_relations, dim
        self.score_mode = score_mode
        self.ablations = frozenset(ablations)
        d2, d8 = 2 * dim, 8 * dim

        features = dict(features or {})
        for key, m, given in (("visual", "visual", visual_dim), ("textual", "text", textual_dim)):
            if key not in features:
                features[key] = ModalityFeatures.empty(key, n_entities, given or 0)
            feats = features[key]
            if feats.matrix.shape[0] != n_entities:
                raise ConfigError(f"{key} features have {feats.matrix.shape[0]} rows for {n_entities} entities")
            self.register_buffer(f"feat_{m}", torch.as_tensor(feats.matrix, dtype=torch.float64))
            self.register_buffer(f"mask_{m}", torch.as_tensor(feats.mask, dtype=torch.bool))

        gen = torch_stream(seed, "init")

        def table(*shape):
            return nn.Parameter((torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1) * INIT_RANGE)

        self.ent_struct_modal = table(n_entities, d2)
        self.ent_task_struct = table(n_entities, d2)
        self.ent_task_visual = table(n_entities, d2)
        self.ent_task_text = table(n_entities, d2)
        self.ent_task_joint = table(n_entities, d2)
        if pca:
            with torch.no_grad():
                self.ent_task_visual.copy_(torch.as_tensor(pca_init(features["visual"], d2, seed)))
                self.ent_task_text.copy_(torch.as_tensor(pca_init(features["textual"], d2, seed)))

        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", "Initializing zero-element tensors")  # absent modality: 0-wide input
            self.proj = nn.ModuleDict({
                "visual": nn.Linear(self.feat_visual.shape[1], d2, dtype=torch.float64),
                "text": nn.Linear(self.feat_text.shape[1], d2, dtype=torch.float64),
            })
        self.recon = nn.ModuleDict({
            m: nn.Sequential(nn.Linear(3 * d2, d2, dtype=torch.float64), nn.ReLU(), nn.Linear(d2, d2, dtype=torch.float64))
            for m in MODAL
        })
        self.gate = nn.ModuleDict({m: nn.Linear(d2 + 2 * d8, 1, dtype=torch.float64) for m in MODAL})
        for mod in (*self.proj.values(), *self.gate.values()):
            _affine_init(mod, gen)
        for seq in self.recon.values():
            _affine_init(seq[0], gen)
            _affine_init(seq[2], gen)

        self.rel_trans = table(n_relations, d8)
        self.rel_rot = table(n_relations, d8)
        self.rel_temp_raw = nn.Parameter(torch.full((n_relations, 1), TAU_INIT_RAW, dtype=torch.float64))
        self.to(dtype)

    # ------------------------------------------------------------ structure

    @property
    def dtype(self) -> torch.dtype:
        return self.ent_struct_modal.dtype

    def tables(self) -> dict[str, nn.Parameter]:
        return dict(self.named_parameters())

    def temperature(self, rels: Tensor | None = None) -> Tensor:
        raw = self.rel_temp_raw[:, 0] if rels is None else self.rel_temp_raw[rels, 0]
        return F.softplus(raw)

    def relation_blocks(self, rels: Tensor) -> tuple[Tensor, Tensor]:
        trans = self.rel_trans[rels]
        rot = self.rel_rot[rels]
        if "no-translation" in self.ablations:
            trans = torch.zeros_like(trans)
        if "no-rotation" in self.ablations:
            rot = identity_flat(self.dim, len(rels), dtype=rot.dtype)
        return trans, rot

    # ------------------------------------------------------------ FERF

    def raw_stage(self, ids: Tensor, noise: NoiseModel | None = None, gen: torch.Generator | None = None):
        """Inputs before projection/lookup: structural rows and pooled features."""
        raw = {
            "struct": self.ent_struct_modal[ids],
            "visual": self.feat_visual[ids].to(self.dtype),
            "text": self.feat_text[ids].to(self.dtype),
        }
        if noise is not None:
            raw = {m: noise.perturb(m, x, gen) for m, x in raw.items()}
        return raw

    def noise_model(self, ratio: float, seed: int = 0) -> NoiseModel:
        """Noise statistics from the current structural table and present feature rows."""
        rows = {
            "struct": self.ent_struct_modal,
            "visual": self.feat_visual[self.mask_visual].to(self.dtype),
            "text": self.feat_text[self.mask_text].to(self.dtype),
        }
        return noise_stats(rows, ratio, seed)

    def ferf(self, ids: Tensor, noise: NoiseModel | None = None, gen: torch.Generator | None = None):
        """Returns (hat, modal, task): dicts of (N, 2d) tensors keyed by modality."""
        raw = self.raw_stage(ids, noise, gen)
        modal = {
            "struct": raw["struct"],
            "visual": self.proj["visual"](raw["visual"]),
            "text": self.proj["text"](raw["text"]),
        }
        task = {
            "struct": self.ent_task_struct[ids],
            "visual": self.ent_task_visual[ids],
            "text": self.ent_task_text[ids],
        }
        if "no-ferf" in self.ablations:
            hat = dict(modal)
        else:
            hat = {m: modal[m] + task[m] for m in MODAL}
        for abl, m in _ZEROED.items():
            if abl in self.ablations:
                hat[m] = torch.zeros_like(hat[m])
        return hat, modal, task

    def reconstruction_loss(self, modal: dict[str, Tensor], task: dict[str, Tensor]) -> Tensor:
        total = 0.0
        for m in MODAL:
            others = [modal[o] for o in MODAL if o != m]
            out = self.recon[m](torch.cat([task[m], *others], dim=-1))
            total = total + ((out - modal[m]) ** 2).sum(-1).mean()
        return total

    # ------------------------------------------------------------ R2MF

    def _gate_split(self, m: str):
        w = self.gate[m].weight[0]
        d2, d8 = 2 * self.dim, 8 * self.dim
        return w[:d2], w[d2:d2 + d8], w[d2 + d8:], self.gate[m].bias[0]

    def entity_logits(self, hat: dict[str, Tensor]) -> Tensor:
        """Entity part of the gate logits, (N, 3)."""
        return torch.stack([hat[m] @ self._gate_split(m)[0] for m in MODAL], dim=-1)

    def relation_logits(self, trans: Tensor, rot: Tensor) -> Tensor:
        """Relation part of the gate logits (bias included), (B, 3)."""
        parts = []
        for m in MODAL:
            _, wt, wr, b = self._gate_split(m)
            parts.append(trans @ wt + rot @ wr + b)
        return torch.stack(parts, dim=-1)

    def gate_weights(self, logits: Tensor, tau: Tensor) -> Tensor:
        if "no-gate" in self.ablations:
            return torch.full_like(logits, 1.0 / 3.0)
        return torch.softmax(logits / tau.unsqueeze(-1), dim=-1)

    def fuse(self, hat: dict[str, Tensor], weights: Tensor, joint_task: Tensor) -> Tensor:
        joint = sum(weights[..., i:i + 1] * hat[m] for i, m in enumerate(MODAL)) + joint_task
        if "no-joint" in self.ablations:
            joint = torch.zeros_like(joint)
        return joint

    def fused_heads(self, heads: Tensor, rels: Tensor, noise: NoiseModel | None = None, gen=None):
        """Per-row FERF and relation-gated fusion; returns (joint, hat, logits, weights, modal, task)."""
        hat, modal, task = self.ferf(heads, noise, gen)
        trans, rot = self.relation_blocks(rels)
        logits = self.entity_logits(hat) + self.relation_logits(trans, rot)
        weights = self.gate_weights(logits, self.temperature(rels))
        joint = self.fuse(hat, weights, self.ent_task_joint[heads])
        return joint, hat, logits, weights, modal, task

    # ------------------------------------------------------------ scoring

    def forward_batch(self, heads: Tensor, rels: Tensor, table=None) -> ForwardCache:
        joint, hat, logits, weights, modal, task = self.fused_heads(heads, rels)
        trans, rot = self.relation_blocks(rels)
        q_head = assemble_entity(joint, hat["struct"], hat["visual"], hat["text"])
        query = transform_query(q_head, trans, rot, self.score_mode, table)
        all_ids = torch.arange(self.n_entities)
        hat_all, _, _ = self.ferf(all_ids)
        return ForwardCache(
            heads=heads, rels=rels, hat=hat, logits=logits, weights=weights, joint=joint,
            q_head=q_head, trans=trans, rot=rot, query=query,
            hat_all=hat_all, ent_logits_all=self.entity_logits(hat_all), modal=modal, task=task,
        )

    def candidate_weights(self, cache: ForwardCache) -> Tensor:
        """Gate weights of every candidate under each query's relation, (B, E, 3)."""
        rel_part = self.relation_logits(cache.trans, cache.rot)
        logits = cache.ent_logits_all.unsqueeze(0) + rel_part.unsqueeze(1)
        return self.gate_weights(logits, self.temperature(cache.rels).unsqueeze(-1))

    def candidate_scores(self, cache: ForwardCache) -> Tensor:
        """<query, Q_t> for every candidate tail, fused under the query relation; (B, E)."""
        qj, qs, qv, qt = split_entity(cache.query)
        hat = cache.hat_all
        scores = qs @ hat["struct"].T + qv @ hat["visual"].T + qt @ hat["text"].T
        if "no-joint" not in self.ablations:
            w = self.candidate_weights(cache)
            proj = torch.stack([qj @ hat[m].T for m in MODAL], dim=-1)
            scores = scores + (w * proj).sum(-1) + qj @ self.ent_task_joint.T
        return scores

    def score_batch(self, heads: Tensor, rels: Tensor, table=None) -> tuple[Tensor, ForwardCache]:
        cache = self.forward_batch(heads, rels, table)
        return self.candidate_scores(cache), cache

    def tail_embedding(self, cache: ForwardCache, tails: Tensor) -> Tensor:
        """Assembled embedding of the given tails under each row's relation, (B, 8d)."""
        hat = {m: cache.hat_all[m][tails] for m in MODAL}
        logits = cache.ent_logits_all[tails] + self.relation_logits(cache.trans, cache.rot)
        weights = self.gate_weights(logits, self.temperature(cache.rels))
        joint = self.fuse(hat, weights, self.ent_task_joint[tails])
        return assemble_entity(joint, hat["struct"], hat["visual"], hat["text"])

    # ------------------------------------------------------------ losses

    def distill_loss(self, cache: ForwardCache, noise: NoiseModel | None, gen=None,
                     teacher: Tensor | None = None) -> Tensor:
        """Mean squared gap between the clean (teacher, no gradient) and noised fused embeddings.

        ``teacher`` overrides the clean embedding with a fixed tensor, which is
        how a finite-difference check sees the same stop-gradient function.
        """
        zero = cache.joint.new_zeros(())
        if noise is None or "no-noise" in self.ablations or int(round(noise.ratio * len(cache.heads))) == 0:
            return zero
        student, *_ = self.fused_heads(cache.heads, cache.rels, noise, gen)
        teacher = cache.joint.detach() if teacher is None else teacher
        return ((teacher - student) ** 2).sum(-1).mean()

    def n3_reg(self, cache: ForwardCache, tails: Tensor, lam: float) -> Tensor:
        if lam < 0:
            raise ConfigError(f"regularization weight must be >= 0, got {lam}")
        return lam * n3_penalty(cache.q_head, cache.trans, cache.rot, self.tail_embedding(cache, tails))

    def total_loss(
        self,
        triples: Tensor,
        noise: NoiseModel | None = None,
        gen: torch.Generator | None = None,
        lam: float = 0.005,
        weights: dict[str, float] | None = None,
        table=None,
        teacher: Tensor | None = None,
    ) -> tuple[Tensor, dict[str, Tensor]]:
        """Weighted sum of triple, reconstruction, distillation and N3 terms (weights default 1)."""
        w = {"triple": 1.0, "recon": 1.0, "distill": 1.0, "reg": 1.0, **(weights or {})}
        heads, rels, tails = triples[:, 0], triples[:, 1], triples[:, 2]
        scores, cache = self.score_batch(heads, rels, table)
        terms = {"triple": triple_loss(scores, tails)}
        if "no-ferf" in self.ablations:
            terms["recon"] = scores.new_zeros(())
        else:
            terms["recon"] = self.reconstruction_loss(cache.modal, cache.task)
        terms["distill"] = self.distill_loss(cache, noise, gen, teacher)
        terms["reg"] = self.n3_reg(cache, tails, lam)
        total = sum(w[k] * v for k, v in terms.items())
        return total, terms
