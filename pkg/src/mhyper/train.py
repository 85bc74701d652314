"""Config, gradient computation, Adagrad, and the epoch loop."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ._rng import torch_stream
from .evaluation import aggregate, evaluate
from .kgdata import FilterIndex, KnowledgeGraph, ModalityFeatures, load_dataset
from .model import ABLATIONS, SCORE_MODES, ConfigError, MHyper, NoiseModel

log = logging.getLogger(__name__)

PRECISIONS = {"f32": torch.float32, "f64": torch.float64}
LOSS_TERMS = ("triple", "recon", "distill", "reg")


class NonFiniteError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: dict | None, history: list):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


@dataclass
class TrainConfig:
    dataset: str = ""
    learning_rate: float = 0.1
    dim: int = 128
    reg: float = 0.005
    noise_ratio: float = 0.2
    batch_size: int = 1000
    epochs: int = 100
    eval_every: int = 10
    seed: int = 0
    precision: str = "f32"
    w_triple: float = 1.0
    w_recon: float = 1.0
    w_distill: float = 1.0
    w_reg: float = 1.0
    score_mode: str = "full"
    ablations: str = ""
    grad_clip: float = 0.0
    early_stopping: bool = False
    patience: int = 20
    pca_init: bool = True
    threads: int = 1

    def validate(self) -> TrainConfig:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.reg < 0:
            raise ConfigError(f"reg must be >= 0, got {self.reg}")
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise ConfigError(f"noise_ratio must be in [0, 1], got {self.noise_ratio}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.eval_every < 0 or self.patience < 1 or self.threads < 1:
            raise ConfigError("epochs/eval_every must be >= 0; patience/threads must be >= 1")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")
        for a in self.ablation_set:
            if a not in ABLATIONS:
                raise ConfigError(f"unknown ablation {a!r}; expected from {ABLATIONS}")
        if any(w < 0 for w in self.loss_weights.values()) or self.grad_clip < 0:
            raise ConfigError("loss-term weights and grad_clip must be >= 0")
        return self

    @property
    def ablation_set(self) -> frozenset[str]:
        return frozenset(a.strip() for a in self.ablations.split(",") if a.strip())

    @property
    def loss_weights(self) -> dict[str, float]:
        return {k: getattr(self, f"w_{k}") for k in LOSS_TERMS}

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    # ------------------------------------------------------------ text format

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> TrainConfig:
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(value, types[key], f"{source}:{lineno}")
        return cls(**values).validate()

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _parse_value(value: str, typ: str, where: str):
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        value = value[1:-1]
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {typ}") from None
    return value


# ---------------------------------------------------------------- gradients


def compute_gradients(model: MHyper, batch: torch.Tensor, noise: NoiseModel | None = None,
                      gen: torch.Generator | None = None, lam: float = 0.005,
                      weights: dict[str, float] | None = None):
    """Total loss, its term breakdown, and the gradient of every parameter table."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    model.zero_grad(set_to_none=True)
    total, terms = model.total_loss(batch, noise, gen, lam, weights)
    total.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in table {name!r}")
        grads[name] = g.detach()
    return total.detach(), {k: v.detach() for k, v in terms.items()}, grads


@dataclass
class AdagradState:
    eps: float = 1e-10
    accum: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adagrad_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdagradState,
                 lr: float) -> None:
    """In-place: accum += g^2; p -= lr * g / (sqrt(accum) + eps)."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        acc = state.accum.get(name)
        if acc is None:
            acc = state.accum[name] = torch.zeros_like(p)
        if p.ndim == 2 and p.shape[0] > 1:
            rows = g.abs().sum(1).nonzero().squeeze(1)  # untouched rows keep params and accumulators
            if len(rows) == 0:
                continue
            gr = g[rows]
            acc[rows] += gr * gr
            p[rows] -= lr * gr / (acc[rows].sqrt() + state.eps)
        else:
            acc += g * g
            p -= lr * g / (acc.sqrt() + state.eps)


# ---------------------------------------------------------------- loop


@dataclass
class EpochRecord:
    epoch: int
    total: float
    triple: float
    recon: float
    distill: float
    reg: float
    seconds: float
    valid_mrr: float | None = None

    def log_line(self) -> str:
        return (f"{self.epoch}\t{self.total:.6f}\t{self.triple:.6f}\t{self.recon:.6f}\t"
                f"{self.distill:.6f}\t{self.reg:.6f}\t{self.seconds:.3f}")


@dataclass
class TrainResult:
    model: MHyper
    history: list[EpochRecord]
    best_valid_mrr: float | None
    best_epoch: int | None


def _last_good(model: MHyper, fallback: dict | None) -> dict | None:
    """Parameters before the failing step (no update was applied), unless they are already non-finite."""
    state = model.state_dict()
    if all(torch.isfinite(v).all() for v in state.values() if v.is_floating_point()):
        return copy.deepcopy(state)
    return fallback


def build_model(cfg: TrainConfig, graph: KnowledgeGraph, features: dict[str, ModalityFeatures]) -> MHyper:
    return MHyper(
        graph.n_entities, graph.n_relations, cfg.dim, features,
        seed=cfg.seed, dtype=cfg.dtype, score_mode=cfg.score_mode,
        ablations=cfg.ablation_set, pca=cfg.pca_init,
    )


def train(cfg: TrainConfig, graph: KnowledgeGraph | None = None,
          features: dict[str, ModalityFeatures] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train from ``cfg``; the returned model holds the best-validation parameters."""
    cfg.validate()
    torch.set_num_threads(cfg.threads)
    if graph is None:
        graph, features = load_dataset(cfg.dataset)
    model = build_model(cfg, graph, features)
    history: list[EpochRecord] = []
    if cfg.epochs == 0 or len(graph.train) == 0:
        return TrainResult(model, history, None, None)

    state = AdagradState()
    params = dict(model.named_parameters())
    triples = torch.as_tensor(graph.train, dtype=torch.long)
    shuffle = torch_stream(cfg.seed, "shuffle")
    index = FilterIndex.from_graph(graph) if len(graph.valid) else None
    use_noise = cfg.noise_ratio > 0 and "no-noise" not in cfg.ablation_set
    best_mrr, best_epoch, best_state = None, None, None
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        noise = model.noise_model(cfg.noise_ratio, cfg.seed) if use_noise else None
        perm = torch.randperm(len(triples), generator=shuffle)
        sums = dict.fromkeys(("total", *LOSS_TERMS), 0.0)
        for b, start in enumerate(range(0, len(triples), cfg.batch_size)):
            batch = triples[perm[start:start + cfg.batch_size]]
            gen = torch_stream(cfg.seed, "noise", epoch, b)
            try:
                total, terms, grads = compute_gradients(model, batch, noise, gen, cfg.reg, cfg.loss_weights)
                if not math.isfinite(float(total)):
                    raise NonFiniteError("non-finite loss")
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}", _last_good(model, best_state),
                                       history) from exc
            if cfg.grad_clip > 0:
                norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
                if norm > cfg.grad_clip:
                    grads = {k: g * (cfg.grad_clip / norm).to(g.dtype) for k, g in grads.items()}
            adagrad_step(params, grads, state, cfg.learning_rate)
            n = len(batch)
            sums["total"] += float(total) * n
            for k in LOSS_TERMS:
                sums[k] += float(terms[k]) * n
        rec = EpochRecord(epoch, *(sums[k] / len(triples) for k in ("total", *LOSS_TERMS)),
                          seconds=time.perf_counter() - t0)
        due = cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs)
        if index is not None and due:
            rec.valid_mrr = aggregate(evaluate(model, graph, graph.valid, index))["MRR"]
            if best_mrr is None or rec.valid_mrr > best_mrr:
                best_mrr, best_epoch, stale = rec.valid_mrr, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("%s", rec.log_line())
        if cfg.early_stopping and stale >= cfg.patience:
            log.info("early stop at epoch %d (best epoch %s)", epoch, best_epoch)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, history, best_mrr, best_epoch)
