"""Training steps: plain cross-entropy, fuse distillation and its symmetric variant.

Fuse distillation runs each batch twice, once through the language-specific
route (``p_l``) and once through the shared route (``p_s``), and optimizes::

    0.5 * (CE(y, p_l) + CE(y, p_s)) + KL(stopgrad(p_l) || p_s)

The LMS+FD variant replaces the KL term with the symmetric
``0.5 * (KL(p_l || p_s) + KL(p_s || p_l))`` and lets gradient reach both sides.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import PAD, Batch, BatchStream, DataError, Example, Vocab, eval_batches
from .lms import ConfigurationError
from .model import Model
from .numerics import Node, NumericError


class TrainingDiverged(NumericError):
    """Raised when a loss becomes NaN or infinite."""


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    warmup: int = 100
    fd_enabled: bool = False
    fd_symmetric: bool = True
    temperature: float = 5.0
    ce_weight: float = 0.5
    fd_weight: float = 1.0
    clip_norm: float = 1.0
    eval_every: int = 0
    eval_batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.temperature < 1:
            raise ConfigurationError("temperature must be >= 1")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigurationError(f"lr must be a positive finite number, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.warmup < 0 or self.eval_every < 0:
            raise ConfigurationError("warmup and eval_every must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train fields: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class StepReport:
    step: int
    ce_ls: float
    ce_shared: float | None
    fd_loss: float
    aux_loss: float
    total_loss: float
    src_lang: int
    tgt_lang: int
    lr: float = 0.0

    def to_record(self) -> dict:
        return {"kind": "step", **asdict(self)}


# ---------------------------------------------------------------------------
# optimizer


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` at ``warmup``, then ``peak * sqrt(warmup / step)``."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if warmup == 0:
        return peak
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


def adam_update(value, grad, m, v, t: int, lr: float, betas=(0.9, 0.98), eps=1e-9):
    """One in-place Adam update of ``value``; ``m``/``v`` are updated in place too."""
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    value -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params: Sequence[Node], lr: float = 5e-4, betas=(0.9, 0.98), eps: float = 1e-9, warmup: int = 0):
        self.params = list(params)
        self.peak_lr = lr
        self.betas = betas
        self.eps = eps
        self.warmup = warmup
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    @property
    def lr(self) -> float:
        return inverse_sqrt_lr(max(self.t, 1), self.peak_lr, self.warmup)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        self.t += 1
        lr = inverse_sqrt_lr(self.t, self.peak_lr, self.warmup)
        for p, m, v in zip(self.params, self.m, self.v):
            adam_update(p.value, p.grad, m, v, self.t, lr, self.betas, self.eps)
        return lr


def clip_grad_norm(params: Sequence[Node], max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    if not math.isfinite(norm):
        raise TrainingDiverged("gradient norm is not finite")
    if max_norm > 0 and norm > max_norm:
        k = max_norm / norm
        for p in params:
            if p._grad is not None:
                p._grad *= k
    return norm


# ---------------------------------------------------------------------------
# losses


@dataclass
class Losses:
    total: Node
    ce_ls: Node
    ce_shared: Node | None = None
    fd: Node | None = None
    aux: Node | None = None
    logits_ls: Node | None = None
    logits_shared: Node | None = None


def _check_batch(batch: Batch) -> None:
    if not isinstance(batch, Batch):
        raise DataError("expected a homogeneous Batch")
    if np.ndim(batch.src_lang) != 0 or np.ndim(batch.tgt_lang) != 0:
        raise DataError("batch is not homogeneous: one source and one target language required")


def _with_aux(loss: Node, out, model: Model) -> tuple[Node, Node | None]:
    if out.balance_loss is None:
        return loss, None
    aux = nx.scale(out.balance_loss, model.cfg.balance_weight)
    return nx.add(loss, aux), aux


def ce_losses(model: Model, batch: Batch) -> Losses:
    _check_batch(batch)
    out = model.forward(batch, "ls")
    ce = nx.cross_entropy(out.logits, out.targets, PAD)
    total, aux = _with_aux(ce, out, model)
    return Losses(total, ce, aux=aux, logits_ls=out.logits)


def fd_losses(
    model: Model,
    batch: Batch,
    symmetric: bool,
    ce_weight: float = 0.5,
    fd_weight: float = 1.0,
) -> Losses:
    """Two passes (ls, shared) and the distillation objective on top."""
    _check_batch(batch)
    if not model.cfg.has_shared_route:
        raise ConfigurationError(f"strategy {model.cfg.ffn_strategy!r} has no shared route for distillation")
    if symmetric and model.cfg.ffn_strategy != "lms_fd":
        raise ConfigurationError("symmetric distillation is defined for lms_fd models")
    out_l = model.forward(batch, "ls")
    out_s = model.forward(batch, "shared")
    ce_l = nx.cross_entropy(out_l.logits, out_l.targets, PAD)
    ce_s = nx.cross_entropy(out_s.logits, out_s.targets, PAD)
    if symmetric:
        fd = nx.scale(
            nx.add(nx.kl_rows(out_l.logits, out_s.logits), nx.kl_rows(out_s.logits, out_l.logits)),
            0.5,
        )
    else:
        fd = nx.kl_rows(out_l.logits, out_s.logits, detach_p=True)
    total = nx.add(nx.scale(nx.add(ce_l, ce_s), ce_weight), nx.scale(fd, fd_weight))
    return Losses(total, ce_l, ce_s, fd, logits_ls=out_l.logits, logits_shared=out_s.logits)


def _apply(model: Model, losses: Losses, opt: Adam, step: int, batch: Batch, clip_norm: float) -> StepReport:
    total = losses.total.item()
    if not math.isfinite(total):
        raise TrainingDiverged(f"step {step}: loss is {total} on pair {batch.pair}")
    for p in model.parameters():
        p.zero_grad()
    losses.total.backward()
    clip_grad_norm(opt.params, clip_norm)
    lr = opt.step()
    return StepReport(
        step=step,
        ce_ls=losses.ce_ls.item(),
        ce_shared=None if losses.ce_shared is None else losses.ce_shared.item(),
        fd_loss=0.0 if losses.fd is None else losses.fd.item(),
        aux_loss=0.0 if losses.aux is None else losses.aux.item(),
        total_loss=total,
        src_lang=batch.src_lang,
        tgt_lang=batch.tgt_lang,
        lr=lr,
    )


def ce_step(model: Model, batch: Batch, opt: Adam, step: int = 0, clip_norm: float = 1.0) -> StepReport:
    return _apply(model, ce_losses(model, batch), opt, step, batch, clip_norm)


def fd_step(model: Model, batch: Batch, opt: Adam, step: int = 0, cfg: TrainConfig | None = None) -> StepReport:
    cfg = cfg or TrainConfig()
    losses = fd_losses(model, batch, False, cfg.ce_weight, cfg.fd_weight)
    return _apply(model, losses, opt, step, batch, cfg.clip_norm)


def lms_fd_step(model: Model, batch: Batch, opt: Adam, step: int = 0, cfg: TrainConfig | None = None) -> StepReport:
    cfg = cfg or TrainConfig()
    losses = fd_losses(model, batch, True, cfg.ce_weight, cfg.fd_weight)
    return _apply(model, losses, opt, step, batch, cfg.clip_norm)


# ---------------------------------------------------------------------------
# evaluation and the training loop


def evaluate(model: Model, batches: Iterable[Batch], vocab: Vocab, route: str = "ls") -> dict[str, float]:
    """Teacher-forced token accuracy (percent, EOS included) per direction."""
    hits: dict[str, int] = {}
    counts: dict[str, int] = {}
    for b in batches:
        out = model.forward(b, route)
        key = f"{vocab.languages[b.src_lang]}-{vocab.languages[b.tgt_lang]}"
        pred = out.logits.value.argmax(axis=1)
        hits[key] = hits.get(key, 0) + int((pred == out.targets).sum())
        counts[key] = counts.get(key, 0) + len(out.targets)
    return {k: 100.0 * hits[k] / counts[k] for k in sorted(counts)}


def routes_for(model: Model) -> list[str]:
    return ["ls", "shared"] if model.cfg.has_shared_route else ["ls"]


@dataclass
class TrainResult:
    model: Model
    history: list[StepReport] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def final_accuracy(self, route: str = "ls") -> dict[str, float]:
        for rec in reversed(self.evals):
            if rec["route"] == route:
                return rec["accuracy"]
        raise KeyError(f"no evaluation for route {route!r}")


def train(
    model: Model,
    train_examples: Sequence[Example],
    valid_examples: Sequence[Example],
    vocab: Vocab,
    cfg: TrainConfig,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` updates; evaluate every ``eval_every`` steps and at the end.

    With ``eval_every == 0`` no evaluation is run.
    """
    cfg.validate()
    symmetric = cfg.fd_symmetric and model.cfg.ffn_strategy == "lms_fd"
    if cfg.fd_enabled and not model.cfg.has_shared_route:
        raise ConfigurationError(f"fd_enabled needs a shared route; {model.cfg.ffn_strategy!r} has none")
    opt = Adam(model.trainable_parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.warmup)
    stream = BatchStream(train_examples, vocab, cfg.batch_size, cfg.temperature, cfg.seed)
    valid = eval_batches(valid_examples, vocab, cfg.eval_batch_size) if valid_examples else []
    result = TrainResult(model)
    emit = on_record or (lambda rec: None)

    for step in range(1, cfg.steps + 1):
        batch = next(stream)
        if cfg.fd_enabled:
            losses = fd_losses(model, batch, symmetric, cfg.ce_weight, cfg.fd_weight)
        else:
            losses = ce_losses(model, batch)
        report = _apply(model, losses, opt, step, batch, cfg.clip_norm)
        result.history.append(report)
        emit(report.to_record())
        if cfg.eval_every and valid and (step % cfg.eval_every == 0 or step == cfg.steps):
            for route in routes_for(model):
                acc = evaluate(model, valid, vocab, route)
                rec = {
                    "kind": "eval",
                    "step": step,
                    "route": route,
                    "accuracy": acc,
                    "mean": float(np.mean(list(acc.values()))),
                }
                result.evals.append(rec)
                emit(rec)
    return result


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
