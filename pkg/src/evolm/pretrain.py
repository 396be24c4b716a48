"""Random-mask MLM pretraining with AdamW."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import MASK, NUM_SPECIAL, Sample, batch, pad_batch
from .errors import ContractError, DimensionError, DivergenceError
from .model import Encoder
from .tensor import Tensor

log = logging.getLogger(__name__)

ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = 0, 1, 2


@dataclass
class MaskPlan:
    positions: np.ndarray      # sorted, int64
    actions: np.ndarray        # ACTION_* per position
    originals: np.ndarray      # ground-truth ids at the positions
    replacements: np.ndarray   # id written into the masked sequence

    def __len__(self) -> int:
        return len(self.positions)

    def apply(self, token_ids: Sequence[int]) -> np.ndarray:
        out = np.array(token_ids, dtype=np.int64)
        out[self.positions] = self.replacements
        return out


def eligible_positions(token_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(token_ids)
    return np.nonzero(ids >= NUM_SPECIAL)[0]


def mask_count(rate: float, eligible: int) -> int:
    return max(1, math.ceil(rate * eligible))


def random_mask(token_ids: Sequence[int], mask_rate: float, rng: np.random.Generator,
                vocab_size: int) -> MaskPlan | None:
    """Choose ``ceil(rate * eligible)`` positions; 80% MASK, 10% random id, 10% keep.

    Returns ``None`` when the sample has no maskable token.
    """
    if not 0.0 < mask_rate <= 0.5:
        raise ContractError(f"mask_rate must be in (0, 0.5], got {mask_rate}")
    eligible = eligible_positions(token_ids)
    if len(eligible) == 0:
        return None
    n = mask_count(mask_rate, len(eligible))
    positions = np.sort(rng.choice(eligible, size=n, replace=False))
    u = rng.random(n)
    actions = np.where(u < 0.8, ACTION_MASK, np.where(u < 0.9, ACTION_RANDOM, ACTION_KEEP))
    originals = np.asarray(token_ids, dtype=np.int64)[positions]
    random_ids = rng.integers(NUM_SPECIAL, vocab_size, size=n)
    replacements = np.where(actions == ACTION_MASK, MASK,
                            np.where(actions == ACTION_RANDOM, random_ids, originals))
    return MaskPlan(positions, actions, originals, replacements)


def masked_cross_entropy(logits: Tensor, rows: np.ndarray, cols: np.ndarray,
                         targets: np.ndarray) -> Tensor:
    """Mean cross-entropy at ``logits[rows, cols]`` against target distributions."""
    picked = logits[rows, cols]
    return T.cross_entropy(picked, targets).mean()


def _plan_coords(plans: Sequence[MaskPlan]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.concatenate([np.full(len(p), b) for b, p in enumerate(plans)]).astype(np.int64)
    cols = np.concatenate([p.positions for p in plans]).astype(np.int64)
    originals = np.concatenate([p.originals for p in plans]).astype(np.int64)
    return rows, cols, originals


def mlm_loss(logits: Tensor, plans: MaskPlan | Sequence[MaskPlan]) -> Tensor:
    """Mean one-hot cross-entropy over masked positions only.

    ``logits`` is ``(L, V)`` with a single plan or ``(B, L, V)`` with one
    plan per row.
    """
    if isinstance(plans, MaskPlan):
        if logits.ndim != 2:
            raise DimensionError("a single plan needs (L, V) logits")
        logits = T.reshape(logits, (1,) + logits.shape)
        plans = [plans]
    if not plans or sum(len(p) for p in plans) == 0:
        raise ContractError("mlm_loss needs at least one masked position")
    rows, cols, originals = _plan_coords(plans)
    V = logits.shape[-1]
    return masked_cross_entropy(logits, rows, cols, np.eye(V)[originals])


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState([np.zeros_like(p.data) for p in self.params],
                                    [np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        T.zero_grads(self.params)

    def step(self, lr: float | None = None) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state,
                   self.lr if lr is None else lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    if any(g is None for g in grads):
        raise ContractError("adamw_step: a parameter has no gradient")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


def warmup_lr(step: int, total: int, base_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then constant."""
    warm = max(1, int(round(warmup_frac * total)))
    return base_lr * min(1.0, (step + 1) / warm)


def fill_missing_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# evaluation


def evaluation_plans(corpus: Sequence[Sample], n: int, mask_rate: float, seed: int,
                     vocab_size: int) -> list[tuple[int, MaskPlan]]:
    """A fixed set of (sample index, plan) pairs for masked-token accuracy."""
    rng = np.random.default_rng([seed, 7001])
    idx = np.sort(rng.choice(len(corpus), size=min(n, len(corpus)), replace=False))
    out = []
    for i in idx:
        plan = random_mask(corpus[i].token_ids, mask_rate, rng, vocab_size)
        if plan is not None:
            out.append((int(i), plan))
    return out


def _predict_at(encoder: Encoder, seqs: list[np.ndarray], coords: list[np.ndarray],
                chunk: int = 64) -> list[np.ndarray]:
    preds = []
    with T.no_grad():
        for s in range(0, len(seqs), chunk):
            ids, mask = pad_batch(seqs[s: s + chunk])
            logits = encoder.forward_mlm(ids, mask).data
            for b, pos in enumerate(coords[s: s + chunk]):
                preds.append(logits[b, pos].argmax(axis=-1))
    return preds


def masked_accuracy(encoder: Encoder, corpus: Sequence[Sample],
                    plans: Sequence[tuple[int, MaskPlan]]) -> float:
    if not plans:
        return float("nan")
    seqs = [p.apply(corpus[i].token_ids) for i, p in plans]
    preds = _predict_at(encoder, seqs, [p.positions for _, p in plans])
    hits = sum(int((pr == p.originals).sum()) for pr, (_, p) in zip(preds, plans))
    return hits / sum(len(p) for _, p in plans)


def slot_accuracy(encoder: Encoder, corpus: Sequence[Sample], limit: int | None = None) -> float:
    """Accuracy of predicting each knowledge-slot token with only that slot masked."""
    items = [s for s in corpus if s.slot_pos is not None][:limit]
    if not items:
        return float("nan")
    seqs = []
    for s in items:
        ids = np.array(s.token_ids, dtype=np.int64)
        ids[s.slot_pos] = MASK
        seqs.append(ids)
    preds = _predict_at(encoder, seqs, [np.array([s.slot_pos]) for s in items])
    return sum(int(p[0] == s.token_ids[s.slot_pos]) for p, s in zip(preds, items)) / len(items)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_frac: float = 0.05
    mask_rate: float = 0.15
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    eval_interval: int = 100
    eval_samples: int = 256
    slot_eval_limit: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ContractError("steps >= 0, batch_size >= 1 and eval_interval >= 1 required")
        if not 0.0 < self.mask_rate <= 0.5:
            raise ContractError("mask_rate must be in (0, 0.5]")


def check_finite(loss: Tensor, step: int, phase: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"{phase}: non-finite loss {value} at step {step}")
    return value


class MetricsLog:
    """Collects metric records and optionally appends them to a JSONL sink."""

    def __init__(self, sink: Callable[[dict], None] | None = None):
        self.records: list[dict] = []
        self.sink = sink

    def emit(self, record: dict) -> None:
        self.records.append(record)
        log.debug("%s", json.dumps(record))
        if self.sink is not None:
            self.sink(record)


def eval_loss(encoder: Encoder, corpus: Sequence[Sample], plans: Sequence[tuple[int, MaskPlan]],
              chunk: int = 64) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, len(plans), chunk):
            part = plans[s: s + chunk]
            ids, mask = pad_batch([p.apply(corpus[i].token_ids) for i, p in part])
            n = sum(len(p) for _, p in part)
            total += mlm_loss(encoder.forward_mlm(ids, mask), [p for _, p in part]).item() * n
            count += n
    return total / count


def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None


def mlm_eval_record(encoder: Encoder, corpus: Sequence[Sample], plans, step: int,
                    loss: float | None, phase: str, slot_limit: int | None = None) -> dict:
    if loss is None:
        loss = eval_loss(encoder, corpus, plans)
    return {"step": step, "loss": loss,
            "masked_acc": _finite_or_none(masked_accuracy(encoder, corpus, plans)),
            "slot_acc": _finite_or_none(slot_accuracy(encoder, corpus, slot_limit)),
            "phase": phase}


def pretrain(encoder: Encoder, corpus: Sequence[Sample], config: PretrainConfig,
             sink: Callable[[dict], None] | None = None) -> tuple[Encoder, list[dict]]:
    """Train ``encoder`` in place on random-mask MLM; returns it with its metrics."""
    if not corpus:
        raise ContractError("pretrain needs a non-empty corpus")
    V = encoder.config.vocab_size
    params = encoder.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    mask_rng = np.random.default_rng([config.seed, 1])
    plans_eval = evaluation_plans(corpus, config.eval_samples, config.mask_rate, config.seed, V)
    metrics = MetricsLog(sink)
    if config.steps == 0:
        return encoder, metrics.records

    metrics.emit(mlm_eval_record(encoder, corpus, plans_eval, 0, None, "mlm",
                                 config.slot_eval_limit))
    step, epoch, running = 0, 0, []
    while step < config.steps:
        for b in batch(corpus, config.batch_size, config.seed, epoch):
            plans, seqs = [], []
            for i in b.indices:
                plan = random_mask(corpus[i].token_ids, config.mask_rate, mask_rng, V)
                if plan is not None:
                    plans.append(plan)
                    seqs.append(plan.apply(corpus[i].token_ids))
            if not plans:
                continue
            ids, mask = pad_batch(seqs)
            opt.zero_grad()
            loss = mlm_loss(encoder.forward_mlm(ids, mask), plans)
            running.append(check_finite(loss, step, "mlm"))
            loss.backward()
            fill_missing_grads(params)
            clip_grad_norm(params, config.clip_norm)
            opt.step(warmup_lr(step, config.steps, config.lr, config.warmup_frac))
            step += 1
            if step % config.eval_interval == 0 or step == config.steps:
                metrics.emit(mlm_eval_record(encoder, corpus, plans_eval, step,
                                             float(np.mean(running)), "mlm", config.slot_eval_limit))
                running = []
            if step >= config.steps:
                break
        epoch += 1
    return encoder, metrics.records
