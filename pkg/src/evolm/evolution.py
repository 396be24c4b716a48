"""Self-evolution learning: find neglected tokens, then train on them with smoothed labels.

Stage 1 (``self_question_scan``) re-predicts every token of the unmasked
training corpus and records the positions where the truth token is not
the model's unique top prediction. Stage 2 (``self_evolve``) masks those
positions and trains against ``(1 - alpha) * onehot + alpha * r`` where
``r`` is the model's own distribution at that position given the
unmasked sentence.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import MASK, NUM_SPECIAL, Sample, batch, pad_batch
from .errors import ContractError, DataError, DimensionError
from .model import Encoder
from .pretrain import (ACTION_MASK, AdamW, MaskPlan, MetricsLog, _plan_coords, check_finite,
                       clip_grad_norm, eligible_positions, evaluation_plans, fill_missing_grads,
                       mask_count, masked_cross_entropy, mlm_eval_record, random_mask, warmup_lr)
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeglectedRecord:
    sample: int
    pos: int
    truth: int
    truth_p: float
    top: int
    top_p: float

    def to_json(self) -> dict:
        return {"sample": self.sample, "pos": self.pos, "truth": self.truth,
                "truth_p": self.truth_p, "top": self.top, "top_p": self.top_p}


@dataclass
class NeglectedTokenIndex:
    """Neglected-token records grouped by sample index."""

    by_sample: dict[int, list[NeglectedRecord]] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return sum(len(v) for v in self.by_sample.values())

    def get(self, sample: int) -> list[NeglectedRecord]:
        return self.by_sample.get(sample, [])

    def records(self) -> list[NeglectedRecord]:
        return [r for k in sorted(self.by_sample) for r in self.by_sample[k]]

    def __eq__(self, other) -> bool:
        return isinstance(other, NeglectedTokenIndex) and self.records() == other.records()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json()) + "\n" for r in self.records())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_records(cls, records: Iterable[NeglectedRecord]) -> "NeglectedTokenIndex":
        out = cls()
        for r in records:
            out.by_sample.setdefault(r.sample, []).append(r)
        return out

    @classmethod
    def load(cls, path: str | Path) -> "NeglectedTokenIndex":
        records = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(NeglectedRecord(int(obj["sample"]), int(obj["pos"]), int(obj["truth"]),
                                               float(obj["truth_p"]), int(obj["top"]),
                                               float(obj["top_p"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed index record ({exc})") from exc
        return cls.from_records(records)


def is_neglected(truth_p: float, top_other_p: float, margin: float = 0.0) -> bool:
    """True unless the truth beats every other token by more than ``margin``.

    With ``margin == 0`` this is "truth is not the unique argmax"; ties
    count as neglected.
    """
    return not truth_p - top_other_p > margin


def scan_sample(encoder: Encoder, token_ids: Sequence[int], sample: int,
                margin: float = 0.0) -> list[NeglectedRecord]:
    ids = np.asarray(token_ids, dtype=np.int64)
    with T.no_grad():
        probs = T.softmax(encoder.forward_mlm(ids)).data
    out = []
    for pos in eligible_positions(ids):
        truth = int(ids[pos])
        row = probs[pos]
        others = row.copy()
        others[truth] = -np.inf
        top = int(np.argmax(others))
        if is_neglected(row[truth], row[top], margin):
            out.append(NeglectedRecord(sample, int(pos), truth, float(row[truth]), top, float(row[top])))
    return out


def self_question_scan(encoder: Encoder, corpus: Sequence[Sample],
                       margin: float = 0.0) -> NeglectedTokenIndex:
    """Re-predict every unmasked training sample and collect neglected tokens.

    Read-only: the encoder checksum is verified unchanged afterwards.
    """
    before = encoder.checksum()
    index = NeglectedTokenIndex()
    for i, s in enumerate(corpus):
        records = scan_sample(encoder, s.token_ids, i, margin)
        if records:
            index.by_sample[i] = records
    if encoder.checksum() != before:
        raise RuntimeError("self_question_scan modified encoder parameters")
    return index


def select_evolution_masks(token_ids: Sequence[int], records: Sequence[NeglectedRecord],
                           mask_budget_rate: float, rng: np.random.Generator) -> MaskPlan:
    """Mask the hardest neglected positions, topping up with random ones.

    Budget is ``ceil(rate * eligible)``; neglected positions are ranked by
    ascending truth probability, ties by position. Every chosen position is
    replaced with MASK.
    """
    if not 0.0 < mask_budget_rate <= 1.0:
        raise ContractError(f"mask_budget_rate must be in (0, 1], got {mask_budget_rate}")
    ids = np.asarray(token_ids, dtype=np.int64)
    eligible = eligible_positions(ids)
    if len(eligible) == 0:
        raise ContractError("sample has no maskable tokens")
    budget = mask_count(mask_budget_rate, len(eligible))
    ranked = sorted(records, key=lambda r: (r.truth_p, r.pos))
    chosen = [r.pos for r in ranked[:budget]]
    if len(chosen) < budget:
        rest = np.setdiff1d(eligible, chosen)
        chosen += [int(p) for p in rng.choice(rest, size=budget - len(chosen), replace=False)]
    positions = np.array(sorted(chosen), dtype=np.int64)
    n = len(positions)
    return MaskPlan(positions, np.full(n, ACTION_MASK), ids[positions], np.full(n, MASK))


def rectified_smooth_label(y: np.ndarray, r: np.ndarray, alpha: float) -> np.ndarray:
    """``(1 - alpha) * y + alpha * r`` for a one-hot ``y`` and a distribution ``r``.

    Works row-wise on 2-D inputs.
    """
    y = np.asarray(y, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if y.shape != r.shape:
        raise DimensionError(f"label shapes differ: {y.shape} vs {r.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ContractError("y must be one-hot")
    if np.any(r < 0) or np.any(np.abs(r.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("r must be a probability distribution")
    return (1.0 - alpha) * y + alpha * r


def evolution_step_loss(encoder: Encoder, masked_ids: np.ndarray, original_ids: np.ndarray,
                        attention_mask: np.ndarray, plans: Sequence[MaskPlan], alpha: float) -> Tensor:
    """Mean cross-entropy between masked-input predictions and rectified labels.

    The reference distribution comes from the unmasked batch with no
    gradient recorded.
    """
    masked_ids = np.asarray(masked_ids, dtype=np.int64)
    original_ids = np.asarray(original_ids, dtype=np.int64)
    if masked_ids.shape != original_ids.shape or masked_ids.shape[0] != len(plans):
        raise ContractError(
            f"misaligned batches: masked {masked_ids.shape}, original {original_ids.shape}, {len(plans)} plans")
    if not plans or sum(len(p) for p in plans) == 0:
        raise ContractError("evolution_step_loss needs at least one masked position")
    rows, cols, originals = _plan_coords(plans)
    if np.any(original_ids[rows, cols] != originals):
        raise ContractError("plans do not match the original batch")
    V = encoder.config.vocab_size
    with T.no_grad():
        r = T.softmax(encoder.forward_mlm(original_ids, attention_mask)).data[rows, cols]
    target = rectified_smooth_label(np.eye(V)[originals], r, alpha)
    return masked_cross_entropy(encoder.forward_mlm(masked_ids, attention_mask), rows, cols, target)


@dataclass
class SelfEvolutionConfig:
    alpha: float = 0.5
    steps: int = 500
    batch_size: int = 32
    mask_budget_rate: float = 0.15
    random_mix_rate: float = 0.2
    mask_rate: float = 0.15
    rescan_fraction: float | None = 0.25
    margin: float = 0.0
    lr: float = 1e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    eval_interval: int = 100
    eval_samples: int = 256
    slot_eval_limit: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must be in [0, 1]")
        for name in ("mask_budget_rate", "mask_rate"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must be in (0, 1]")
        if not 0.0 <= self.random_mix_rate <= 1.0:
            raise ContractError("random_mix_rate must be in [0, 1]")
        if self.rescan_fraction is not None and not 0.0 < self.rescan_fraction <= 1.0:
            raise ContractError("rescan_fraction must be in (0, 1] or null")
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ContractError("steps >= 0, batch_size >= 1 and eval_interval >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


def self_evolve(encoder: Encoder, corpus: Sequence[Sample], config: SelfEvolutionConfig,
                sink: Callable[[dict], None] | None = None) -> tuple[Encoder, list[dict]]:
    """Phase-2 training in place; rescans every ``rescan_fraction`` of the steps.

    A final scan after the last step reports the closing neglected count.
    """
    metrics = MetricsLog(sink)
    if config.steps == 0:
        return encoder, metrics.records
    V = encoder.config.vocab_size
    params = encoder.parameters()
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 2])
    plans_eval = evaluation_plans(corpus, config.eval_samples, config.mask_rate, config.seed, V)
    rescan_every = (max(1, round(config.rescan_fraction * config.steps))
                    if config.rescan_fraction is not None else None)

    def emit(step, loss, index=None):
        rec = mlm_eval_record(encoder, corpus, plans_eval, step, loss, "evolve", config.slot_eval_limit)
        if index is not None:
            rec["neglected_count"] = index.count
        metrics.emit(rec)

    index = self_question_scan(encoder, corpus, config.margin)
    emit(0, None, index)
    step, epoch, running = 0, 0, []
    while step < config.steps:
        for b in batch(corpus, config.batch_size, config.seed, epoch):
            plans, masked, originals = [], [], []
            for i in b.indices:
                ids = corpus[i].token_ids
                if len(eligible_positions(ids)) == 0:
                    continue
                if rng.random() < config.random_mix_rate:
                    plan = random_mask(ids, config.mask_rate, rng, V)
                else:
                    plan = select_evolution_masks(ids, index.get(int(i)), config.mask_budget_rate, rng)
                plans.append(plan)
                masked.append(plan.apply(ids))
                originals.append(ids)
            if not plans:
                continue
            masked_ids, mask = pad_batch(masked)
            original_ids, _ = pad_batch(originals)
            opt.zero_grad()
            loss = evolution_step_loss(encoder, masked_ids, original_ids, mask, plans, config.alpha)
            running.append(check_finite(loss, step, "evolve"))
            loss.backward()
            fill_missing_grads(params)
            clip_grad_norm(params, config.clip_norm)
            opt.step(warmup_lr(step, config.steps, config.lr, config.warmup_frac))
            step += 1
            scanned = None
            if step == config.steps or (rescan_every and step % rescan_every == 0):
                index = self_question_scan(encoder, corpus, config.margin)
                scanned = index
                log.debug("rescan at step %d: %d neglected", step, index.count)
            if scanned is not None or step % config.eval_interval == 0:
                emit(step, float(np.mean(running)), scanned)
                running = []
            if step >= config.steps:
                break
        epoch += 1
    return encoder, metrics.records
