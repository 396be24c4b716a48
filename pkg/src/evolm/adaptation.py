"""Downstream adaptation: fine-tuning, soft prompts, KD prompt transfer,
transductive self-training and SiFT-style adversarial regularization."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledExample, batch, pad_batch
from .errors import ConfigError, ContractError, DataError
from .model import Encoder
from .pretrain import AdamW, MetricsLog, check_finite, clip_grad_norm, fill_missing_grads, warmup_lr
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# heads and models


@dataclass
class ClassifierHead:
    weight: Tensor   # (d, C)
    bias: Tensor     # (C,)

    @classmethod
    def init(cls, hidden_size: int, num_classes: int, seed: int) -> "ClassifierHead":
        rng = np.random.default_rng([seed, 31])
        return cls(Tensor(rng.normal(0.0, 0.02, (hidden_size, num_classes)), requires_grad=True),
                   Tensor(np.zeros(num_classes), requires_grad=True))

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def clone(self) -> "ClassifierHead":
        return ClassifierHead(Tensor(self.weight.data, True), Tensor(self.bias.data, True))

    def __call__(self, cls_state: Tensor) -> Tensor:
        return cls_state @ self.weight + self.bias


def class_logits(encoder: Encoder, head: ClassifierHead, ids: np.ndarray, mask: np.ndarray, *,
                 prompt: Tensor | None = None, inputs_embeds: Tensor | None = None) -> Tensor:
    """Head applied to the CLS position (shifted past any prompt rows)."""
    hidden = encoder.encode(ids, mask, prefix=prompt, inputs_embeds=inputs_embeds)
    cls_pos = 0 if prompt is None else prompt.shape[0]
    return head(hidden[:, cls_pos, :])


def normalized_embeddings(encoder: Encoder, ids: np.ndarray) -> Tensor:
    """Token embeddings standardized per position (layer norm without affine)."""
    return T.layer_norm(encoder.embed(ids))


@dataclass
class Classifier:
    encoder: Encoder
    head: ClassifierHead
    normalize_embeddings: bool = False

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.head.parameters()

    def clone(self) -> "Classifier":
        return Classifier(self.encoder.clone(), self.head.clone(), self.normalize_embeddings)

    def logits(self, ids: np.ndarray, mask: np.ndarray, inputs_embeds: Tensor | None = None) -> Tensor:
        if inputs_embeds is None and self.normalize_embeddings:
            inputs_embeds = normalized_embeddings(self.encoder, ids)
        return class_logits(self.encoder, self.head, ids, mask, inputs_embeds=inputs_embeds)


@dataclass
class SoftPrompt:
    vectors: Tensor   # (prompt_len, d)
    task_name: str = "task"

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ContractError(f"prompt must be (prompt_len >= 1, d), got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors.data)):
            raise ContractError("prompt has non-finite entries")

    @classmethod
    def random(cls, prompt_len: int, hidden_size: int, seed: int, task_name: str = "task",
               scale: float = 0.02) -> "SoftPrompt":
        if prompt_len < 1:
            raise ContractError(f"prompt_len must be >= 1, got {prompt_len}")
        rng = np.random.default_rng([seed, 41])
        return cls(Tensor(rng.normal(0.0, scale, (prompt_len, hidden_size)), requires_grad=True), task_name)

    @property
    def prompt_len(self) -> int:
        return self.vectors.shape[0]

    def clone(self) -> "SoftPrompt":
        return SoftPrompt(Tensor(self.vectors.data, True), self.task_name)


@dataclass
class PromptModel:
    prompt: SoftPrompt
    head: ClassifierHead

    def parameters(self) -> list[Tensor]:
        return [self.prompt.vectors] + self.head.parameters()

    def trainable(self, train_head: bool) -> list[Tensor]:
        """Parameters to optimize; a frozen head stays at its seeded init."""
        for p in self.head.parameters():
            p.requires_grad = train_head
        return self.parameters() if train_head else [self.prompt.vectors]

    def logits(self, encoder: Encoder, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        return class_logits(encoder, self.head, ids, mask, prompt=self.prompt.vectors)


@dataclass(frozen=True)
class TaskEmbedding:
    vector: np.ndarray


def task_embedding(prompt: SoftPrompt) -> TaskEmbedding:
    """Mean of the prompt rows."""
    return TaskEmbedding(prompt.vectors.data.mean(axis=0))


def prompt_similarity(e_s: TaskEmbedding, e_t: TaskEmbedding) -> float:
    """Cosine similarity clipped below at 0; a zero vector scores 0."""
    a, b = e_s.vector, e_t.vector
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return min(1.0, max(0.0, float(a @ b) / (na * nb)))


# ---------------------------------------------------------------------------
# losses


def classification_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    return T.cross_entropy(logits, np.eye(logits.shape[-1])[labels]).mean()


def kd_loss(student_logits: Tensor, teacher_logits: np.ndarray, labels: np.ndarray,
            lam: float, temperature: float) -> Tensor:
    """``(1 - lam) * CE(student, y) + lam * T^2 * KL(teacher_T || student_T)``."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must be in [0, 1], got {lam}")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    ce = classification_ce(student_logits, labels)
    teacher_logp = T.log_softmax(Tensor(teacher_logits) * (1.0 / temperature)).data
    student_logp = T.log_softmax(student_logits * (1.0 / temperature))
    kl = T.tsum((student_logp * -1.0 + teacher_logp) * np.exp(teacher_logp), axis=-1).mean()
    return ce * (1.0 - lam) + kl * (lam * temperature**2)


def symmetric_kl(a_logits: Tensor, b_logits: Tensor) -> Tensor:
    """Batch mean of ``KL(p_a || p_b) + KL(p_b || p_a)``."""
    la, lb = T.log_softmax(a_logits), T.log_softmax(b_logits)
    return T.tsum((T.exp(la) - T.exp(lb)) * (la - lb), axis=-1).mean()


# ---------------------------------------------------------------------------
# shared training plumbing


def _labels(examples: Sequence[LabeledExample], num_classes: int) -> np.ndarray:
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}")
    return labels


def predict(logit_fn: Callable[[np.ndarray, np.ndarray], Tensor], examples: Sequence[LabeledExample],
            chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels and softmax probabilities for ``examples``."""
    preds, probs = [], []
    with T.no_grad():
        for s in range(0, len(examples), chunk):
            ids, mask = pad_batch([ex.token_ids for ex in examples[s: s + chunk]])
            p = T.softmax(logit_fn(ids, mask)).data
            probs.append(p)
            preds.append(p.argmax(axis=-1))
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 0))
    return np.concatenate(preds), np.concatenate(probs)


def accuracy(logit_fn, examples: Sequence[LabeledExample]) -> float | None:
    if not examples:
        return None
    preds, _ = predict(logit_fn, examples)
    return float(np.mean(preds == np.array([ex.label for ex in examples])))


@dataclass
class SiftConfig:
    eps: float = 1e-3
    ascent_steps: int = 1
    adv_weight: float = 1.0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.eps < 0:
            raise ContractError("eps must be >= 0")
        if self.ascent_steps < 1:
            raise ContractError("ascent_steps must be >= 1")


@dataclass
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    num_classes: int = 2
    eval_interval: int = 50
    seed: int = 0
    sift: SiftConfig | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ContractError("steps >= 0, batch_size >= 1 and eval_interval >= 1 required")


def _train_loop(params: list[Tensor], examples: Sequence[LabeledExample], labels: np.ndarray,
                steps: int, batch_size: int, lr: float, warmup_frac: float, weight_decay: float,
                clip_norm: float, seed: int, eval_interval: int, phase: str,
                loss_fn: Callable[[np.ndarray, np.ndarray, np.ndarray, int], Tensor],
                eval_fn: Callable[[int, float], dict], metrics: MetricsLog) -> None:
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    step, epoch, running = 0, 0, []
    while step < steps:
        for b in batch(examples, batch_size, seed, epoch):
            opt.zero_grad()
            loss = loss_fn(b.ids, b.mask, labels[b.indices], step)
            running.append(check_finite(loss, step, phase))
            loss.backward()
            fill_missing_grads(params)
            clip_grad_norm(params, clip_norm)
            opt.step(warmup_lr(step, steps, lr, warmup_frac))
            step += 1
            if step % eval_interval == 0 or step == steps:
                metrics.emit(eval_fn(step, float(np.mean(running))))
                running = []
            if step >= steps:
                break
        epoch += 1


# ---------------------------------------------------------------------------
# full fine-tuning and SiFT


def sift_perturbation(model: Classifier, x_hat: np.ndarray, mask: np.ndarray, clean_logits: np.ndarray,
                      config: SiftConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-position perturbation with L2 norm <= eps that increases symmetric KL.

    Starts from a random direction of norm ``init_scale * eps`` and takes
    ``ascent_steps`` normalized-gradient steps of length ``eps``, each
    followed by projection onto the eps-ball.
    """
    if config.eps == 0.0:
        return np.zeros_like(x_hat)
    delta = rng.standard_normal(x_hat.shape)
    delta *= config.init_scale * config.eps / np.linalg.norm(delta, axis=-1, keepdims=True)
    clean = Tensor(clean_logits)
    with model.encoder.frozen():
        head_prev = [p.requires_grad for p in model.head.parameters()]
        for p in model.head.parameters():
            p.requires_grad = False
        try:
            for _ in range(config.ascent_steps):
                d = Tensor(delta, requires_grad=True)
                pert = class_logits(model.encoder, model.head, None, mask, inputs_embeds=Tensor(x_hat) + d)
                symmetric_kl(clean, pert).backward()
                g = d.grad
                gnorm = np.linalg.norm(g, axis=-1, keepdims=True)
                delta = delta + config.eps * np.divide(g, gnorm, out=np.zeros_like(g), where=gnorm > 0)
                delta = project_ball(delta, config.eps)
        finally:
            for p, r in zip(model.head.parameters(), head_prev):
                p.requires_grad = r
    return delta


def project_ball(delta: np.ndarray, eps: float) -> np.ndarray:
    norms = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.minimum(1.0, eps / np.maximum(norms, 1e-300))
    return delta * scale


def sift_loss(model: Classifier, ids: np.ndarray, mask: np.ndarray, labels: np.ndarray,
              config: SiftConfig, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """``CE(clean, y) + adv_weight * symKL(clean, perturbed)`` on normalized embeddings.

    Returns the loss and the perturbation used; the perturbation is a
    constant as far as parameter gradients are concerned.
    """
    x_hat = normalized_embeddings(model.encoder, ids)
    clean = class_logits(model.encoder, model.head, ids, mask, inputs_embeds=x_hat)
    delta = sift_perturbation(model, x_hat.data, mask, clean.data, config, rng)
    pert = class_logits(model.encoder, model.head, ids, mask, inputs_embeds=x_hat + Tensor(delta))
    loss = classification_ce(clean, labels) + symmetric_kl(clean, pert) * config.adv_weight
    return loss, delta


def finetune_classifier(model: Encoder | Classifier, train: Sequence[LabeledExample],
                        config: FinetuneConfig, dev: Sequence[LabeledExample] | None = None,
                        sink: Callable[[dict], None] | None = None) -> tuple[Classifier, list[dict]]:
    """Full-parameter fine-tuning of a CLS classifier; the input model is not modified.

    Passing an ``Encoder`` starts a fresh head; passing a ``Classifier``
    continues from it.
    """
    labels = _labels(train, config.num_classes)
    if isinstance(model, Encoder):
        clf = Classifier(model.clone(), ClassifierHead.init(model.config.hidden_size,
                                                            config.num_classes, config.seed),
                         normalize_embeddings=config.sift is not None)
    else:
        if model.head.num_classes != config.num_classes:
            raise ConfigError("classifier head size does not match num_classes")
        clf = model.clone()
    metrics = MetricsLog(sink)
    if config.steps == 0 or not train:
        return clf, metrics.records
    sift_rng = np.random.default_rng([config.seed, 51])

    def loss_fn(ids, mask, y, step):
        if config.sift is not None:
            return sift_loss(clf, ids, mask, y, config.sift, sift_rng)[0]
        return classification_ce(clf.logits(ids, mask), y)

    def eval_fn(step, loss):
        return {"step": step, "loss": loss, "train_acc": accuracy(clf.logits, train),
                "dev_acc": accuracy(clf.logits, dev or []), "phase": "finetune"}

    _train_loop(clf.parameters(), train, labels, config.steps, config.batch_size, config.lr,
                config.warmup_frac, config.weight_decay, config.clip_norm, config.seed,
                config.eval_interval, "finetune", loss_fn, eval_fn, metrics)
    return clf, metrics.records


# ---------------------------------------------------------------------------
# prompt tuning and KD-based transfer


@dataclass
class PromptConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-2
    warmup_frac: float = 0.05
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    prompt_len: int = 8
    num_classes: int = 2
    eval_interval: int = 50
    seed: int = 0
    task_name: str = "task"
    # with a frozen head the prompt alone must carry the task, which makes
    # prompt similarity track task similarity
    train_head: bool = True

    def __post_init__(self):
        if self.prompt_len < 1:
            raise ContractError("prompt_len must be >= 1")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ContractError("steps >= 0, batch_size >= 1 and eval_interval >= 1 required")


def new_prompt_model(encoder: Encoder, config: PromptConfig) -> PromptModel:
    d = encoder.config.hidden_size
    return PromptModel(SoftPrompt.random(config.prompt_len, d, config.seed, config.task_name),
                       ClassifierHead.init(d, config.num_classes, config.seed))


def prompt_tune(encoder: Encoder, prompt: SoftPrompt | None, train: Sequence[LabeledExample],
                config: PromptConfig, dev: Sequence[LabeledExample] | None = None,
                sink: Callable[[dict], None] | None = None) -> tuple[PromptModel, list[dict]]:
    """Train only a soft prompt and a class head on top of a frozen encoder."""
    labels = _labels(train, config.num_classes)
    pm = new_prompt_model(encoder, config)
    if prompt is not None:
        pm.prompt = prompt.clone()
    metrics = MetricsLog(sink)
    before = encoder.checksum()
    with encoder.frozen():
        logit_fn = lambda ids, mask: pm.logits(encoder, ids, mask)  # noqa: E731

        def loss_fn(ids, mask, y, step):
            return classification_ce(logit_fn(ids, mask), y)

        def eval_fn(step, loss):
            return {"step": step, "loss": loss, "train_acc": accuracy(logit_fn, train),
                    "dev_acc": accuracy(logit_fn, dev or []), "phase": "prompt"}

        if config.steps and train:
            _train_loop(pm.trainable(config.train_head), train, labels, config.steps, config.batch_size, config.lr,
                        config.warmup_frac, config.weight_decay, config.clip_norm, config.seed,
                        config.eval_interval, "prompt", loss_fn, eval_fn, metrics)
    if encoder.checksum() != before:
        raise RuntimeError("prompt_tune modified the frozen backbone")
    return pm, metrics.records


@dataclass
class TransferConfig(PromptConfig):
    temperature: float = 2.0
    lambda_mode: str = "dynamic"
    lambda_override: float | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.lambda_mode not in ("dynamic", "static"):
            raise ContractError("lambda_mode must be 'dynamic' or 'static'")
        if self.lambda_override is not None and not 0.0 <= self.lambda_override <= 1.0:
            raise ContractError("lambda_override must be in [0, 1]")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")

    def prompt_config(self) -> PromptConfig:
        fields = {k: v for k, v in asdict(self).items()
                  if k not in ("temperature", "lambda_mode", "lambda_override")}
        return PromptConfig(**fields)


@dataclass
class TransferResult:
    model: PromptModel
    metrics: list[dict]
    similarity: float
    lam: float
    lambda_trace: list[float] = field(default_factory=list)


def kd_prompt_transfer(encoder: Encoder, teacher: PromptModel, target_train: Sequence[LabeledExample],
                       config: TransferConfig, dev: Sequence[LabeledExample] | None = None,
                       reference_prompt: SoftPrompt | None = None,
                       sink: Callable[[dict], None] | None = None) -> TransferResult:
    """Distil a frozen encoder + source prompt (teacher) into a fresh student prompt.

    The balancing factor is the transferability score between the source
    prompt and, in ``dynamic`` mode, the live student prompt (refreshed at
    every evaluation interval), or in ``static`` mode a ``reference_prompt``
    tuned from scratch on the target (computed here when not given).
    ``lambda_override`` pins the factor.
    """
    if teacher.head.num_classes != config.num_classes:
        raise ConfigError(f"teacher head has {teacher.head.num_classes} classes, "
                          f"target task has {config.num_classes}")
    labels = _labels(target_train, config.num_classes)
    student = new_prompt_model(encoder, config)
    source_emb = task_embedding(teacher.prompt)
    backbone_before = encoder.checksum()
    teacher_before = teacher.prompt.vectors.data.copy()

    def current_similarity() -> float:
        return prompt_similarity(source_emb, task_embedding(student.prompt))

    if config.lambda_override is not None:
        lam = float(config.lambda_override)
    elif config.lambda_mode == "static":
        if reference_prompt is None:
            reference_prompt = prompt_tune(encoder, None, target_train, config.prompt_config())[0].prompt
        lam = prompt_similarity(source_emb, task_embedding(reference_prompt))
    else:
        lam = current_similarity()
    state = {"lam": lam}
    trace = [lam]
    metrics = MetricsLog(sink)

    with encoder.frozen():
        student_fn = lambda ids, mask: student.logits(encoder, ids, mask)  # noqa: E731

        def loss_fn(ids, mask, y, step):
            with T.no_grad():
                teacher_logits = teacher.logits(encoder, ids, mask).data
            return kd_loss(student_fn(ids, mask), teacher_logits, y, state["lam"], config.temperature)

        def eval_fn(step, loss):
            if config.lambda_override is None and config.lambda_mode == "dynamic":
                state["lam"] = current_similarity()
                trace.append(state["lam"])
            return {"step": step, "loss": loss, "train_acc": accuracy(student_fn, target_train),
                    "dev_acc": accuracy(student_fn, dev or []), "lambda": state["lam"],
                    "phase": "transfer"}

        if config.steps and target_train:
            _train_loop(student.trainable(config.train_head), target_train, labels, config.steps, config.batch_size,
                        config.lr, config.warmup_frac, config.weight_decay, config.clip_norm,
                        config.seed, config.eval_interval, "transfer", loss_fn, eval_fn, metrics)
    if encoder.checksum() != backbone_before or not np.array_equal(teacher.prompt.vectors.data,
                                                                  teacher_before):
        raise RuntimeError("kd_prompt_transfer modified frozen parameters")
    return TransferResult(student, metrics.records, current_similarity(), state["lam"], trace)


# ---------------------------------------------------------------------------
# transductive fine-tuning


@dataclass
class TransductiveConfig:
    t_max: int = 5
    agreement_threshold: float = 0.99
    confidence_threshold: float | None = None
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def __post_init__(self):
        if self.t_max < 0:
            raise ContractError("t_max must be >= 0")
        if not 0.0 <= self.agreement_threshold <= 1.0:
            raise ContractError("agreement_threshold must be in [0, 1]")


@dataclass
class TransductiveState:
    t: int
    seed_examples: Sequence[LabeledExample]
    pseudo_labeled: list[LabeledExample]
    agreement: float


def pseudo_label(model: Classifier, unlabeled: Sequence[LabeledExample],
                 confidence_threshold: float | None = None) -> tuple[list[LabeledExample], np.ndarray]:
    """Hard argmax labels for ``unlabeled``; returns the relabeled examples and all predictions."""
    preds, probs = predict(model.logits, unlabeled)
    out = []
    for ex, y, p in zip(unlabeled, preds, probs):
        if confidence_threshold is not None and p.max() < confidence_threshold:
            continue
        out.append(LabeledExample(ex.token_ids, int(y), ex.text))
    return out, preds


def transductive_finetune(model: Encoder | Classifier, seed_examples: Sequence[LabeledExample],
                          unlabeled: Sequence[LabeledExample], config: TransductiveConfig,
                          sink: Callable[[dict], None] | None = None
                          ) -> tuple[Classifier, list[TransductiveState]]:
    """Alternate pseudo-labeling the target inputs and tuning on seed + pseudo-labels.

    Each iteration labels ``unlabeled`` with the current model, tunes on the
    union and increments ``t``; it stops once the labels agree with the
    previous iteration's on at least ``agreement_threshold`` of the inputs,
    or when ``t == t_max``. An ``Encoder`` input is first fine-tuned on the
    seed examples.
    """
    if not unlabeled:
        raise ContractError("transductive fine-tuning needs unlabeled target inputs")
    ft = config.finetune
    if isinstance(model, Encoder):
        model = finetune_classifier(model, seed_examples, ft, sink=sink)[0]
    states: list[TransductiveState] = []
    prev: np.ndarray | None = None
    t = 0
    while t < config.t_max:
        d_m, preds = pseudo_label(model, unlabeled, config.confidence_threshold)
        agreement = 0.0 if prev is None else float(np.mean(preds == prev))
        model, _ = finetune_classifier(model, list(seed_examples) + d_m,
                                       replace(ft, seed=ft.seed + t + 1), sink=sink)
        t += 1
        states.append(TransductiveState(t, seed_examples, d_m, agreement))
        log.info("transductive iteration %d: agreement %.4f", t, agreement)
        if prev is not None and agreement >= config.agreement_threshold:
            break
        prev = preds
    return model, states
