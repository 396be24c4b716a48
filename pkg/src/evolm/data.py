"""Vocabulary, corpora, synthetic task generation and batching."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DataError, EmptyCorpusError

PAD, UNK, MASK, CLS = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[MASK]", "[CLS]")
NUM_SPECIAL = len(SPECIAL_TOKENS)


class Vocabulary:
    """Whitespace-token vocabulary with four fixed special ids."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def encode(self, text: str) -> list[int]:
        # MASK can never come out of raw text: "[mask]" is not a vocabulary entry
        out = []
        for tok in text.lower().split():
            i = self.token_to_id.get(tok, UNK)
            out.append(UNK if i < NUM_SPECIAL else i)
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids if i not in (PAD, CLS))

    def to_json(self) -> dict[str, int]:
        return dict(self.token_to_id)

    @classmethod
    def from_json(cls, mapping: dict[str, int]) -> "Vocabulary":
        ordered = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(ordered))):
            raise DataError("vocabulary ids must be contiguous from 0")
        if tuple(t for t, _ in ordered[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError("vocabulary special tokens are missing or misplaced")
        return cls([t for t, _ in ordered[NUM_SPECIAL:]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=0, ensure_ascii=False) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(lines: Iterable[str], max_vocab: int) -> Vocabulary:
    """Keep the ``max_vocab - 4`` most frequent lowercased tokens.

    Frequency ties are broken lexicographically.
    """
    if max_vocab < NUM_SPECIAL + 1:
        raise ContractError(f"max_vocab must be >= {NUM_SPECIAL + 1}, got {max_vocab}")
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(line.lower().split())
    for special in SPECIAL_TOKENS:
        counts.pop(special.lower(), None)
    if not counts:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[: max_vocab - NUM_SPECIAL]])


@dataclass(frozen=True)
class Sample:
    """One pretraining sequence; ``token_ids[0]`` is always CLS.

    ``slot_pos`` marks the knowledge-slot position for synthetic factual
    samples and is ``None`` for plain text.
    """

    token_ids: tuple[int, ...]
    source_line: int
    slot_pos: int | None = None

    def __post_init__(self):
        if len(self.token_ids) < 1:
            raise DataError("empty sample")
        if PAD in self.token_ids or MASK in self.token_ids:
            raise DataError(f"sample {self.source_line} contains PAD or MASK ids")


@dataclass(frozen=True)
class LabeledExample:
    token_ids: tuple[int, ...]
    label: int
    text: str = ""

    def __post_init__(self):
        if len(self.token_ids) < 1:
            raise DataError("empty example")
        if PAD in self.token_ids or MASK in self.token_ids:
            raise DataError("labeled example contains PAD or MASK ids")
        if self.label < 0:
            raise DataError(f"negative label {self.label}")


def samples_from_lines(lines: Iterable[str], vocab: Vocabulary, max_seq_len: int,
                       slots: dict[int, int] | None = None) -> list[Sample]:
    """Encode text lines as CLS-prefixed samples, truncating to ``max_seq_len``.

    ``slots`` maps a line number to the whitespace-token index of its
    knowledge slot.
    """
    out = []
    for lineno, line in enumerate(lines):
        ids = vocab.encode(line)
        if not ids:
            continue
        ids = [CLS] + ids[: max_seq_len - 1]
        slot = None
        if slots is not None and lineno in slots and slots[lineno] + 1 < len(ids):
            slot = slots[lineno] + 1
        out.append(Sample(tuple(ids), lineno, slot))
    if not out:
        raise EmptyCorpusError("corpus has no non-empty lines")
    return out


def read_lines(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def read_labeled_jsonl(path: str | Path, vocab: Vocabulary, max_seq_len: int) -> list[LabeledExample]:
    out = []
    for lineno, line in enumerate(read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            text, label = obj["text"], obj["label"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed labeled example ({exc})") from exc
        if not isinstance(label, int) or isinstance(label, bool):
            raise DataError(f"{path}:{lineno}: label must be an integer")
        ids = vocab.encode(text)
        if not ids:
            raise DataError(f"{path}:{lineno}: empty text")
        out.append(LabeledExample(tuple([CLS] + ids[: max_seq_len - 1]), label, text))
    return out


def write_labeled_jsonl(path: str | Path, examples: Iterable[LabeledExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"text": ex.text, "label": ex.label}) + "\n")


# ---------------------------------------------------------------------------
# synthetic factual corpus

_FILLERS = ("the", "it", "is", "said", "that", "was", "known", "as", "well", "and",
            "often", "people", "say", "in", "fact", "indeed", "records", "show")


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_templates: int = 4
    num_entities: int = 40
    num_relations: int = 4
    samples: int = 1000
    seed: int = 0
    values_per_relation: int = 8

    def __post_init__(self):
        for name in ("num_templates", "num_entities", "num_relations", "samples",
                     "values_per_relation"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


@dataclass(frozen=True)
class FactualCorpus:
    lines: list[str]
    slots: dict[int, int]
    facts: dict[tuple[int, int], int] = field(repr=False)


def _templates(spec: SyntheticCorpusSpec) -> list[list[str]]:
    rng = np.random.default_rng([spec.seed, 101])
    out = [["ENT", "REL", "ATTR"]]
    while len(out) < spec.num_templates:
        def words(lo, hi):
            return [str(w) for w in rng.choice(_FILLERS, size=rng.integers(lo, hi + 1))]
        out.append(words(1, 3) + ["ENT"] + words(0, 2) + ["REL", "ATTR"] + words(0, 2))
    return out


def generate_factual_text(spec: SyntheticCorpusSpec) -> FactualCorpus:
    """Templated entity-relation-attribute sentences.

    The attribute token depends only on the (entity, relation) pair; local
    context reveals which relation's value set it belongs to, never which
    member.
    """
    templates = _templates(spec)
    fact_rng = np.random.default_rng([spec.seed, 202])
    n_values = spec.values_per_relation
    facts = {(e, r): int(fact_rng.integers(n_values))
             for e in range(spec.num_entities) for r in range(spec.num_relations)}
    rng = np.random.default_rng([spec.seed, 303])
    lines, slots = [], {}
    for i in range(spec.samples):
        t = int(rng.integers(len(templates)))
        e = int(rng.integers(spec.num_entities))
        r = int(rng.integers(spec.num_relations))
        toks = []
        for w in templates[t]:
            if w == "ENT":
                toks.append(f"ent{e}")
            elif w == "REL":
                toks.append(f"rel{r}")
            elif w == "ATTR":
                slots[i] = len(toks)
                toks.append(f"r{r}v{facts[e, r]}")
            else:
                toks.append(w)
        lines.append(" ".join(toks))
    return FactualCorpus(lines, slots, facts)


def factual_vocabulary(spec: SyntheticCorpusSpec) -> Vocabulary:
    """Every token the factual generator can emit, in a fixed order."""
    tokens = sorted(set(_FILLERS))
    tokens += [f"ent{e}" for e in range(spec.num_entities)]
    tokens += [f"rel{r}" for r in range(spec.num_relations)]
    tokens += [f"r{r}v{v}" for r in range(spec.num_relations)
               for v in range(spec.values_per_relation)]
    return Vocabulary(tokens)


def generate_factual_corpus(spec: SyntheticCorpusSpec, vocab: Vocabulary | None = None,
                            max_seq_len: int = 64) -> list[Sample]:
    text = generate_factual_text(spec)
    vocab = vocab or factual_vocabulary(spec)
    return samples_from_lines(text.lines, vocab, max_seq_len, text.slots)


# ---------------------------------------------------------------------------
# synthetic classification task pairs


def task_vocabulary(num_words: int = 32) -> Vocabulary:
    return Vocabulary([f"w{i}" for i in range(num_words)])


def generate_task_pair(seed: int, relatedness: float, *, n_source: int = 400,
                       n_target: int = 400, num_words: int = 32, seq_len: int = 8,
                       covariate_shift: float = 0.0
                       ) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Two binary bag-of-words tasks whose label rules overlap by ``relatedness``.

    Source label: ``sum(w_s[tok]) > 0``. Target weights are
    ``rho * w_s + sqrt(1 - rho^2) * w_perp`` with ``w_perp`` orthogonal to
    ``w_s``, so rho=1 reuses the rule and rho=0 makes it uncorrelated.
    ``covariate_shift`` tilts the target's token frequencies away from the
    source's uniform distribution.
    """
    if not 0.0 <= relatedness <= 1.0:
        raise ContractError(f"relatedness must be in [0, 1], got {relatedness}")
    rng = np.random.default_rng([seed, 404])
    # both rules are orthogonal to the all-ones direction: token counts have a
    # nonzero mean, and a shared mean component would correlate the labels
    ones = np.full(num_words, 1.0 / math.sqrt(num_words))
    w_s = rng.standard_normal(num_words)
    w_s -= (w_s @ ones) * ones
    w_s /= np.linalg.norm(w_s)
    w_perp = rng.standard_normal(num_words)
    w_perp -= (w_perp @ ones) * ones + (w_perp @ w_s) * w_s
    w_perp /= np.linalg.norm(w_perp)
    w_t = relatedness * w_s + math.sqrt(max(0.0, 1.0 - relatedness**2)) * w_perp

    tilt = np.exp(covariate_shift * rng.standard_normal(num_words))
    p_source = np.full(num_words, 1.0 / num_words)
    p_target = tilt / tilt.sum()

    def draw(n, weights, probs, stream):
        r = np.random.default_rng([seed, stream])
        out = []
        for _ in range(n):
            toks = r.choice(num_words, size=seq_len, p=probs)
            label = int(weights[toks].sum() > 0)
            text = " ".join(f"w{t}" for t in toks)
            out.append(LabeledExample(tuple([CLS] + [NUM_SPECIAL + int(t) for t in toks]),
                                      label, text))
        return out

    return draw(n_source, w_s, p_source, 505), draw(n_target, w_t, p_target, 606)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: np.ndarray        # (B, L) int64, PAD-filled
    mask: np.ndarray       # (B, L) 1 for real tokens
    indices: np.ndarray    # positions of the rows in the source list


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1
    return ids, mask


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch(samples: Sequence, batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    """Shuffled, padded batches; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = batch_order(len(samples), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start: start + batch_size]
        ids, mask = pad_batch([samples[i].token_ids for i in idx])
        yield Batch(ids, mask, idx)
