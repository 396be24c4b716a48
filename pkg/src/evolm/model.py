"""Pre-LN transformer encoder with disentangled (content/position) attention."""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, VocabularyError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden_size: int = 64
    ffn_size: int = 256
    heads: int = 4
    head_size: int = 16
    vocab_size: int = 256
    max_seq_len: int = 64
    max_relative_distance: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "hidden_size", "ffn_size", "heads", "head_size",
                     "vocab_size", "max_seq_len", "max_relative_distance"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.heads * self.head_size != self.hidden_size:
            raise ConfigError(
                f"heads * head_size ({self.heads} * {self.head_size}) != hidden_size ({self.hidden_size})")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """The 6B-scale layout (24 x 4096, FFN 16384, 32 x 128 heads).

        Vocabulary, sequence length and relative distance are placeholders.
        Only for validation: never instantiate weights from it.
        """
        base = dict(layers=24, hidden_size=4096, ffn_size=16384, heads=32, head_size=128,
                    vocab_size=128_000, max_seq_len=512, max_relative_distance=256)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def relative_bucket(i, j, k: int):
    """Clip the signed distance ``i - j`` to ``[-k, k]`` and shift to ``[0, 2k]``."""
    return np.clip(np.asarray(i) - np.asarray(j), -k, k) + k


@lru_cache(maxsize=64)
def relative_buckets(seq_len: int, k: int) -> np.ndarray:
    pos = np.arange(seq_len)
    out = relative_bucket(pos[:, None], pos[None, :], k)
    out.setflags(write=False)
    return out


def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.hidden_size, cfg.ffn_size
    return [
        ("ln1.g", (d,)), ("ln1.b", (d,)),
        ("q.w", (d, d)), ("q.b", (d,)),
        ("k.w", (d, d)), ("k.b", (d,)),
        ("v.w", (d, d)), ("v.b", (d,)),
        ("pos_q.w", (d, d)), ("pos_k.w", (d, d)),
        ("o.w", (d, d)), ("o.b", (d,)),
        ("ln2.g", (d,)), ("ln2.b", (d,)),
        ("ffn1.w", (d, f)), ("ffn1.b", (f,)),
        ("ffn2.w", (f, d)), ("ffn2.b", (d,)),
    ]


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every parameter, in initialization order."""
    d = cfg.hidden_size
    shapes = [
        ("tok_emb", (cfg.vocab_size, d)),
        ("rel_emb", (2 * cfg.max_relative_distance + 1, d)),
        ("emb_ln.g", (d,)), ("emb_ln.b", (d,)),
    ]
    for layer in range(cfg.layers):
        shapes += [(f"layer{layer}.{n}", s) for n, s in _layer_shapes(cfg)]
    shapes += [("final_ln.g", (d,)), ("final_ln.b", (d,)), ("mlm.b", (cfg.vocab_size,))]
    return shapes


def disentangled_attention(h: Tensor, rel: Tensor, w: dict[str, Tensor], attention_mask: np.ndarray,
                           heads: int, head_size: int, k: int, return_probs: bool = False):
    """Multi-head attention whose scores sum content and relative-position terms.

    For each head, ``score(i, j) = Qc_i.Kc_j + Qc_i.Kp[b(i,j)] + Kc_j.Qp[b(j,i)]``
    scaled by ``1/sqrt(3 * head_size)``, where ``b`` is :func:`relative_bucket`.
    Keys with ``attention_mask == 0`` are excluded from the softmax.
    """
    B, L, d = h.shape
    if d != heads * head_size or rel.shape != (2 * k + 1, d):
        raise DimensionError(f"attention shapes inconsistent: h {h.shape}, rel {rel.shape}")
    if attention_mask.shape != (B, L):
        raise DimensionError(f"attention mask {attention_mask.shape} does not match {(B, L)}")

    def split(x):  # (B, L, d) -> (B, H, L, hs)
        return x.reshape(B, L, heads, head_size).transpose(0, 2, 1, 3)

    def split_rel(x):  # (R, d) -> (H, R, hs)
        return x.reshape(2 * k + 1, heads, head_size).transpose(1, 0, 2)

    qc = split(h @ w["q.w"] + w["q.b"])
    kc = split(h @ w["k.w"] + w["k.b"])
    vc = split(h @ w["v.w"] + w["v.b"])
    qp = split_rel(rel @ w["pos_q.w"])
    kp = split_rel(rel @ w["pos_k.w"])

    buckets = relative_buckets(L, k)
    c2c = qc @ T.swapaxes(kc)
    c2p = T.gather_last(qc @ T.swapaxes(kp), buckets)
    p2c = T.swapaxes(T.gather_last(kc @ T.swapaxes(qp), buckets))
    scores = (c2c + c2p + p2c) * (1.0 / np.sqrt(3.0 * head_size))
    scores = T.masked_fill(scores, (attention_mask == 0)[:, None, None, :])
    probs = T.softmax(scores)
    ctx = (probs @ vc).transpose(0, 2, 1, 3).reshape(B, L, d)
    out = ctx @ w["o.w"] + w["o.b"]
    return (out, probs) if return_probs else out


class Encoder:
    """Parameters plus a pure forward pass.

    The MLM output projection is ``tok_emb`` transposed (the same Tensor
    object), followed by a vocabulary bias.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if [n for n, _ in expected] != list(params):
            raise ConfigError("parameter names do not match the model config")
        for name, shape in expected:
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    @property
    def token_embedding(self) -> Tensor:
        return self.params["tok_emb"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layer{i}."
        return {n[len(prefix):]: p for n, p in self.params.items() if n.startswith(prefix)}

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.params.items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def clone(self) -> "Encoder":
        return Encoder(self.config, {n: T.Tensor(p.data, requires_grad=p.requires_grad)
                                     for n, p in self.params.items()})

    @contextmanager
    def frozen(self):
        """Temporarily stop recording gradients for every backbone parameter."""
        prev = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, r in zip(self.params.values(), prev):
                p.requires_grad = r

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise VocabularyError(
                f"token id out of range [0, {self.config.vocab_size}): min {ids.min()}, max {ids.max()}")

    def embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        return T.embedding(self.token_embedding, ids)

    def encode(self, ids: np.ndarray | None = None, attention_mask: np.ndarray | None = None, *,
               prefix: Tensor | None = None, inputs_embeds: Tensor | None = None) -> Tensor:
        """Final hidden states ``(B, L', d)``.

        ``prefix`` (shape ``(m, d)``) is prepended to every sequence before
        the embedding layer norm; ``L' = m + L`` and prefix positions are
        always attended.
        """
        cfg = self.config
        x = inputs_embeds if inputs_embeds is not None else self.embed(ids)
        B, L, _ = x.shape
        mask = np.ones((B, L), dtype=np.int64) if attention_mask is None else np.asarray(attention_mask)
        if prefix is not None:
            m = prefix.shape[0]
            x = T.concat([T.broadcast_to(prefix, (B, m, cfg.hidden_size)), x], axis=1)
            mask = np.concatenate([np.ones((B, m), dtype=mask.dtype), mask], axis=1)
        if x.shape[1] > cfg.max_seq_len:
            raise DimensionError(f"sequence length {x.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
        p = self.params
        h = T.layer_norm(x, p["emb_ln.g"], p["emb_ln.b"])
        for i in range(cfg.layers):
            w = self.layer(i)
            h = h + disentangled_attention(T.layer_norm(h, w["ln1.g"], w["ln1.b"]), p["rel_emb"], w, mask,
                                           cfg.heads, cfg.head_size, cfg.max_relative_distance)
            z = T.layer_norm(h, w["ln2.g"], w["ln2.b"])
            h = h + T.gelu(z @ w["ffn1.w"] + w["ffn1.b"]) @ w["ffn2.w"] + w["ffn2.b"]
        return T.layer_norm(h, p["final_ln.g"], p["final_ln.b"])

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        return hidden @ T.transpose(self.token_embedding) + self.params["mlm.b"]

    def forward_mlm(self, ids: np.ndarray, attention_mask: np.ndarray | None = None) -> Tensor:
        """Vocabulary logits; 1-D ``ids`` give ``(L, V)``, 2-D give ``(B, L, V)``."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            mask = None if attention_mask is None else np.asarray(attention_mask)[None]
            return self.mlm_logits(self.encode(ids[None], mask))[0]
        return self.mlm_logits(self.encode(ids, attention_mask))


def init_parameters(config: ModelConfig) -> Encoder:
    """Normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = T.Tensor(data, requires_grad=True)
    return Encoder(config, params)

