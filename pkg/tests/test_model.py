import numpy as np
import pytest
from hypothesis import given, strategies as st

from evolm import tensor as T
from evolm.errors import ConfigError, DimensionError, VocabularyError
from evolm.model import (Encoder, ModelConfig, disentangled_attention, init_parameters, parameter_shapes,
                         relative_bucket, relative_buckets)
from evolm.pretrain import MaskPlan, mlm_loss

from oracles import numeric_grad, rel_error

SMALL = dict(layers=2, hidden_size=8, ffn_size=16, heads=2, head_size=4, vocab_size=12,
             max_seq_len=8, max_relative_distance=2)


def small_encoder(seed=0, **kw):
    enc = init_parameters(ModelConfig(**{**SMALL, "seed": seed, **kw}))
    # larger weights than the 0.02 init so every term is exercised
    rng = np.random.default_rng(seed + 1)
    for p in enc.parameters():
        p.data += 0.3 * rng.standard_normal(p.shape)
    return enc


def full_model_gradient_error() -> float:
    """Relative error of the 2-layer MLM loss gradient against finite differences."""
    enc = small_encoder()
    ids = np.array([[3, 5, 6, 7, 2, 9], [3, 8, 2, 10, 11, 0]])
    mask = np.array([[1, 1, 1, 1, 1, 1], [1, 1, 1, 1, 1, 0]])
    plans = [MaskPlan(np.array([4]), np.array([0]), np.array([8]), np.array([2])),
             MaskPlan(np.array([2]), np.array([0]), np.array([4]), np.array([2]))]
    names = list(enc.params)

    def loss_of(*arrays):
        e = Encoder(enc.config, {n: T.Tensor(a) for n, a in zip(names, arrays)})
        with T.no_grad():
            return mlm_loss(e.forward_mlm(ids, mask), plans).item()

    for p in enc.parameters():
        p.grad = None
    T.backward(mlm_loss(enc.forward_mlm(ids, mask), plans))
    numeric = numeric_grad(loss_of, [p.data.copy() for p in enc.parameters()])
    analytic = np.concatenate([(p.grad if p.grad is not None else np.zeros(p.shape)).ravel()
                               for p in enc.parameters()])
    return rel_error(analytic, np.concatenate([g.ravel() for g in numeric]))


def test_full_model_gradient_matches_finite_differences():
    assert full_model_gradient_error() < 1e-4


def test_tiny_parameter_count_matches_shapes():
    cfg = ModelConfig(vocab_size=120)
    d, f, V, k = 64, 256, 120, 8
    per_layer = 4 * d + 4 * (d * d + d) + 2 * d * d + (d * f + f) + (f * d + d)
    expected = V * d + (2 * k + 1) * d + 2 * d + 2 * per_layer + 2 * d + V
    assert init_parameters(cfg).num_parameters() == expected == 125_496
    assert sum(int(np.prod(s)) for _, s in parameter_shapes(cfg)) == expected


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(heads=3, head_size=16)
    with pytest.raises(ConfigError):
        ModelConfig(layers=0)
    big = ModelConfig.full_scale()
    assert (big.layers, big.hidden_size, big.ffn_size, big.heads, big.head_size) == (24, 4096, 16384, 32, 128)


def test_init_is_deterministic_per_seed():
    a, b, c = (init_parameters(ModelConfig(**SMALL, seed=s)) for s in (1, 1, 2))
    assert a.checksum() == b.checksum() != c.checksum()


def test_mlm_head_is_tied_to_token_embedding():
    enc = small_encoder()
    h = T.Tensor(np.random.default_rng(0).standard_normal((1, 2, 8)))
    expected = h.data @ enc.params["tok_emb"].data.T + enc.params["mlm.b"].data
    np.testing.assert_allclose(enc.mlm_logits(h).data, expected)


def test_out_of_range_ids_and_long_sequences_rejected():
    enc = small_encoder()
    with pytest.raises(VocabularyError):
        enc.forward_mlm(np.array([3, 12]))
    with pytest.raises(DimensionError):
        enc.forward_mlm(np.full(9, 5))


def test_padding_does_not_change_real_positions():
    enc = small_encoder()
    ids = np.array([3, 5, 6, 7])
    alone = enc.forward_mlm(ids).data
    padded = enc.forward_mlm(np.array([[3, 5, 6, 7, 0, 0]]), np.array([[1, 1, 1, 1, 0, 0]])).data[0, :4]
    np.testing.assert_allclose(padded, alone, atol=1e-10)


def _attention_inputs(seed, B=2, L=5, heads=2, hs=4, k=2):
    rng = np.random.default_rng(seed)
    d = heads * hs
    w = {n: T.Tensor(rng.standard_normal(s)) for n, s in
         [("q.w", (d, d)), ("q.b", (d,)), ("k.w", (d, d)), ("k.b", (d,)), ("v.w", (d, d)), ("v.b", (d,)),
          ("pos_q.w", (d, d)), ("pos_k.w", (d, d)), ("o.w", (d, d)), ("o.b", (d,))]}
    h = T.Tensor(rng.standard_normal((B, L, d)))
    rel = T.Tensor(rng.standard_normal((2 * k + 1, d)))
    mask = np.ones((B, L), dtype=np.int64)
    mask[1, 3:] = 0
    return h, rel, w, mask, heads, hs, k


@pytest.mark.parametrize("seed", range(5))
def test_attention_rows_sum_to_one(seed):
    h, rel, w, mask, heads, hs, k = _attention_inputs(seed)
    _, probs = disentangled_attention(h, rel, w, mask, heads, hs, k, return_probs=True)
    np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-9)
    assert np.all(probs.data[1, :, :, 3:] == 0)


def test_zero_position_terms_reduce_to_scaled_standard_attention():
    h, rel, w, mask, heads, hs, k = _attention_inputs(3)
    w["pos_q.w"] = T.Tensor(np.zeros_like(w["pos_q.w"].data))
    w["pos_k.w"] = T.Tensor(np.zeros_like(w["pos_k.w"].data))
    out, probs = disentangled_attention(h, rel, w, mask, heads, hs, k, return_probs=True)
    B, L, d = h.shape
    x = h.data
    q = (x @ w["q.w"].data + w["q.b"].data).reshape(B, L, heads, hs).transpose(0, 2, 1, 3)
    kk = (x @ w["k.w"].data + w["k.b"].data).reshape(B, L, heads, hs).transpose(0, 2, 1, 3)
    v = (x @ w["v.w"].data + w["v.b"].data).reshape(B, L, heads, hs).transpose(0, 2, 1, 3)
    s = q @ kk.transpose(0, 1, 3, 2) / np.sqrt(3 * hs)
    s = np.where(mask[:, None, None, :] == 0, -np.inf, s)
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    ref = (p @ v).transpose(0, 2, 1, 3).reshape(B, L, d) @ w["o.w"].data + w["o.b"].data
    np.testing.assert_allclose(probs.data, p, atol=1e-12)
    np.testing.assert_allclose(out.data, ref, atol=1e-10)


@given(st.integers(0, 60), st.integers(0, 60), st.integers(-100, 100), st.integers(1, 16))
def test_relative_bucket_shift_invariant(i, j, s, k):
    b = relative_bucket(i, j, k)
    assert b == relative_bucket(i + s, j + s, k)
    assert 0 <= b <= 2 * k


def test_relative_bucket_values():
    assert relative_bucket(0, 0, 3) == 3
    assert relative_bucket(10, 0, 3) == 6
    assert relative_bucket(0, 10, 3) == 0
    table = relative_buckets(5, 2)
    assert table[4, 0] == 4 and table[0, 4] == 0 and table[2, 1] == 3
    assert not table.flags.writeable


def test_prefix_prepends_positions():
    enc = small_encoder()
    prefix = T.Tensor(np.random.default_rng(0).standard_normal((2, 8)))
    out = enc.encode(np.array([[3, 5, 6]]), prefix=prefix)
    assert out.shape == (1, 5, 8)
