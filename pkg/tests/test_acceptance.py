"""One test per acceptance criterion; each prints a single PASS/FAIL line."""
import json
import statistics
import time

import numpy as np

from evolm import tensor as T
from evolm.adaptation import (Classifier, ClassifierHead, FinetuneConfig, PromptConfig, SiftConfig,
                              TransductiveConfig, TransferConfig, classification_ce, kd_loss,
                              kd_prompt_transfer, new_prompt_model, normalized_embeddings, prompt_tune,
                              sift_loss, sift_perturbation, symmetric_kl, transductive_finetune)
from evolm.checkpoint import load_encoder, save_encoder
from evolm.cli import main
from evolm.errors import IntegrityError
from evolm.evolution import rectified_smooth_label, self_question_scan
from evolm.model import disentangled_attention, init_parameters, relative_buckets
from evolm.tensor import Tensor

import experiments as E
from conftest import record
from oracles import brute_force_scan, gradcheck
from test_adaptation import SMALL, separable_task, sift_batch, small_classifier
from test_model import _attention_inputs, full_model_gradient_error
from test_tensor import CASES


def test_criterion_1_autodiff_oracle():
    t0 = time.perf_counter()
    worst = max(gradcheck(op, make(np.random.default_rng(s)), s) for _, op, make in CASES for s in range(10))
    model_err = full_model_gradient_error()
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and model_err < 1e-4 and elapsed < 60
    record(1, "autodiff oracle", ok, f"{len(CASES)} ops x 10 seeds max rel err {worst:.1e}; "
           f"2-layer model {model_err:.1e}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_label_rectification():
    rng = np.random.default_rng(0)
    ok, worst_sum = True, 0.0
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        for _ in range(1000):
            v = int(rng.integers(2, 20))
            y = np.eye(v)[rng.integers(v)]
            r = rng.dirichlet(np.ones(v))
            out = rectified_smooth_label(y, r, alpha)
            worst_sum = max(worst_sum, abs(out.sum() - 1.0))
            ok &= abs(out.sum() - 1.0) <= 1e-9 and bool(np.all(out >= 0))
            ok &= out[y.argmax()] >= 1 - alpha
            if alpha == 0.0:
                ok &= np.array_equal(out, y)
            if alpha == 1.0:
                ok &= np.array_equal(out, r)
    record(2, "label rectification", bool(ok), f"5 alphas x 1000 pairs, max |sum-1| {worst_sum:.1e}")
    assert ok


def test_criterion_3_scan_oracle_equivalence():
    t0 = time.perf_counter()
    corpus, enc = E.small_trained_encoder()
    before = enc.checksum()
    index = self_question_scan(enc, corpus)
    got = [(r.sample, r.pos, r.truth, r.truth_p, r.top, r.top_p) for r in index.records()]
    oracle = brute_force_scan(enc, corpus)
    elapsed = time.perf_counter() - t0
    ok = len(corpus) == 50 and got == oracle and enc.checksum() == before and elapsed < 60
    record(3, "self-questioning oracle", ok, f"{index.count} neglected tokens, identical to oracle: "
           f"{got == oracle}, checksum unchanged: {enc.checksum() == before}, {elapsed:.1f}s")
    assert ok


def test_criterion_4_self_evolution():
    t0 = time.perf_counter()
    runs = [E.evolution_outcome(s) for s in E.SELF_EVOLUTION["seeds"]]
    n0 = statistics.median(r.n0 for r in runs)
    n1 = statistics.median(r.n1 for r in runs)
    a1 = statistics.median(r.a1 for r in runs)
    ac = statistics.median(r.a_control for r in runs)
    elapsed = time.perf_counter() - t0
    ok = n1 < n0 and a1 > ac and elapsed < 20 * 60
    record(4, "self-evolution", ok, f"median N0 {n0} -> N1 {n1}; median slot acc evolved {a1:.3f} "
           f"vs control {ac:.3f}; {elapsed:.0f}s")
    assert ok


def test_criterion_5_kd_prompt_transfer():
    t0 = time.perf_counter()
    enc = init_parameters(SMALL)
    train = separable_task(24, 0)
    base = dict(steps=8, eval_interval=1, seed=3, lr=0.05, prompt_len=2)
    _, scratch_metrics = prompt_tune(enc, None, train, PromptConfig(**base))
    teacher = new_prompt_model(enc, PromptConfig(seed=9, prompt_len=2))
    forced = kd_prompt_transfer(enc, teacher, train, TransferConfig(**base, lambda_override=0.0))
    endpoint = [m["loss"] for m in forced.metrics] == [m["loss"] for m in scratch_metrics]
    logits = np.random.default_rng(0).normal(size=(6, 2))
    zero_kl = all(kd_loss(Tensor(logits), logits, np.zeros(6, dtype=int), 1.0, t).item() == 0.0
                  for t in (1.0, 2.0, 4.0))

    runs = [E.transfer_outcome(s) for s in E.PROMPT_TRANSFER["seeds"]]
    acc_kd = statistics.median(r.acc_kd for r in runs)
    acc_scratch = statistics.median(r.acc_scratch for r in runs)
    lam_rel = statistics.median(r.lam_related for r in runs)
    lam_unrel = statistics.median(r.lam_unrelated for r in runs)
    elapsed = time.perf_counter() - t0
    ok = endpoint and zero_kl and acc_kd >= acc_scratch and lam_unrel < lam_rel and elapsed < 600
    record(5, "KD prompt transfer", ok, f"lambda=0 bit-exact {endpoint}; zero KL {zero_kl}; median acc "
           f"KD {acc_kd:.3f} vs scratch {acc_scratch:.3f}; median lambda related {lam_rel:.3f} vs "
           f"unrelated {lam_unrel:.3f}; {elapsed:.0f}s")
    assert ok


def test_criterion_6_transductive():
    t0 = time.perf_counter()
    enc = init_parameters(SMALL)
    clf = Classifier(enc.clone(), ClassifierHead.init(SMALL.hidden_size, 2, 0))
    _, states = transductive_finetune(clf, separable_task(8, 0), separable_task(16, 1),
                                      TransductiveConfig(finetune=FinetuneConfig(steps=0)))
    stops = [s.t for s in states] == [1, 2] and states[-1].agreement == 1.0
    runs = [E.transductive_outcome(s) for s in E.TRANSDUCTIVE["seeds"]]
    plain = statistics.median(r.acc_plain for r in runs)
    trans = statistics.median(r.acc_transductive for r in runs)
    elapsed = time.perf_counter() - t0
    ok = stops and trans >= plain and elapsed < 600
    record(6, "transductive fine-tuning", ok, f"stops at t=2: {stops}; median acc transductive "
           f"{trans:.3f} vs plain {plain:.3f}; {elapsed:.0f}s")
    assert ok


def test_criterion_7_sift_contracts():
    t0 = time.perf_counter()
    clf = small_classifier(0)
    ids, mask, y = sift_batch()
    loss, _ = sift_loss(clf, ids, mask, y, SiftConfig(eps=0.0), np.random.default_rng(0))
    eps_zero = loss.item() == classification_ce(clf.logits(ids, mask), y).item()

    rng = np.random.default_rng(1)
    excess = []
    while len(excess) < 1000:
        ids_b, mask_b, _ = sift_batch(8, len(excess))
        x_hat = normalized_embeddings(clf.encoder, ids_b).data
        eps = float(rng.uniform(1e-3, 2.0))
        with T.no_grad():
            clean = clf.logits(ids_b, mask_b, inputs_embeds=Tensor(x_hat)).data
        delta = sift_perturbation(clf, x_hat, mask_b, clean, SiftConfig(eps=eps), rng)
        excess.extend((np.linalg.norm(delta, axis=-1) - eps).ravel())
    excess = np.array(excess[:1000])
    in_ball = float(np.mean(excess <= 1e-12))

    wins = 0
    for trial in range(20):
        model = small_classifier(100 + trial)
        r = np.random.default_rng(trial)
        x_hat = normalized_embeddings(model.encoder, ids).data
        with T.no_grad():
            clean = model.logits(ids, mask, inputs_embeds=Tensor(x_hat))
        ascent = sift_perturbation(model, x_hat, mask, clean.data, SiftConfig(eps=0.1), r)
        rnd = r.normal(size=x_hat.shape)
        rnd *= np.linalg.norm(ascent, axis=-1, keepdims=True) / np.linalg.norm(rnd, axis=-1, keepdims=True)
        with T.no_grad():
            kl_a = symmetric_kl(clean, model.logits(ids, mask, inputs_embeds=Tensor(x_hat + ascent))).item()
            kl_r = symmetric_kl(clean, model.logits(ids, mask, inputs_embeds=Tensor(x_hat + rnd))).item()
        wins += kl_a > kl_r
    elapsed = time.perf_counter() - t0
    ok = eps_zero and in_ball == 1.0 and wins >= 16 and elapsed < 300
    record(7, "SiFT contracts", ok, f"eps=0 exact {eps_zero}; in-ball {in_ball:.0%} of 1000 positions; "
           f"ascent beats random {wins}/20; {elapsed:.1f}s")
    assert ok


def test_criterion_8_attention_invariants():
    worst_row = 0.0
    for seed in range(5):
        h, rel, w, mask, heads, hs, k = _attention_inputs(seed)
        _, probs = disentangled_attention(h, rel, w, mask, heads, hs, k, return_probs=True)
        worst_row = max(worst_row, float(np.abs(probs.data.sum(-1) - 1.0).max()))

    h, rel, w, mask, heads, hs, k = _attention_inputs(3)
    for name in ("pos_q.w", "pos_k.w"):
        w[name] = Tensor(np.zeros_like(w[name].data))
    _, probs = disentangled_attention(h, rel, w, mask, heads, hs, k, return_probs=True)
    B, L, d = h.shape
    q = (h.data @ w["q.w"].data + w["q.b"].data).reshape(B, L, heads, hs).transpose(0, 2, 1, 3)
    kk = (h.data @ w["k.w"].data + w["k.b"].data).reshape(B, L, heads, hs).transpose(0, 2, 1, 3)
    s = np.where(mask[:, None, None, :] == 0, -np.inf, q @ kk.transpose(0, 1, 3, 2) / np.sqrt(3 * hs))
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    reduce_err = float(np.abs(probs.data - p).max())

    table = relative_buckets(40, 4)
    shift = all(np.array_equal(table[s:s + 20, s:s + 20], table[:20, :20]) for s in range(21))
    ok = worst_row <= 1e-9 and reduce_err <= 1e-12 and shift
    record(8, "disentangled attention", ok, f"max |row sum-1| {worst_row:.1e}; zero-position deviation "
           f"from scaled standard attention {reduce_err:.1e}; bucket shift invariant {shift}")
    assert ok


def test_criterion_9_reproducibility(tmp_path):
    t0 = time.perf_counter()
    (tmp_path / "c.json").write_text(json.dumps({"synthetic_corpus": {"samples": 60, "num_entities": 10}}))
    assert main(["gen-corpus", "--config", str(tmp_path / "c.json"), "--seed", "5", "--out", str(tmp_path)]) == 0
    cfg = tmp_path / "p.json"
    cfg.write_text(json.dumps({"corpus": str(tmp_path / "corpus.txt"), "vocab": str(tmp_path / "vocab.json"),
                               "slots": str(tmp_path / "slots.json"),
                               "pretrain": {"steps": 20, "batch_size": 8, "eval_interval": 10}}))
    for run in ("a", "b"):
        assert main(["pretrain", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / run)]) == 0
    same_metrics = (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    same_ckpt = (tmp_path / "a/encoder.ckpt").read_bytes() == (tmp_path / "b/encoder.ckpt").read_bytes()

    enc = load_encoder(tmp_path / "a/encoder.ckpt")
    save_encoder(enc, tmp_path / "rt.ckpt")
    back = load_encoder(tmp_path / "rt.ckpt")
    bit_exact = all(back.params[n].data.tobytes() == p.data.tobytes() for n, p in enc.params.items())

    blob = (tmp_path / "rt.ckpt").read_bytes()
    rejected = 0
    cases = [blob[: len(blob) // 2], blob[:-1], blob[:100] + bytes([blob[100] ^ 0xFF]) + blob[101:]]
    for i, bad in enumerate(cases):
        (tmp_path / f"bad{i}").write_bytes(bad)
        loaded = None
        try:
            loaded = load_encoder(tmp_path / f"bad{i}")
        except IntegrityError:
            rejected += loaded is None
    elapsed = time.perf_counter() - t0
    ok = same_metrics and same_ckpt and bit_exact and rejected == len(cases) and elapsed < 300
    record(9, "reproducibility and persistence", ok, f"identical metrics {same_metrics}, identical "
           f"checkpoints {same_ckpt}; round trip bit-exact {bit_exact}; corrupt files rejected "
           f"{rejected}/{len(cases)}; {elapsed:.1f}s")
    assert ok
