import math

import numpy as np
import pytest

from evolm import tensor as T
from evolm.adaptation import (Classifier, ClassifierHead, FinetuneConfig, PromptConfig, SiftConfig, SoftPrompt,
                              TaskEmbedding, TransductiveConfig, TransferConfig, accuracy, classification_ce,
                              finetune_classifier, kd_loss, kd_prompt_transfer, new_prompt_model,
                              normalized_embeddings, project_ball, prompt_similarity, prompt_tune, sift_loss,
                              sift_perturbation, symmetric_kl, task_embedding, transductive_finetune)
from evolm.data import CLS, NUM_SPECIAL, LabeledExample, pad_batch
from evolm.errors import ConfigError, ContractError, DataError
from evolm.model import ModelConfig, init_parameters
from evolm.tensor import Tensor

from experiments import small_trained_encoder
from oracles import kd_loss_scalar

SMALL = ModelConfig(layers=1, hidden_size=16, ffn_size=32, heads=2, head_size=8, vocab_size=48,
                    max_seq_len=32, max_relative_distance=4, seed=0)


def separable_task(n: int, seed: int) -> list[LabeledExample]:
    """Label is decided by the first word alone."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        toks = rng.integers(0, 16, 6)
        out.append(LabeledExample(tuple([CLS] + [NUM_SPECIAL + int(t) for t in toks]), int(toks[0] < 8), ""))
    return out


@pytest.fixture(scope="module")
def small_encoder():
    return init_parameters(SMALL)


# ---------------------------------------------------------------------------
# KD loss


def test_kd_hand_case_matches_scalar_oracle():
    teacher = np.log(np.array([[0.75, 0.25]]))
    student = Tensor(np.log(np.array([[0.5, 0.5]])))
    got = kd_loss(student, teacher, np.array([0]), 0.5, 1.0).item()
    want = kd_loss_scalar([math.log(0.5)] * 2, [math.log(0.75), math.log(0.25)], 0, 0.5, 1.0)
    # by hand: 0.5 * ln 2 + 0.5 * (0.75 ln 1.5 + 0.25 ln 0.5)
    by_hand = 0.5 * math.log(2) + 0.5 * (0.75 * math.log(1.5) + 0.25 * math.log(0.5))
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(by_hand, abs=1e-12)


@pytest.mark.parametrize("temperature", [1.0, 2.0, 4.0])
def test_kl_term_vanishes_when_teacher_equals_student(temperature):
    logits = np.random.default_rng(0).normal(size=(5, 3))
    loss = kd_loss(Tensor(logits), logits, np.zeros(5, dtype=int), 1.0, temperature).item()
    assert abs(loss) < 1e-15


def test_kd_loss_matches_oracle_on_random_rows():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s, t = rng.normal(size=3), rng.normal(size=3)
        y, lam, temp = int(rng.integers(3)), float(rng.uniform()), float(rng.uniform(0.5, 4))
        got = kd_loss(Tensor(s[None]), t[None], np.array([y]), lam, temp).item()
        assert got == pytest.approx(kd_loss_scalar(list(s), list(t), y, lam, temp), rel=1e-10)


def test_kd_loss_is_convex_combination_at_unit_temperature():
    rng = np.random.default_rng(2)
    s, t, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rng.integers(2, size=4)
    ce = kd_loss(Tensor(s), t, y, 0.0, 1.0).item()
    kl = kd_loss(Tensor(s), t, y, 1.0, 1.0).item()
    for lam in (0.25, 0.5, 0.75):
        assert kd_loss(Tensor(s), t, y, lam, 1.0).item() == pytest.approx((1 - lam) * ce + lam * kl, rel=1e-12)


def test_kd_loss_rejects_lambda_out_of_range():
    with pytest.raises(ContractError):
        kd_loss(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), np.array([0]), 1.5, 1.0)


# ---------------------------------------------------------------------------
# task embeddings and similarity


def test_task_embedding_examples():
    v = np.array([1.0, -2.0, 3.0])
    same = SoftPrompt(Tensor(np.tile(v, (4, 1))))
    np.testing.assert_allclose(task_embedding(same).vector, v)
    opposite = SoftPrompt(Tensor(np.stack([v, -v])))
    np.testing.assert_array_equal(task_embedding(opposite).vector, np.zeros(3))
    rnd = SoftPrompt.random(8, 16, seed=3)
    np.testing.assert_array_equal(task_embedding(rnd).vector, task_embedding(rnd).vector)


def test_prompt_similarity_examples():
    e = TaskEmbedding(np.array([1.0, 2.0]))
    assert prompt_similarity(e, e) == pytest.approx(1.0)
    assert prompt_similarity(TaskEmbedding(np.array([1.0, 0.0])), TaskEmbedding(np.array([0.0, 3.0]))) == 0.0
    assert prompt_similarity(e, TaskEmbedding(-e.vector)) == 0.0
    assert prompt_similarity(e, TaskEmbedding(np.zeros(2))) == 0.0


def test_prompt_len_zero_is_rejected():
    with pytest.raises(ContractError):
        PromptConfig(prompt_len=0)
    with pytest.raises(ContractError):
        SoftPrompt.random(0, 16, seed=0)


# ---------------------------------------------------------------------------
# prompt tuning and transfer


def test_prompt_tune_freezes_backbone_and_beats_random_prompt():
    _, enc = small_trained_encoder()
    train = separable_task(64, 0)
    before = enc.checksum()
    cfg = PromptConfig(steps=200, lr=0.03, seed=0)
    tuned, metrics = prompt_tune(enc, None, train, cfg)
    assert enc.checksum() == before
    random_prompt = new_prompt_model(enc, cfg)
    acc_random = accuracy(lambda ids, mask: random_prompt.logits(enc, ids, mask), train)
    assert metrics[-1]["train_acc"] > acc_random


def test_frozen_head_keeps_seeded_init(small_encoder):
    cfg = PromptConfig(steps=5, seed=4, train_head=False)
    tuned, _ = prompt_tune(small_encoder, None, separable_task(16, 1), cfg)
    fresh = new_prompt_model(small_encoder, cfg)
    np.testing.assert_array_equal(tuned.head.weight.data, fresh.head.weight.data)
    assert not np.array_equal(tuned.prompt.vectors.data, fresh.prompt.vectors.data)


def test_lambda_zero_reproduces_prompt_tuning_exactly(small_encoder):
    train = separable_task(40, 2)
    base = dict(steps=12, eval_interval=1, seed=5, lr=0.05)
    scratch, scratch_metrics = prompt_tune(small_encoder, None, train, PromptConfig(**base))
    teacher = new_prompt_model(small_encoder, PromptConfig(seed=99))
    result = kd_prompt_transfer(small_encoder, teacher, train, TransferConfig(**base, lambda_override=0.0))
    assert [m["loss"] for m in result.metrics] == [m["loss"] for m in scratch_metrics]
    np.testing.assert_array_equal(result.model.prompt.vectors.data, scratch.prompt.vectors.data)
    np.testing.assert_array_equal(result.model.head.weight.data, scratch.head.weight.data)


def test_transfer_freezes_backbone_and_teacher(small_encoder):
    train = separable_task(32, 3)
    teacher, _ = prompt_tune(small_encoder, None, train, PromptConfig(steps=5, seed=1))
    t_prompt, t_head = teacher.prompt.vectors.data.copy(), teacher.head.weight.data.copy()
    before = small_encoder.checksum()
    result = kd_prompt_transfer(small_encoder, teacher, train, TransferConfig(steps=6, eval_interval=2, seed=2))
    assert small_encoder.checksum() == before
    np.testing.assert_array_equal(teacher.prompt.vectors.data, t_prompt)
    np.testing.assert_array_equal(teacher.head.weight.data, t_head)
    assert all(0.0 <= lam <= 1.0 for lam in result.lambda_trace)
    assert len(result.lambda_trace) == 1 + 3


def test_static_lambda_uses_reference_prompt(small_encoder):
    train = separable_task(16, 4)
    teacher = new_prompt_model(small_encoder, PromptConfig(seed=1))
    result = kd_prompt_transfer(small_encoder, teacher, train,
                                TransferConfig(steps=3, seed=2, lambda_mode="static"),
                                reference_prompt=teacher.prompt)
    assert result.lam == pytest.approx(1.0)
    assert result.lambda_trace == [result.lam]


def test_transfer_class_count_mismatch_is_config_error(small_encoder):
    teacher = new_prompt_model(small_encoder, PromptConfig(num_classes=3))
    with pytest.raises(ConfigError):
        kd_prompt_transfer(small_encoder, teacher, separable_task(8, 0), TransferConfig(num_classes=2))


# ---------------------------------------------------------------------------
# fine-tuning


def test_finetune_separable_task_reaches_high_train_accuracy(small_encoder):
    train = separable_task(64, 0)
    _, metrics = finetune_classifier(small_encoder, train, FinetuneConfig(steps=200, lr=1e-2, seed=0))
    assert metrics[-1]["train_acc"] >= 0.95


def test_finetune_with_zero_lr_leaves_parameters_unchanged(small_encoder):
    clf0 = Classifier(small_encoder.clone(), ClassifierHead.init(16, 2, 0))
    clf, _ = finetune_classifier(clf0, separable_task(32, 1), FinetuneConfig(steps=10, lr=0.0))
    for a, b in zip(clf.parameters(), clf0.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_finetune_is_deterministic(small_encoder):
    train, dev = separable_task(32, 1), separable_task(32, 2)
    cfg = FinetuneConfig(steps=20, lr=1e-2, seed=3, eval_interval=20)
    a = finetune_classifier(small_encoder, train, cfg, dev)[1]
    b = finetune_classifier(small_encoder, train, cfg, dev)[1]
    assert a == b


def test_finetune_label_out_of_range_is_data_error(small_encoder):
    bad = [LabeledExample((CLS, NUM_SPECIAL), 2, "")]
    with pytest.raises(DataError):
        finetune_classifier(small_encoder, bad, FinetuneConfig(steps=1))


# ---------------------------------------------------------------------------
# transductive fine-tuning


def test_transductive_stops_at_two_when_labels_are_stable(small_encoder):
    seed_set, unlabeled = separable_task(16, 0), separable_task(24, 1)
    clf = Classifier(small_encoder.clone(), ClassifierHead.init(16, 2, 0))
    # zero-step tuning keeps the model, so the pseudo-labels cannot change
    cfg = TransductiveConfig(t_max=5, finetune=FinetuneConfig(steps=0))
    _, states = transductive_finetune(clf, seed_set, unlabeled, cfg)
    assert [s.t for s in states] == [1, 2]
    assert states[-1].agreement == 1.0


def test_transductive_t_max_zero_is_plain_finetuning(small_encoder):
    seed_set, unlabeled = separable_task(16, 0), separable_task(24, 1)
    ft = FinetuneConfig(steps=5, seed=2)
    model, states = transductive_finetune(small_encoder, seed_set, unlabeled, TransductiveConfig(t_max=0, finetune=ft))
    plain, _ = finetune_classifier(small_encoder, seed_set, ft)
    assert states == []
    for a, b in zip(model.parameters(), plain.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_transductive_never_relabels_seed_and_labels_every_input(small_encoder):
    seed_set, unlabeled = separable_task(16, 0), separable_task(24, 1)
    snapshot = list(seed_set)
    cfg = TransductiveConfig(t_max=3, agreement_threshold=1.0, finetune=FinetuneConfig(steps=3, lr=1e-2))
    _, states = transductive_finetune(small_encoder, seed_set, unlabeled, cfg)
    assert seed_set == snapshot
    for s in states:
        assert list(s.seed_examples) == snapshot
        assert len(s.pseudo_labeled) == len(unlabeled)
        assert [ex.token_ids for ex in s.pseudo_labeled] == [ex.token_ids for ex in unlabeled]
        assert 0.0 <= s.agreement <= 1.0


def test_transductive_requires_unlabeled_inputs(small_encoder):
    with pytest.raises(ContractError):
        transductive_finetune(small_encoder, separable_task(4, 0), [], TransductiveConfig())


# ---------------------------------------------------------------------------
# SiFT


def sift_batch(n: int = 6, seed: int = 0):
    data = separable_task(n, seed)
    ids, mask = pad_batch([ex.token_ids for ex in data])
    return ids, mask, np.array([ex.label for ex in data])


def small_classifier(seed: int) -> Classifier:
    enc = init_parameters(ModelConfig(**{**SMALL.to_dict(), "seed": seed}))
    head = ClassifierHead(Tensor(np.random.default_rng(seed).normal(0, 1.0, (16, 2)), True), Tensor(np.zeros(2), True))
    return Classifier(enc, head, normalize_embeddings=True)


def test_sift_eps_zero_is_clean_cross_entropy():
    clf = small_classifier(0)
    ids, mask, y = sift_batch()
    loss, delta = sift_loss(clf, ids, mask, y, SiftConfig(eps=0.0), np.random.default_rng(0))
    clean = classification_ce(clf.logits(ids, mask), y).item()
    assert not delta.any()
    assert loss.item() == clean


def test_sift_zero_adv_weight_is_cross_entropy_on_normalized_embeddings():
    clf = small_classifier(1)
    ids, mask, y = sift_batch()
    loss, _ = sift_loss(clf, ids, mask, y, SiftConfig(eps=0.5, adv_weight=0.0), np.random.default_rng(0))
    x_hat = normalized_embeddings(clf.encoder, ids)
    assert loss.item() == classification_ce(clf.logits(ids, mask, inputs_embeds=x_hat), y).item()


def test_sift_perturbation_stays_in_ball_over_1000_positions():
    clf = small_classifier(2)
    rng = np.random.default_rng(0)
    excess = []
    while len(excess) < 1000:
        ids, mask, _ = sift_batch(8, len(excess))
        x_hat = normalized_embeddings(clf.encoder, ids).data
        eps = float(rng.uniform(1e-3, 2.0))
        with T.no_grad():
            clean = clf.logits(ids, mask, inputs_embeds=Tensor(x_hat)).data
        delta = sift_perturbation(clf, x_hat, mask, clean, SiftConfig(eps=eps, ascent_steps=3), rng)
        excess.extend((np.linalg.norm(delta, axis=-1) - eps).ravel())
    assert len(excess) >= 1000
    assert max(excess) <= 1e-12


def test_project_ball_bounds_norm():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(1000, 16)) * rng.uniform(0, 5, size=(1000, 1))
    eps = 0.7
    p = project_ball(d, eps)
    assert np.all(np.linalg.norm(p, axis=-1) <= eps + 1e-12)
    inside = np.linalg.norm(d, axis=-1) <= eps
    np.testing.assert_array_equal(p[inside], d[inside])


def test_sift_ascent_beats_random_direction():
    wins = 0
    ids, mask, _ = sift_batch(6, 0)
    for trial in range(20):
        clf = small_classifier(100 + trial)
        rng = np.random.default_rng(trial)
        x_hat = normalized_embeddings(clf.encoder, ids).data
        with T.no_grad():
            clean = clf.logits(ids, mask, inputs_embeds=Tensor(x_hat))
        ascent = sift_perturbation(clf, x_hat, mask, clean.data, SiftConfig(eps=0.1), rng)
        rnd = rng.normal(size=x_hat.shape)
        rnd *= np.linalg.norm(ascent, axis=-1, keepdims=True) / np.linalg.norm(rnd, axis=-1, keepdims=True)
        with T.no_grad():
            kl_ascent = symmetric_kl(clean, clf.logits(ids, mask, inputs_embeds=Tensor(x_hat + ascent))).item()
            kl_random = symmetric_kl(clean, clf.logits(ids, mask, inputs_embeds=Tensor(x_hat + rnd))).item()
        wins += kl_ascent > kl_random
    assert wins >= 16


def test_sift_config_validation():
    with pytest.raises(ContractError):
        SiftConfig(eps=-1.0)
    with pytest.raises(ContractError):
        SiftConfig(ascent_steps=0)
