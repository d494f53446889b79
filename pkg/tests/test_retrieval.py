import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from edgedistill.dataset_io import DistilledDataset, generate_toy_corpus
from edgedistill.errors import ConfigurationError, TrainingError, ValidationError
from edgedistill.retrieval import (
    EvalConfig,
    EvaluationReport,
    RetrievalMetrics,
    alignment_score,
    build_eval_model,
    compute_retrieval,
    evaluate_pipeline,
    eval_vocabulary,
    ranks_from_similarity,
    registered_towers,
    retrieval_from_similarity,
    swap_image_tower,
    train_eval_model,
)
from edgedistill.toy import ToyCorpusSpec


def brute(sim, owner, ks):
    n_caps, n_imgs = sim.shape
    ir, tr = {}, {}
    for k in ks:
        ir[k] = np.mean([owner[c] in sorted(range(n_imgs), key=lambda i: (-sim[c, i], i))[:k]
                         for c in range(n_caps)])
        tr[k] = np.mean([any(owner[c] == i for c in sorted(range(n_caps), key=lambda c: (-sim[c, i], c))[:k])
                         for i in range(n_imgs)])
    return ir, tr


def test_perfect_alignment_scores_one():
    sim = np.eye(4) * 0.9
    ir, tr, align = retrieval_from_similarity(sim, [0, 1, 2, 3], (1, 2))
    assert ir == {1: 1.0, 2: 1.0} and tr == {1: 1.0, 2: 1.0}
    assert align == pytest.approx(0.9)


def test_ties_keep_index_order():
    ranks = ranks_from_similarity(np.array([[0.5, 0.5, 0.1]]))
    assert ranks.tolist() == [[0, 1, 2]]
    # caption 0 describes image 1 but ties with image 0, which wins
    ir, _, _ = retrieval_from_similarity(np.array([[0.5, 0.5], [1.0, 0.0]]), [1, 0], (1,))
    assert ir[1] == 0.5


def test_text_retrieval_counts_any_own_caption():
    # image 0 has captions 0 and 1; only caption 1 ranks first for it
    sim = np.array([[0.1, 0.9], [0.8, 0.2], [0.0, 0.95]])
    _, tr, _ = retrieval_from_similarity(sim, [0, 0, 1], (1,))
    assert tr[1] == 1.0


def test_k_larger_than_candidates_rejected():
    with pytest.raises(ValidationError):
        retrieval_from_similarity(np.eye(3), [0, 1, 2], (5,))


def test_every_image_needs_a_caption():
    with pytest.raises(ValidationError):
        retrieval_from_similarity(np.eye(3)[:2], [0, 1], (1,))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2), st.integers(0, 10_000), st.booleans())
def test_matches_brute_force_and_is_monotone(n, extra, seed, coarse):
    rng = np.random.default_rng(seed)
    owner = list(range(n)) + rng.integers(0, n, size=extra).tolist()
    sim = rng.normal(size=(len(owner), n))
    if coarse:
        sim = np.round(sim, 0)  # many ties
    ks = list(range(1, n + 1))
    ir, tr, _ = retrieval_from_similarity(sim, owner, ks)
    want_ir, want_tr = brute(sim, owner, ks)
    assert ir == pytest.approx(want_ir, abs=0) and tr == pytest.approx(want_tr, abs=0)
    assert all(ir[a] <= ir[b] and tr[a] <= tr[b] for a, b in zip(ks, ks[1:]))
    # n images: every caption finds its image within the top n
    assert ir[n] == 1.0


def test_metrics_reject_decreasing_recall():
    with pytest.raises(ValidationError):
        RetrievalMetrics({1: 0.5, 5: 0.4}, {1: 0.1}, 0.0, 3)


@pytest.fixture(scope="module")
def toy_sets():
    spec = ToyCorpusSpec(n_images=64, captions_per_image=2)
    train = generate_toy_corpus(spec, 0)
    val = generate_toy_corpus(ToyCorpusSpec(n_images=20, captions_per_image=1), 1, "validation", "val")
    ds = DistilledDataset(tuple(train.pairs()), 2)
    return ds, val


def test_training_beats_untrained(toy_sets):
    ds, val = toy_sets
    cfg = EvalConfig(epochs=30, embed_dim=32)
    vocab = eval_vocabulary([c for p in ds.pairs for c in p.captions])
    untrained = build_eval_model(vocab, cfg, 0)
    before = alignment_score(untrained, ds)
    model, losses = train_eval_model(ds, cfg, 0, vocab=vocab)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
    assert alignment_score(model, ds) > before
    m = compute_retrieval(model, val, (1, 5, 10))
    assert m.ir_at[10] > 0.5 and m.n_queries == 20


def test_evaluate_pipeline_is_deterministic(toy_sets):
    ds, val = toy_sets
    cfg = EvalConfig(epochs=2, embed_dim=16, seeds=(0, 1))
    a = evaluate_pipeline(ds, val, cfg)
    b = evaluate_pipeline(ds, val, cfg)
    assert a.mean == b.mean and set(a.per_seed) == {0, 1}
    assert a.std["IR@1"] >= 0
    back = EvaluationReport.from_json(a.to_json())
    assert back.mean == a.mean and back.per_seed[1].as_dict() == a.per_seed[1].as_dict()


def test_tower_swap_keeps_text_side(toy_sets):
    ds, _ = toy_sets
    vocab = eval_vocabulary([c for p in ds.pairs for c in p.captions])
    model = build_eval_model(vocab, EvalConfig(), 0)
    assert "conv_wide" in registered_towers()
    wide = swap_image_tower(model, "conv_wide")
    assert wide.tower_id == "conv_wide" and wide.text_tower.vocab is vocab
    with pytest.raises(ConfigurationError):
        swap_image_tower(model, "vit")


def test_too_small_training_set():
    spec = ToyCorpusSpec(n_images=1, captions_per_image=1)
    one = DistilledDataset(tuple(generate_toy_corpus(spec, 0).pairs()), 1)
    with pytest.raises(TrainingError):
        train_eval_model(one, EvalConfig(epochs=1))


def test_alignment_of_identical_embeddings():
    torch.manual_seed(0)
    spec = ToyCorpusSpec(n_images=4, captions_per_image=1)
    ds = DistilledDataset(tuple(generate_toy_corpus(spec, 0).pairs()), 1)
    model = build_eval_model(eval_vocabulary([p.captions[0] for p in ds.pairs]), EvalConfig(embed_dim=8), 0)
    score = alignment_score(model, ds)
    assert -1.0 <= score <= 1.0
