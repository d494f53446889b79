import numpy as np
import pytest
import torch

from edgedistill.dataset_io import generate_toy_corpus
from edgedistill.diffusion import DiffusionConfig, EdgeDiffusion, reconstruct_latent
from edgedistill.distiller import (
    SynthesisRequest,
    TrainConfig,
    TrainingLog,
    align_heads,
    baseline_pretrained_synthesize,
    baseline_random_select,
    draw_seed_captions,
    finetune,
    synthesize,
)
from edgedistill.errors import ConfigurationError, InsufficientDataError, TrainingError, ValidationError
from edgedistill.text import Vocabulary
from edgedistill.toy import ToyCorpusSpec


def corpus(n=16, cpi=2, seed=0):
    return generate_toy_corpus(ToyCorpusSpec(n_images=n, captions_per_image=cpi), seed)


def model_for(c, width=16):
    torch.manual_seed(0)
    vocab = Vocabulary.from_captions(c.all_captions(), ToyCorpusSpec().vocabulary())
    return EdgeDiffusion(DiffusionConfig(width=width, cond_dim=16, timesteps=20), vocab)


def params(m):
    return {k: v.detach().clone() for k, v in m.named_parameters()}


def test_finetune_is_deterministic():
    c = corpus()
    cfg = TrainConfig(epochs=2, seed=3)
    a, log_a = finetune(model_for(c), c, cfg)
    b, log_b = finetune(model_for(c), c, cfg)
    assert all(torch.equal(v, params(b)[k]) for k, v in params(a).items())
    assert log_a.series("l_edge").tolist() == log_b.series("l_edge").tolist()
    assert len(log_a.records) == 4


def test_freeze_contract():
    c = corpus()
    m = model_for(c)
    before = params(m)
    finetune(m, c, TrainConfig(epochs=1, trainable_prefixes=("head.",)))
    after = params(m)
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed and all(k.startswith("head.") for k in changed)


def test_embedding_comes_from_denoised_latent():
    c = corpus()
    m = model_for(c)
    seen = []

    def hook(trace):
        assert trace.embedded_from is trace.denoised
        torch.testing.assert_close(
            trace.denoised, reconstruct_latent(trace.zt, trace.eps_hat, trace.t, m.schedule))
        assert not torch.equal(trace.denoised, trace.z0)
        seen.append(trace.step)

    finetune(m, c, TrainConfig(epochs=1), hook=hook)
    assert seen == [0, 1]


def test_log_contains_breakdown(tmp_path):
    c = corpus()
    _, tlog = finetune(model_for(c), c, TrainConfig(epochs=1, mse_weight=0.5))
    r = tlog.records[0]
    assert r["l_c"] == pytest.approx(r["l_i2t"] + r["l_t2i"])
    assert r["l_edge"] == pytest.approx(r["l_c"] + r["l_d"])
    assert r["loss"] == pytest.approx(r["l_edge"] + 0.5 * r["mse"], rel=1e-5)
    back = TrainingLog.read(tlog.write(tmp_path / "log.jsonl"))
    assert back.records == tlog.records and back.loss_mask == "contrastive_diversity"


def test_smoothed_edge_loss_decreases():
    c = corpus(64, 3)
    cfg = TrainConfig(epochs=6, learning_rate=1e-3, trainable_prefixes=("head.", "text_head.", "unet."))
    _, tlog = finetune(model_for(c), c, cfg)
    series = tlog.series("l_edge")
    window = 10
    assert series[-window:].mean() <= series[:window].mean()


@pytest.mark.parametrize("mask,term", [("mse_only", "mse"), ("contrastive", "l_c")])
def test_loss_masks(mask, term):
    c = corpus()
    _, tlog = finetune(model_for(c), c, TrainConfig(epochs=1, loss_mask=mask))
    assert tlog.records[0]["loss"] == pytest.approx(tlog.records[0][term])


@pytest.mark.parametrize("kw", [dict(batch_size=1), dict(tau=0), dict(loss_mask="x"),
                                dict(optimizer="lbfgs"), dict(mse_weight=-1)])
def test_config_errors(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw).validate()


def test_unknown_prefix():
    c = corpus()
    with pytest.raises(ConfigurationError):
        finetune(model_for(c), c, TrainConfig(epochs=1, trainable_prefixes=("nothing.",)))


def test_non_finite_training_aborts_with_ids():
    c = corpus()
    m = model_for(c)
    with torch.no_grad():
        next(m.unet.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingError, match="toy_"):
        finetune(m, c, TrainConfig(epochs=1))


def test_align_heads_only_moves_projections():
    c = corpus(32)
    m = model_for(c)
    before = params(m)
    _, tlog = align_heads(m, c, steps=60, batch_size=16)
    after = params(m)
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed == {"head.weight", "head.bias", "text_head.weight", "text_head.bias"}
    lc = tlog.series("l_c")
    assert lc[-10:].mean() < lc[:10].mean()


# ---------------------------------------------------------------------------
# synthesis

@pytest.fixture(scope="module")
def source():
    return corpus(128, 5, seed=1)


@pytest.fixture(scope="module")
def tiny_model(source):
    m = model_for(source, width=8)
    m.latent_scale.fill_(5.0)
    return m


def test_synthesize_counts(tiny_model, source):
    ds = synthesize(tiny_model, SynthesisRequest(10, source, cpi=2, sampler_steps=2))
    assert ds.n_images == 5 and ds.cpi == 1
    assert len({p.captions[0] for p in ds.pairs}) == 5
    assert [p.sampler_seed for p in ds.provenance] == list(range(5))
    assert all(p.image.min() >= 0 and p.image.max() <= 1 for p in ds.pairs)


@pytest.mark.parametrize("cpi,images", [(1, 500), (2, 250), (5, 100)])
def test_synthesize_500_pairs(tiny_model, source, cpi, images):
    ds = synthesize(tiny_model, SynthesisRequest(500, source, cpi=cpi, sampler_steps=1, batch_size=256))
    assert ds.n_images == images


def test_synthesis_independent_of_batch_size(tiny_model, source):
    a = synthesize(tiny_model, SynthesisRequest(6, source, cpi=1, sampler_steps=3, batch_size=6, seed=9))
    b = synthesize(tiny_model, SynthesisRequest(6, source, cpi=1, sampler_steps=3, batch_size=4, seed=9))
    assert all(np.array_equal(p.image, q.image) for p, q in zip(a.pairs, b.pairs))


def test_preprocess_keeps_seed_caption(tiny_model, source):
    ds = synthesize(tiny_model, SynthesisRequest(3, source, cpi=1, sampler_steps=1),
                    preprocess=lambda caps: [c.upper() for c in caps])
    assert all(p.captions[0] == v.seed_caption.upper() for p, v in zip(ds.pairs, ds.provenance))
    with pytest.raises(ValidationError):
        synthesize(tiny_model, SynthesisRequest(3, source, cpi=1, sampler_steps=1),
                   preprocess=lambda caps: caps[:1])


def test_request_validation(source):
    with pytest.raises(ValidationError):
        SynthesisRequest(10, source, cpi=3)
    with pytest.raises(InsufficientDataError):
        draw_seed_captions(corpus(2, 1), 3, 0)


def test_baselines(tiny_model, source):
    ds = baseline_pretrained_synthesize(tiny_model, SynthesisRequest(4, source, cpi=1, sampler_steps=1))
    assert {p.source for p in ds.provenance} == {"pretrained-baseline"}
    real = baseline_random_select(source, 20, 0)
    assert real.pair_count == 20 and len({p.image_id for p in real.pairs}) == 20
    captions = {(r.image_id, c) for r in source.records for c in r.captions}
    assert all((p.image_id.split("__")[0], p.captions[0]) in captions for p in real.pairs)
    with pytest.raises(InsufficientDataError):
        baseline_random_select(source, source.pair_count + 1, 0)
