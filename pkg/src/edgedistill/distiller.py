"""Fine-tune the diffusion model with the EDGE objective and sample a distilled set."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset_io import (
    DatasetManifest,
    DistilledDataset,
    ImageTextPair,
    Provenance,
    quantize,
)
from .diffusion import (
    EdgeDiffusion,
    forward_noise,
    model_output,
    output_to_noise,
    reconstruct_latent,
    sample,
    training_target,
)
from .errors import ConfigurationError, InsufficientDataError, TrainingError, ValidationError
from .losses import EmbeddingBatch, LossBreakdown, contrastive_loss, edge_loss

log = logging.getLogger(__name__)

# Which terms drive the optimizer.  The MSE noise-prediction term can be mixed
# into the EDGE masks through ``mse_weight``.
LOSS_MASKS = ("mse_only", "contrastive", "contrastive_diversity")
OPTIMIZERS = ("rmsprop", "adam", "sgd")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 8
    tau: float = 0.5
    lambda_c: float = 1.0
    lambda_d: float = 1.0
    mse_weight: float = 0.0
    loss_mask: str = "contrastive_diversity"
    trainable_prefixes: tuple[str, ...] = ()
    optimizer: str = "rmsprop"
    seed: int = 0

    def validate(self):
        if self.batch_size < 2:
            raise ConfigurationError("train.batch_size must be >= 2 (diversity needs two pairs)")
        for name in ("learning_rate", "epochs", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"train.{name} must be positive")
        for name in ("lambda_c", "lambda_d", "mse_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"train.{name} must be non-negative")
        if self.loss_mask not in LOSS_MASKS:
            raise ConfigurationError(f"train.loss_mask must be one of {LOSS_MASKS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"train.optimizer must be one of {OPTIMIZERS}")


@dataclass
class StepTrace:
    """Tensors of one training step, handed to instrumentation hooks."""

    step: int
    image_ids: list[str]
    z0: torch.Tensor
    zt: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    eps_hat: torch.Tensor
    denoised: torch.Tensor
    embedded_from: torch.Tensor
    breakdown: LossBreakdown


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    loss_mask: str = ""

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=np.float64)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records),
                        encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "TrainingLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        records = [json.loads(line) for line in lines if line.strip()]
        return cls(records, records[0]["loss_mask"] if records else "")


def select_trainable(model: EdgeDiffusion, prefixes: Sequence[str]) -> list[torch.nn.Parameter]:
    """Parameters whose names start with any prefix; all of them when empty."""
    named = list(model.named_parameters())
    if not prefixes:
        return [p for _, p in named]
    chosen = [p for n, p in named if any(n.startswith(pre) for pre in prefixes)]
    if not chosen:
        raise ConfigurationError(f"train.trainable_prefixes {list(prefixes)} match no parameters")
    return chosen


def _make_optimizer(name: str, params, lr: float) -> torch.optim.Optimizer:
    if name == "rmsprop":
        return torch.optim.RMSprop(params, lr=lr, momentum=0.0)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)


def corpus_tensors(corpus: DatasetManifest) -> tuple[torch.Tensor, list[tuple[str, ...]], list[str]]:
    images = torch.from_numpy(np.stack([corpus.load_image(r) for r in corpus.records]))
    return images, [r.captions for r in corpus.records], [r.image_id for r in corpus.records]


def finetune(
    model: EdgeDiffusion,
    corpus: DatasetManifest,
    config: TrainConfig,
    hook: Callable[[StepTrace], None] | None = None,
) -> tuple[EdgeDiffusion, TrainingLog]:
    """Train ``model`` in place on ``corpus``.

    Each step draws one uniformly chosen caption per image, noises the image
    latent at a uniform timestep, predicts the noise, reconstructs the
    denoised latent and embeds *that* latent for the contrastive and
    diversity terms.
    """
    config.validate()
    if len(corpus) == 0:
        raise TrainingError("corpus is empty")
    images, captions, ids = corpus_tensors(corpus)
    if not model.calibrated:
        model.calibrate_latent_scale(images)
    params = select_trainable(model, config.trainable_prefixes)
    trainable = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable)
    opt = _make_optimizer(config.optimizer, params, config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed)
    caption_rng = np.random.default_rng(config.seed)
    T = model.schedule.T
    n = len(ids)
    out = TrainingLog(loss_mask=config.loss_mask)
    step = 0
    model.train()
    try:
        for epoch in range(config.epochs):
            order = torch.randperm(n, generator=gen).tolist()
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                if len(idx) < 2:
                    continue
                t0 = time.perf_counter()
                caps = [captions[i][caption_rng.integers(len(captions[i]))] for i in idx]
                z0 = model.encode_image(images[idx])
                y = model.encode_text(caps)
                t = torch.randint(0, T, (len(idx),), generator=gen)
                noised = forward_noise(z0, t, model.schedule, gen)
                raw = model_output(model, noised.zt, t, y)
                eps_hat = output_to_noise(model, raw, noised.zt, t)
                denoised = reconstruct_latent(noised.zt, eps_hat, t, model.schedule)
                try:
                    batch = EmbeddingBatch.from_raw(model.embed_latent(denoised), model.embed_text(y))
                except ValidationError as exc:
                    raise TrainingError(
                        f"invalid embeddings at step {step} (epoch {epoch}): {exc}; "
                        f"batch ids {[ids[i] for i in idx]}; timesteps {t.tolist()}"
                    ) from exc
                parts = edge_loss(batch, config.tau, config.lambda_c, config.lambda_d)
                mse = F.mse_loss(raw, training_target(model, z0, noised.eps, t))
                if config.loss_mask == "mse_only":
                    loss = mse
                elif config.loss_mask == "contrastive":
                    loss = parts.l_c + config.mse_weight * mse
                else:
                    loss = parts.l_edge + config.mse_weight * mse
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at step {step} (epoch {epoch}); "
                        f"batch ids {[ids[i] for i in idx]}; timesteps {t.tolist()}"
                    )
                if hook is not None:
                    hook(StepTrace(step, [ids[i] for i in idx], z0, noised.zt, t, noised.eps,
                                   eps_hat, denoised, denoised, parts))
                opt.zero_grad()
                loss.backward()
                opt.step()
                out.records.append({
                    "step": step, "epoch": epoch, "loss_mask": config.loss_mask,
                    **parts.as_floats(), "mse": float(mse.detach()), "loss": float(loss.detach()),
                    "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
                })
                step += 1
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        model.eval()
    log.info("finetune %s: %d steps, final loss %.4f", config.loss_mask, step,
             out.records[-1]["loss"] if out.records else float("nan"))
    return model, out


def pretrain(model: EdgeDiffusion, corpus: DatasetManifest, epochs: int = 200,
             learning_rate: float = 1e-3, batch_size: int = 32, seed: int = 0
             ) -> tuple[EdgeDiffusion, TrainingLog]:
    """Plain noise-prediction (MSE) training; stands in for a pretrained generator."""
    cfg = TrainConfig(learning_rate=learning_rate, batch_size=batch_size, epochs=epochs,
                      loss_mask="mse_only", optimizer="adam", seed=seed)
    return finetune(model, corpus, cfg)


HEAD_PREFIXES = ("head.", "text_head.")


def align_heads(model: EdgeDiffusion, corpus: DatasetManifest, steps: int = 500,
                learning_rate: float = 1e-2, batch_size: int = 64, tau: float = 0.5,
                seed: int = 0) -> tuple[EdgeDiffusion, TrainingLog]:
    """Fit the two embedding projections on clean latents of ``corpus``.

    Everything else stays frozen.  The latent scale is recalibrated on
    ``corpus`` first, since the generator may have been trained elsewhere.
    """
    if len(corpus) == 0:
        raise TrainingError("corpus is empty")
    images, captions, _ = corpus_tensors(corpus)
    model.calibrate_latent_scale(images)
    out = TrainingLog(loss_mask="heads")
    if steps <= 0:
        return model, out
    params = select_trainable(model, HEAD_PREFIXES)
    opt = torch.optim.Adam(params, lr=learning_rate)
    gen = torch.Generator().manual_seed(seed)
    caption_rng = np.random.default_rng(seed)
    with torch.no_grad():
        z0 = model.encode_image(images)
    n = len(captions)
    model.eval()
    for step in range(steps):
        idx = torch.randperm(n, generator=gen)[:batch_size].tolist()
        with torch.no_grad():
            y = model.encode_text([captions[i][caption_rng.integers(len(captions[i]))] for i in idx])
        batch = EmbeddingBatch.from_raw(model.embed_latent(z0[idx]), model.embed_text(y))
        _, _, l_c = contrastive_loss(batch, tau)
        opt.zero_grad()
        l_c.backward()
        opt.step()
        out.records.append({"step": step, "loss_mask": "heads", "l_c": float(l_c.detach())})
    model.zero_grad(set_to_none=True)
    log.info("align_heads: %d steps, final l_c %.4f", steps, out.records[-1]["l_c"])
    return model, out


# ---------------------------------------------------------------------------
# synthesis

@dataclass
class SynthesisRequest:
    pair_count: int
    caption_source: DatasetManifest
    cpi: int = 2
    sampler_steps: int | None = None
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.pair_count < 1 or self.cpi < 1:
            raise ValidationError("pair_count and cpi must be positive")
        if self.pair_count % self.cpi:
            raise ValidationError(
                f"pair_count {self.pair_count} is not divisible by cpi {self.cpi}"
            )

    @property
    def n_images(self) -> int:
        return self.pair_count // self.cpi


def draw_seed_captions(source: DatasetManifest, count: int, seed: int) -> list[str]:
    """``count`` distinct caption strings, uniformly without replacement."""
    unique = list(dict.fromkeys(source.all_captions()))
    if len(unique) < count:
        raise InsufficientDataError(
            f"caption source has {len(unique)} distinct captions, {count} needed"
        )
    rng = np.random.default_rng(seed)
    return [unique[i] for i in rng.choice(len(unique), size=count, replace=False)]


@torch.no_grad()
def synthesize(
    model: EdgeDiffusion, request: SynthesisRequest, source: str = "edge",
    captioner_id: str = "seed",
    preprocess: Callable[[list[str]], list[str]] | None = None,
) -> DistilledDataset:
    """Sample one image per seed caption; each image starts with that single caption.

    Image ``i`` uses sampler seed ``request.seed + i`` so batching never
    changes which noise an image sees.  ``preprocess`` rewrites the seed
    captions before they condition sampling; the rewritten text becomes the
    image's caption and provenance keeps the original.
    """
    seeds_text = draw_seed_captions(request.caption_source, request.n_images, request.seed)
    captions = list(preprocess(list(seeds_text))) if preprocess is not None else seeds_text
    if len(captions) != len(seeds_text):
        raise ValidationError("caption preprocessing changed the number of captions")
    model.eval()
    pairs, prov = [], []
    for start in range(0, len(captions), request.batch_size):
        chunk = captions[start:start + request.batch_size]
        seeds = [request.seed + start + k for k in range(len(chunk))]
        gens = [torch.Generator().manual_seed(s) for s in seeds]
        y = model.encode_text(chunk)
        z = sample(model, y, request.sampler_steps, gens)
        pixels = model.decode_latent(z).clamp(0.0, 1.0).numpy()
        for k, caption in enumerate(chunk):
            image_id = f"syn_{start + k:05d}"
            pairs.append(ImageTextPair(image_id, quantize(pixels[k]), (caption,)))
            prov.append(Provenance(image_id, seeds_text[start + k], seeds[k], captioner_id, source))
    return DistilledDataset(tuple(pairs), 1, tuple(prov))


def baseline_pretrained_synthesize(model: EdgeDiffusion, request: SynthesisRequest) -> DistilledDataset:
    """Same sampling procedure, applied to a model that was never EDGE fine-tuned."""
    return synthesize(model, request, source="pretrained-baseline",
                      captioner_id="pretrained-baseline")


def baseline_random_select(corpus: DatasetManifest, pair_count: int, seed: int) -> DistilledDataset:
    """Uniform sample of real (image, caption) pairs without replacement."""
    flat = [(r, c) for r in corpus.records for c in r.captions]
    if pair_count < 1 or pair_count > len(flat):
        raise InsufficientDataError(
            f"corpus has {len(flat)} pairs, cannot select {pair_count}"
        )
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(len(flat), size=pair_count, replace=False).tolist())
    pairs, prov = [], []
    for k in picks:
        rec, caption = flat[k]
        image_id = f"{rec.image_id}__{k:06d}"
        pairs.append(ImageTextPair(image_id, corpus.load_image(rec), (caption,)))
        prov.append(Provenance(image_id, caption, None, "corpus", "random-select"))
    return DistilledDataset(tuple(pairs), 1, tuple(prov))
