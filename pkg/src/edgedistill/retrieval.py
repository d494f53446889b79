"""Dual-encoder evaluation: train on a distilled set, report IR@K / TR@K."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset_io import DatasetManifest, DistilledDataset
from .errors import ConfigurationError, TrainingError, ValidationError
from .losses import EmbeddingBatch, contrastive_loss
from .text import BagOfWordsEncoder, Vocabulary

DEFAULT_KS = (1, 5, 10)


# ---------------------------------------------------------------------------
# towers

def _conv_small(channels: int, size: int, dim: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(channels, 16, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
        nn.Flatten(), nn.Linear(32 * (size // 4) ** 2, dim),
    )


def _conv_wide(channels: int, size: int, dim: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(channels, 32, 3, padding=1), nn.ReLU(),
        nn.Conv2d(32, 48, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(48, 48, 3, stride=2, padding=1), nn.ReLU(),
        nn.Flatten(), nn.Linear(48 * (size // 4) ** 2, dim),
    )


IMAGE_TOWERS: dict[str, Callable[[int, int, int], nn.Module]] = {
    "conv_small": _conv_small,
    "conv_wide": _conv_wide,
}


@dataclass
class EvalConfig:
    embed_dim: int = 64
    image_tower: str = "conv_small"
    freeze_text: bool = False
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 2e-3
    tau: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2)
    ks: tuple[int, ...] = DEFAULT_KS

    def validate(self):
        if self.image_tower not in IMAGE_TOWERS:
            raise ConfigurationError(f"eval.image_tower: unknown tower {self.image_tower!r}")
        if self.batch_size < 2:
            raise ConfigurationError("eval.batch_size must be >= 2")
        if self.epochs < 0 or self.learning_rate <= 0 or self.tau <= 0:
            raise ConfigurationError("eval.epochs, eval.learning_rate and eval.tau must be positive")
        if not self.seeds:
            raise ConfigurationError("eval.seeds must list at least one seed")


class DualEncoder(nn.Module):
    """Conv image tower and bag-of-words text tower into a shared unit sphere."""

    def __init__(self, vocab: Vocabulary, image_size: int = 32, channels: int = 3,
                 dim: int = 64, image_tower: str = "conv_small", freeze_text: bool = False):
        super().__init__()
        if image_tower not in IMAGE_TOWERS:
            raise ConfigurationError(
                f"unknown image tower {image_tower!r}; registered: {sorted(IMAGE_TOWERS)}"
            )
        self.image_size, self.channels, self.dim = image_size, channels, dim
        self.tower_id = image_tower
        self.image_tower = IMAGE_TOWERS[image_tower](channels, image_size, dim)
        self.text_tower = BagOfWordsEncoder(vocab, dim, out_dim=dim)
        self.freeze_text = freeze_text
        if freeze_text:
            self.text_tower.requires_grad_(False)

    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.image_tower(images), dim=1)

    def embed_texts(self, captions: Sequence[str]) -> torch.Tensor:
        return F.normalize(self.text_tower(captions), dim=1)


def registered_towers() -> list[str]:
    return sorted(IMAGE_TOWERS)


def swap_image_tower(model: DualEncoder, architecture: str, seed: int = 0) -> DualEncoder:
    """Fresh model identical in configuration except for the image tower."""
    if architecture not in IMAGE_TOWERS:
        raise ConfigurationError(
            f"unknown image tower {architecture!r}; registered: {sorted(IMAGE_TOWERS)}"
        )
    torch.manual_seed(seed)
    return DualEncoder(model.text_tower.vocab, model.image_size, model.channels, model.dim,
                       architecture, model.freeze_text)


def build_eval_model(vocab: Vocabulary, config: EvalConfig, seed: int,
                     image_size: int = 32, channels: int = 3) -> DualEncoder:
    config.validate()
    torch.manual_seed(seed)
    return DualEncoder(vocab, image_size, channels, config.embed_dim, config.image_tower,
                       config.freeze_text)


def eval_vocabulary(*caption_sources: Sequence[str]) -> Vocabulary:
    return Vocabulary.from_captions(c for src in caption_sources for c in src)


# ---------------------------------------------------------------------------
# training

def train_eval_model(
    dataset: DistilledDataset, config: EvalConfig, seed: int = 0,
    model: DualEncoder | None = None, vocab: Vocabulary | None = None,
) -> tuple[DualEncoder, list[float]]:
    """Symmetric InfoNCE over every (image, caption) combination of ``dataset``."""
    flat = dataset.flat_pairs()
    if len(flat) < 2:
        raise TrainingError("need at least two image-text pairs to train")
    images = torch.from_numpy(np.stack([p.image for p in dataset.pairs]))
    if model is None:
        vocab = vocab or eval_vocabulary([c for _, c in flat])
        model = build_eval_model(vocab, config, seed, images.shape[-1], images.shape[1])
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    model.train()
    for _ in range(config.epochs):
        order = torch.randperm(len(flat), generator=gen).tolist()
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            img = images[[flat[i][0] for i in idx]]
            caps = [flat[i][1] for i in idx]
            batch = EmbeddingBatch(model.embed_images(img), model.embed_texts(caps))
            _, _, loss = contrastive_loss(batch, config.tau, 1.0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    model.eval()
    return model, losses


# ---------------------------------------------------------------------------
# metrics

@dataclass
class RetrievalMetrics:
    ir_at: dict[int, float]
    tr_at: dict[int, float]
    alignment_score: float
    n_queries: int

    def __post_init__(self):
        for name, table in (("ir_at", self.ir_at), ("tr_at", self.tr_at)):
            ks = sorted(table)
            vals = [table[k] for k in ks]
            if any(v < 0 or v > 1 for v in vals):
                raise ValidationError(f"{name} values must lie in [0, 1]")
            if any(a > b for a, b in zip(vals, vals[1:])):
                raise ValidationError(f"{name} must be nondecreasing in K: {table}")

    def as_dict(self) -> dict:
        out = {f"IR@{k}": v for k, v in sorted(self.ir_at.items())}
        out.update({f"TR@{k}": v for k, v in sorted(self.tr_at.items())})
        out["alignment"] = self.alignment_score
        out["n_queries"] = self.n_queries
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalMetrics":
        ir = {int(k[3:]): float(v) for k, v in d.items() if k.startswith("IR@")}
        tr = {int(k[3:]): float(v) for k, v in d.items() if k.startswith("TR@")}
        return cls(ir, tr, float(d["alignment"]), int(d["n_queries"]))


def ranks_from_similarity(sim: np.ndarray) -> np.ndarray:
    """0-based rank of every candidate within its query row.

    Higher similarity ranks first; equal similarities keep candidate index
    order.
    """
    order = np.lexsort((np.broadcast_to(np.arange(sim.shape[1]), sim.shape), -sim), axis=1)
    ranks = np.empty_like(order)
    rows = np.arange(sim.shape[0])[:, None]
    ranks[rows, order] = np.arange(sim.shape[1])[None, :]
    return ranks


def retrieval_from_similarity(
    sim: np.ndarray, caption_image: Sequence[int], ks: Sequence[int] = DEFAULT_KS
) -> tuple[dict[int, float], dict[int, float], float]:
    """IR@K, TR@K and alignment from a caption-by-image cosine matrix.

    ``caption_image[c]`` is the index of the image that caption ``c``
    describes.  TR@K counts an image query as a hit when any of its own
    captions is in the top K.
    """
    sim = np.asarray(sim, dtype=np.float64)
    owner = np.asarray(caption_image, dtype=np.int64)
    n_caps, n_imgs = sim.shape
    if owner.shape != (n_caps,):
        raise ValidationError("caption_image must give one image per caption")
    if n_caps == 0 or n_imgs == 0:
        raise ValidationError("empty validation set")
    if set(owner.tolist()) != set(range(n_imgs)):
        raise ValidationError("every image needs at least one caption")
    for k in ks:
        if k < 1 or k > n_imgs:
            raise ValidationError(f"K={k} exceeds the {n_imgs} image candidates")
    # text -> image
    ir_rank = ranks_from_similarity(sim)[np.arange(n_caps), owner]
    # image -> text: best rank among the image's own captions
    tr_ranks = ranks_from_similarity(sim.T)
    best = np.full(n_imgs, n_caps, dtype=np.int64)
    np.minimum.at(best, owner, tr_ranks[owner, np.arange(n_caps)])
    ir = {k: float(np.mean(ir_rank < k)) for k in ks}
    tr = {k: float(np.mean(best < k)) for k in ks}
    alignment = float(sim[np.arange(n_caps), owner].mean())
    return ir, tr, alignment


@torch.no_grad()
def embed_manifest(model: DualEncoder, manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray, list[int]]:
    images = torch.from_numpy(np.stack([manifest.load_image(r) for r in manifest.records]))
    captions, owner = [], []
    for i, rec in enumerate(manifest.records):
        for c in rec.captions:
            captions.append(c)
            owner.append(i)
    model.eval()
    img = model.embed_images(images).double().numpy()
    txt = model.embed_texts(captions).double().numpy()
    return img, txt, owner


def compute_retrieval(
    model: DualEncoder, validation: DatasetManifest, ks: Sequence[int] = DEFAULT_KS
) -> RetrievalMetrics:
    if len(validation) == 0:
        raise ValidationError("validation set is empty")
    img, txt, owner = embed_manifest(model, validation)
    ir, tr, align = retrieval_from_similarity(txt @ img.T, owner, ks)
    return RetrievalMetrics(ir, tr, align, n_queries=len(owner))


@torch.no_grad()
def alignment_score(model: DualEncoder, dataset: DistilledDataset) -> float:
    """Mean cosine between each distilled image and each of its captions."""
    flat = dataset.flat_pairs()
    images = torch.from_numpy(np.stack([p.image for p in dataset.pairs]))
    model.eval()
    img = model.embed_images(images).double()
    txt = model.embed_texts([c for _, c in flat]).double()
    idx = torch.tensor([i for i, _ in flat])
    return float((img[idx] * txt).sum(dim=1).mean())


# ---------------------------------------------------------------------------
# multi-seed evaluation

@dataclass
class EvaluationReport:
    per_seed: dict[int, RetrievalMetrics]
    mean: dict[str, float]
    std: dict[str, float]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "per_seed": {str(s): m.as_dict() for s, m in self.per_seed.items()},
            "aggregate": {"mean": self.mean, "std": self.std},
            **self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvaluationReport":
        per_seed = {int(s): RetrievalMetrics.from_dict(m) for s, m in d["per_seed"].items()}
        meta = {k: v for k, v in d.items() if k not in ("per_seed", "aggregate")}
        return cls(per_seed, d["aggregate"]["mean"], d["aggregate"]["std"], meta)


def aggregate(metrics: Sequence[RetrievalMetrics]) -> tuple[dict[str, float], dict[str, float]]:
    """Mean and population standard deviation of every metric."""
    keys = [k for k in metrics[0].as_dict() if k != "n_queries"]
    table = {k: np.array([m.as_dict()[k] for m in metrics]) for k in keys}
    return ({k: float(v.mean()) for k, v in table.items()},
            {k: float(v.std()) for k, v in table.items()})


def evaluate_pipeline(
    distilled: DistilledDataset, validation: DatasetManifest, config: EvalConfig,
    seeds: Sequence[int] | None = None,
) -> EvaluationReport:
    """Train and score one evaluation model per seed; aggregate mean and std."""
    seeds = list(config.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigurationError("at least one evaluation seed is required")
    vocab = eval_vocabulary([c for p in distilled.pairs for c in p.captions])
    ks = [k for k in config.ks if k <= len(validation)]
    results = []
    for seed in seeds:
        model, _ = train_eval_model(distilled, config, seed, vocab=vocab)
        results.append(compute_retrieval(model, validation, ks))
    mean, std = aggregate(results)
    # a repeated seed keeps one per-seed entry but still counts in the aggregate
    return EvaluationReport(dict(zip(seeds, results)), mean, std, {"seeds": seeds})
